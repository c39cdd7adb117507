"""Mask-driven correspondence: keypoints, local affines, full-resolution warps.

A shared hourglass predictor maps the conditional mask (replicated to three
channels) and the masked exemplar to K heatmaps plus 4K local-Jacobian
channels.  Softargmax turns heatmaps into keypoint positions; per-keypoint
affines between the two sides are dilated into K full-resolution backward
warp fields used to produce warped mask/image candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Affine2D, affine_to_warpfield, make_identity_grid, sample_many


@dataclass
class KeypointSet:
    """K keypoints: positions (B, K, 2), jacobians (B, K, 2, 2), heatmaps (B, K, h, w)."""

    positions: torch.Tensor
    jacobians: torch.Tensor
    heatmaps: torch.Tensor

    @property
    def count(self) -> int:
        return self.positions.shape[1]


@dataclass
class CorrespondenceOutput:
    source: KeypointSet           # from the conditional mask x_A
    driver: KeypointSet           # from the masked exemplar y_A * y_B
    affines: Affine2D             # (B, K) local affines, output frame -> exemplar frame
    degenerate: torch.Tensor      # (B, K) bool: singular jacobian or empty input
    fields: torch.Tensor          # (B, K, H, W, 2) backward warp fields
    warped_masks: torch.Tensor    # (B, K, H, W) in [0, 1]
    warped_images: torch.Tensor   # (B, K, 3, H, W)


# ---------------------------------------------------------------------------
# network blocks
# ---------------------------------------------------------------------------

class DownBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1)
        self.norm = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x):
        return F.avg_pool2d(F.relu(self.norm(self.conv(x))), 2)


class UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1)
        self.norm = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(x)))


class Hourglass(nn.Module):
    """Encoder-decoder with skip concatenations; output keeps input resolution.

    Output channels = block_expansion + in_channels.
    """

    def __init__(self, in_channels, block_expansion=32, num_blocks=5, max_features=256):
        super().__init__()
        def width(i):
            return min(max_features, block_expansion * (2 ** i))

        self.down_blocks = nn.ModuleList(
            [DownBlock(in_channels if i == 0 else width(i), width(i + 1)) for i in range(num_blocks)]
        )
        up_blocks = []
        for i in reversed(range(num_blocks)):
            cin = width(i + 1) if i == num_blocks - 1 else width(i + 1) + width(i + 1)
            up_blocks.append(UpBlock(cin, width(i)))
        self.up_blocks = nn.ModuleList(up_blocks)
        self.out_channels = width(0) + in_channels

    def forward(self, x):
        skips = [x]
        for block in self.down_blocks:
            skips.append(block(skips[-1]))
        out = skips.pop()
        for i, block in enumerate(self.up_blocks):
            out = block(out if i == 0 else torch.cat([out, skips.pop()], dim=1))
        return torch.cat([out, skips.pop()], dim=1)


class KeypointPredictor(nn.Module):
    """Hourglass -> K heatmap channels + 4K jacobian channels.

    The jacobian head starts as exactly identity (zero weights, [1,0,0,1]
    bias) so early training sees well-conditioned local affines.
    """

    def __init__(self, num_keypoints=10, in_channels=3, block_expansion=32,
                 num_blocks=5, max_features=256, temperature=0.1,
                 internal_resolution=64):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.temperature = temperature
        self.internal_resolution = internal_resolution
        self.hourglass = Hourglass(in_channels, block_expansion, num_blocks, max_features)
        self.heatmap_head = nn.Conv2d(self.hourglass.out_channels, num_keypoints,
                                      kernel_size=7, padding=3)
        self.jacobian_head = nn.Conv2d(self.hourglass.out_channels, 4 * num_keypoints,
                                       kernel_size=7, padding=3)
        nn.init.zeros_(self.jacobian_head.weight)
        self.jacobian_head.bias.data.copy_(
            torch.tensor([1.0, 0.0, 0.0, 1.0]).repeat(num_keypoints)
        )

    def forward(self, image: torch.Tensor) -> KeypointSet:
        r = self.internal_resolution
        if image.shape[-2:] != (r, r):
            image = F.interpolate(image, size=(r, r), mode="bilinear", align_corners=True)
        feats = self.hourglass(image)
        logits = self.heatmap_head(feats)
        heatmaps = torch.softmax(logits.flatten(2) / self.temperature, dim=-1).reshape_as(logits)
        positions = softargmax(heatmaps)
        jac_map = self.jacobian_head(feats)
        b, _, h, w = jac_map.shape
        jac_map = jac_map.reshape(b, self.num_keypoints, 4, h, w)
        jacobians = torch.einsum("bkhw,bkchw->bkc", heatmaps, jac_map).reshape(b, -1, 2, 2)
        return KeypointSet(positions=positions, jacobians=jacobians, heatmaps=heatmaps)


def softargmax(heatmaps: torch.Tensor) -> torch.Tensor:
    """Heatmap-weighted mean of grid coordinates; (B, K, h, w) -> (B, K, 2)."""
    h, w = heatmaps.shape[-2:]
    grid = make_identity_grid(h, w, device=heatmaps.device).to(heatmaps.dtype)
    return torch.einsum("bkhw,hwc->bkc", heatmaps, grid)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def masked_exemplar(y_a: torch.Tensor, y_b: torch.Tensor) -> torch.Tensor:
    """y' = y_A * y_B elementwise; mask (B, 1, H, W), image (B, 3, H, W)."""
    if y_a.shape[-2:] != y_b.shape[-2:] or y_a.shape[0] != y_b.shape[0]:
        raise ValueError(f"mask/image shape mismatch: {tuple(y_a.shape)} vs {tuple(y_b.shape)}")
    return y_a * y_b


def local_affines(source: KeypointSet, driver: KeypointSet, det_eps: float = 1e-6):
    """Per-keypoint affine mapping output-frame coords to exemplar-frame coords.

    linear = J_drv @ J_src^-1, translation = p_drv - linear @ p_src.  Source
    jacobians with |det| < det_eps fall back to an identity linear part and
    are reported in the returned degeneracy flags (B, K).

    Tied keypoint sets (bitwise-equal positions and jacobians, e.g. both
    sides saw the same input) short-circuit to exact identity linears, so
    downstream warp fields reproduce the identity grid exactly.
    """
    if source.count != driver.count:
        raise ValueError(f"keypoint count mismatch: {source.count} vs {driver.count}")
    j_src, j_drv = source.jacobians, driver.jacobians
    p_src, p_drv = source.positions, driver.positions

    tied = (
        not j_src.requires_grad and not j_drv.requires_grad
        and torch.equal(j_src, j_drv) and torch.equal(p_src, p_drv)
    )
    det = j_src[..., 0, 0] * j_src[..., 1, 1] - j_src[..., 0, 1] * j_src[..., 1, 0]
    degenerate = det.abs() < det_eps
    if tied:
        linear = torch.eye(2, dtype=j_src.dtype, device=j_src.device).expand_as(j_src).clone()
    else:
        safe_det = torch.where(degenerate, torch.ones_like(det), det)
        inv_src = torch.stack(
            [
                torch.stack([j_src[..., 1, 1], -j_src[..., 0, 1]], dim=-1),
                torch.stack([-j_src[..., 1, 0], j_src[..., 0, 0]], dim=-1),
            ],
            dim=-2,
        ) / safe_det[..., None, None]
        eye = torch.eye(2, dtype=j_src.dtype, device=j_src.device).expand_as(inv_src)
        inv_src = torch.where(degenerate[..., None, None], eye, inv_src)
        linear = j_drv @ inv_src
    translation = p_drv - torch.einsum("bkij,bkj->bki", linear, p_src)
    return Affine2D(linear, translation), degenerate


def dilate(affines: Affine2D, height: int, width: int) -> torch.Tensor:
    """Extend (B, K) local affines into K full-resolution warp fields."""
    return affine_to_warpfield(affines, height, width)


def correspond(model: KeypointPredictor, x_a: torch.Tensor, y_a: torch.Tensor,
               y_b: torch.Tensor, output_size=None) -> CorrespondenceOutput:
    """Full correspondence pass.

    Parameters
    ----------
    x_a : (B, 1, H, W) conditional mask
    y_a : (B, 1, H, W) exemplar mask
    y_b : (B, 3, H, W) exemplar image
    output_size : (H, W) for the warp fields; defaults to the exemplar's.
    """
    if x_a.shape[-2:] != y_a.shape[-2:] or x_a.shape[-2:] != y_b.shape[-2:]:
        raise ValueError(
            f"input shape mismatch: {tuple(x_a.shape)}, {tuple(y_a.shape)}, {tuple(y_b.shape)}"
        )
    height, width = output_size if output_size is not None else y_b.shape[-2:]
    source = model(x_a.expand(-1, 3, -1, -1))
    driver = model(masked_exemplar(y_a, y_b))
    affines, degenerate = local_affines(source, driver)
    empty = (x_a.flatten(1).sum(-1) < 1e-6) | (y_a.flatten(1).sum(-1) < 1e-6)
    degenerate = degenerate | empty[:, None]
    fields = dilate(affines, height, width)
    warped_masks = sample_many(y_a, fields, padding="zeros").squeeze(2)
    warped_images = sample_many(y_b, fields, padding="border")
    return CorrespondenceOutput(
        source=source,
        driver=driver,
        affines=affines,
        degenerate=degenerate,
        fields=fields,
        warped_masks=warped_masks,
        warped_images=warped_images,
    )
