"""End-to-end forward pass: correspondence -> transport -> texture guidance.

`forward_once` is the single assembly point used by both the training step
and inference, so the two can never drift apart.  Inference adds checkpoint
loading (`load_model`), mask extraction helpers, and `manipulate`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch
from scipy import ndimage

from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    load_checkpoint,
    load_module_segments,
    module_segments,
)
from .correspondence import KeypointPredictor, correspond, masked_exemplar
from .guidance import PseudoGT, fuse_warpfields, guidance_attention, pseudo_ground_truth
from .transport import AttentionNet, attention_maps, confidence_masks, transport


@dataclass
class ArchConfig:
    """Architecture hyperparameters shared by training and inference."""

    num_keypoints: int = 10
    internal_resolution: int = 64
    block_expansion: int = 32
    num_blocks: int = 5
    max_features: int = 256
    attention_block_expansion: int = 32
    attention_num_blocks: int = 4
    attention_max_features: int = 256

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        return cls(**{k: int(v) for k, v in data.items()})


@dataclass
class ModelBundle:
    predictor: KeypointPredictor
    transport_net: AttentionNet
    guidance_net: AttentionNet
    arch: ArchConfig

    def modules(self) -> Dict[str, torch.nn.Module]:
        return {
            "correspondence": self.predictor,
            "transport": self.transport_net,
            "guidance": self.guidance_net,
        }

    def parameters(self):
        for module in self.modules().values():
            yield from module.parameters()

    def named_parameters(self):
        for prefix, module in self.modules().items():
            for name, p in module.named_parameters():
                yield f"{prefix}/{name}", p

    def train(self) -> "ModelBundle":
        for m in self.modules().values():
            m.train()
        return self

    def eval(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self

    def segments(self) -> Dict[str, torch.Tensor]:
        out: Dict[str, torch.Tensor] = {}
        for prefix, module in self.modules().items():
            out.update(module_segments(prefix, module))
        return out


def build_models(arch: ArchConfig, seed: int = 0) -> ModelBundle:
    """Deterministic construction: same (arch, seed) -> same initial weights."""
    torch.manual_seed(seed)
    k = arch.num_keypoints
    predictor = KeypointPredictor(
        num_keypoints=k,
        block_expansion=arch.block_expansion,
        num_blocks=arch.num_blocks,
        max_features=arch.max_features,
        internal_resolution=arch.internal_resolution,
    )
    transport_net = AttentionNet(
        num_candidates=k,
        out_channels=k + 1,
        block_expansion=arch.attention_block_expansion,
        num_blocks=arch.attention_num_blocks,
        max_features=arch.attention_max_features,
    )
    guidance_net = AttentionNet(
        num_candidates=k,
        out_channels=k,
        block_expansion=arch.attention_block_expansion,
        num_blocks=arch.attention_num_blocks,
        max_features=arch.attention_max_features,
    )
    return ModelBundle(predictor=predictor, transport_net=transport_net,
                       guidance_net=guidance_net, arch=arch)


def forward_once(bundle: ModelBundle, x_a: torch.Tensor, y_a: torch.Tensor,
                 y_b: torch.Tensor, *, output_size=None,
                 with_guidance: bool = True) -> dict:
    """conditional mask + exemplar pair -> transported image and friends.

    Returns a dict with the correspondence output, transport attention and
    fused outputs, and (when `with_guidance`) the fused warp field plus the
    single-warp pseudo ground truth.
    """
    corr = correspond(bundle.predictor, x_a, y_a, y_b, output_size=output_size)
    conf = confidence_masks(x_a if output_size is None else _resize_mask(x_a, corr),
                            corr.warped_masks)
    attn_i = attention_maps(bundle.transport_net, corr.warped_masks, conf,
                            _resize_image(y_b, corr))
    fused_mask, fused_image = transport(
        attn_i, corr.warped_images, corr.warped_masks,
        _resize_image(y_b, corr), _resize_mask(y_a, corr))
    result = {
        "correspondence": corr,
        "confidence": conf,
        "attention_transport": attn_i,
        "output_mask": fused_mask,
        "output_image": fused_image,
    }
    if with_guidance:
        attn_t = guidance_attention(bundle.guidance_net, corr.warped_masks, conf,
                                    _resize_image(y_b, corr))
        fused_field = fuse_warpfields(attn_t, corr.fields)
        pseudo = pseudo_ground_truth(fused_field, _resize_mask(y_a, corr),
                                     _resize_image(y_b, corr))
        result.update(
            attention_guidance=attn_t,
            fused_field=fused_field,
            pseudo=pseudo,
        )
    return result


def _resize_mask(mask: torch.Tensor, corr) -> torch.Tensor:
    h, w = corr.warped_masks.shape[-2:]
    if mask.shape[-2:] == (h, w):
        return mask
    return torch.nn.functional.interpolate(mask, size=(h, w), mode="nearest")


def _resize_image(image: torch.Tensor, corr) -> torch.Tensor:
    h, w = corr.warped_masks.shape[-2:]
    if image.shape[-2:] == (h, w):
        return image
    return torch.nn.functional.interpolate(image, size=(h, w), mode="bilinear",
                                           align_corners=True)


# ---------------------------------------------------------------------------
# checkpoint loading / inference
# ---------------------------------------------------------------------------

def load_model(path) -> tuple:
    """Checkpoint file -> (frozen ModelBundle, Checkpoint).

    Verifies the container version and that the declared keypoint count is
    consistent with the stored tensor shapes before instantiating anything.
    """
    ckpt = load_checkpoint(path)
    arch_dict = ckpt.config.get("arch")
    if not arch_dict:
        raise CheckpointFormatError(f"{path}: header missing arch config")
    arch = ArchConfig.from_dict(arch_dict)

    head = ckpt.tensors.get("correspondence/heatmap_head.weight")
    if head is None:
        raise CheckpointFormatError(f"{path}: missing correspondence segment")
    if head.shape[0] != arch.num_keypoints:
        raise CheckpointFormatError(
            f"{path}: declared K={arch.num_keypoints} but correspondence "
            f"segment has {head.shape[0]} heatmap channels"
        )
    t_head = ckpt.tensors.get("transport/head.weight")
    if t_head is not None and t_head.shape[0] != arch.num_keypoints + 1:
        raise CheckpointFormatError(
            f"{path}: transport segment emits {t_head.shape[0]} attention "
            f"channels, expected K+1={arch.num_keypoints + 1}"
        )

    bundle = build_models(arch)
    for prefix, module in bundle.modules().items():
        load_module_segments(prefix, module, ckpt.tensors)
    bundle.eval()
    for p in bundle.parameters():
        p.requires_grad_(False)
    return bundle, ckpt


@torch.no_grad()
def manipulate(bundle: ModelBundle, y_b: torch.Tensor, y_a: torch.Tensor,
               x_a: torch.Tensor, *, diagnostics: bool = False) -> dict:
    """One edit: returns x̂_B at exemplar resolution plus the fused mask.

    Accepts a single sample (3,H,W)/(1,H,W) or batched tensors; a non-binary
    conditional mask is thresholded at 0.5 and flagged in the result.
    """
    squeeze = y_b.dim() == 3
    if squeeze:
        y_b, y_a, x_a = y_b[None], y_a[None], x_a[None]
    if y_a.shape[-2:] != y_b.shape[-2:] or x_a.shape[-2:] != y_b.shape[-2:]:
        raise ValueError(
            f"mask resolution {tuple(x_a.shape[-2:])}/{tuple(y_a.shape[-2:])} "
            f"does not match exemplar {tuple(y_b.shape[-2:])}"
        )
    binarized = False
    if ((x_a != 0) & (x_a != 1)).any():
        x_a = (x_a >= 0.5).float()
        binarized = True

    was_training = bundle.predictor.training
    bundle.eval()
    try:
        out = forward_once(bundle, x_a, y_a, y_b,
                           output_size=tuple(y_b.shape[-2:]),
                           with_guidance=diagnostics)
    finally:
        if was_training:
            bundle.train()

    result = {
        "output_image": out["output_image"][0] if squeeze else out["output_image"],
        "output_mask": out["output_mask"][0] if squeeze else out["output_mask"],
        "binarized_input": binarized,
    }
    if diagnostics:
        corr = out["correspondence"]
        result["diagnostics"] = {
            "source_keypoints": corr.source.positions[0] if squeeze else corr.source.positions,
            "driver_keypoints": corr.driver.positions[0] if squeeze else corr.driver.positions,
            "attention": out["attention_transport"][0] if squeeze else out["attention_transport"],
            "fused_field": out["fused_field"][0] if squeeze else out["fused_field"],
            "degenerate": corr.degenerate[0] if squeeze else corr.degenerate,
        }
    return result


# ---------------------------------------------------------------------------
# mask extraction
# ---------------------------------------------------------------------------

class MaskBackendError(RuntimeError):
    """Raised when no mask backend can produce a mask."""


def _otsu_threshold(gray: np.ndarray) -> float:
    """Classic between-class-variance maximization over a 256-bin histogram."""
    hist, edges = np.histogram(gray, bins=256, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    total = hist.sum()
    if total == 0:
        return 0.5
    centers = (edges[:-1] + edges[1:]) / 2
    weight_bg = np.cumsum(hist)
    weight_fg = total - weight_bg
    mean_bg = np.cumsum(hist * centers) / np.maximum(weight_bg, 1e-12)
    total_mean = (hist * centers).sum() / total
    mean_fg = (total_mean * total - np.cumsum(hist * centers)) / np.maximum(weight_fg, 1e-12)
    variance = weight_bg * weight_fg * (mean_bg - mean_fg) ** 2
    variance[weight_bg == 0] = 0
    variance[weight_fg == 0] = 0
    return float(centers[int(np.argmax(variance))])


def auto_mask(image: torch.Tensor) -> torch.Tensor:
    """Otsu threshold + largest connected component -> (1,H,W) binary mask."""
    gray = image.detach().cpu().float().mean(0).numpy()
    thresh = _otsu_threshold(gray)
    binary = gray > thresh
    if not binary.any():
        return torch.zeros(1, *gray.shape)
    labels, count = ndimage.label(binary)
    if count > 1:
        sizes = ndimage.sum_labels(np.ones_like(gray), labels, range(1, count + 1))
        binary = labels == (int(np.argmax(sizes)) + 1)
    return torch.from_numpy(binary.astype(np.float32))[None]


def extract_mask(image: torch.Tensor, *, mask_file=None,
                 segmenter_url: Optional[str] = None,
                 prompt: Optional[dict] = None,
                 timeout: float = 10.0) -> torch.Tensor:
    """Mask from a file, an external segmenter endpoint, or Otsu fallback."""
    from . import data as data_mod

    if mask_file is not None:
        return data_mod.load_mask(mask_file, image.shape[-1])
    if segmenter_url is not None:
        import httpx

        payload = data_mod.encode_image_png(image)
        try:
            response = httpx.post(
                segmenter_url,
                files={"image": ("image.png", payload, "image/png")},
                data={"prompt": __import__("json").dumps(prompt or {})},
                timeout=timeout,
            )
            response.raise_for_status()
        except Exception as exc:
            raise MaskBackendError(
                f"segmenter at {segmenter_url} unreachable ({exc}); running in "
                "degraded mode — supply a mask file instead"
            ) from exc
        return data_mod.decode_mask_png(response.content, image.shape[-1])
    return auto_mask(image)
