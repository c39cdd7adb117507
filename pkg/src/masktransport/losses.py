"""Training objectives: boundary-IoU, contextual, equivariance, perceptual,
mask alignment, reconstruction, cycle, and the weighted total.

Every loss is >= 0, exactly 0 on its identity case, and differentiable with
respect to its model-dependent argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .correspondence import KeypointSet
from .features import FeatureExtractor
from .geometry import TPSParams, apply_tps, make_identity_grid, sample, tps_jacobian, tps_transform_points


@dataclass(frozen=True)
class LossWeights:
    """λ1..λ7 for (eq, perc, context, bound, mask, rec, cyc)."""

    eq: float = 10.0
    perc: float = 10.0
    context: float = 1.0
    bound: float = 10.0
    mask: float = 10.0
    rec: float = 10.0
    cyc: float = 10.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass(frozen=True)
class ContextualConfig:
    layers: tuple = ("mid1", "mid2", "deep")
    layer_weights: tuple = (1.0, 1.0, 1.0)
    bandwidth: float = 0.5
    eps: float = 1e-5
    max_positions: int = 4096  # spatial subsample cap, keeps the pair matrix small


# ---------------------------------------------------------------------------
# boundary IoU
# ---------------------------------------------------------------------------

def soft_boundary(mask: torch.Tensor, dilation: int) -> torch.Tensor:
    """mask - erosion_d(mask), with min-pooling as differentiable erosion.

    The frame outside the mask counts as background (explicit zero padding),
    so boundaries touching the image border are part of the band.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    shape = mask.shape
    flat = mask.reshape(-1, 1, *shape[-2:])
    padded = F.pad(flat, (dilation,) * 4, value=0.0)
    eroded = -F.max_pool2d(-padded, kernel_size=2 * dilation + 1, stride=1)
    return (flat - eroded).reshape(shape)


def boundary_iou_loss(warped_masks: torch.Tensor, x_a: torch.Tensor,
                      dilation: int = 2, eps: float = 1e-6) -> torch.Tensor:
    """Mean over candidates of 1 - softBoundaryIoU(warped_i, x_A).

    warped_masks (B, K, H, W) or (K, H, W); x_a (B, 1, H, W) / (H, W);
    soft IoU = (Σ min + eps) / (Σ max + eps), so identical masks (including
    two empty ones) score a loss of exactly 0.
    """
    if warped_masks.shape[-2:] != x_a.shape[-2:]:
        raise ValueError(
            f"shape mismatch: warped {tuple(warped_masks.shape)} vs x_A {tuple(x_a.shape)}"
        )
    bw = soft_boundary(warped_masks, dilation)
    bx = soft_boundary(x_a, dilation)
    if bw.dim() == 4 and bx.dim() == 4:
        bx = bx[:, 0][:, None]  # (B, 1, H, W) broadcast over K
    inter = torch.minimum(bw, bx).flatten(-2).sum(-1)
    union = torch.maximum(bw, bx).flatten(-2).sum(-1)
    iou = (inter + eps) / (union + eps)
    return (1.0 - iou).mean()


# ---------------------------------------------------------------------------
# contextual loss
# ---------------------------------------------------------------------------

def _subsample_positions(feat: torch.Tensor, cap: int) -> torch.Tensor:
    """(B, C, h, w) -> (B, N, C) with N <= cap via deterministic striding."""
    b, c = feat.shape[:2]
    flat = feat.flatten(2).transpose(1, 2)  # (B, N, C)
    n = flat.shape[1]
    if n > cap:
        stride = -(-n // cap)  # ceil
        flat = flat[:, ::stride]
    return flat


def contextual_similarity(feat_a: torch.Tensor, feat_b: torch.Tensor,
                          bandwidth: float, eps: float) -> torch.Tensor:
    """CX between two (B, N, C)/(B, M, C) feature sets; returns (B,) in (0, 1].

    Relative cosine distances with bandwidth softmax, aggregated mean-max:
    every target feature must find some generated feature that explains it.
    Degenerate for constant feature maps (all positions identical).
    """
    mu = feat_b.mean(dim=1, keepdim=True)
    a = F.normalize(feat_a - mu, dim=-1, eps=1e-12)
    b = F.normalize(feat_b - mu, dim=-1, eps=1e-12)
    dist = 1.0 - torch.bmm(a, b.transpose(1, 2))          # (B, N_a, N_b)
    rel = dist / (dist.min(dim=1, keepdim=True).values + eps)
    weight = torch.exp((1.0 - rel) / bandwidth)
    cx = weight / weight.sum(dim=1, keepdim=True)          # softmax over generated i
    return cx.max(dim=1).values.mean(dim=1)                # mean over targets j


def contextual_loss(image_a: torch.Tensor, image_b: torch.Tensor,
                    cfg: ContextualConfig, phi: FeatureExtractor) -> torch.Tensor:
    """Σ_l w_l · (-log CX(φ^l(a), φ^l(b))); spatially tolerant color/texture match."""
    feats_a = phi(image_a)
    feats_b = phi(image_b)
    total = image_a.new_zeros(())
    for layer, w in zip(cfg.layers, cfg.layer_weights):
        fa = _subsample_positions(feats_a[layer], cfg.max_positions)
        fb = _subsample_positions(feats_b[layer], cfg.max_positions)
        cx = contextual_similarity(fa, fb, cfg.bandwidth, cfg.eps)
        total = total + w * (-torch.log(cx.clamp(min=1e-12))).mean()
    return total


# ---------------------------------------------------------------------------
# equivariance
# ---------------------------------------------------------------------------

def equivariance_from_keypoints(kp_a: KeypointSet, tps: TPSParams,
                                kp_b: KeypointSet) -> torch.Tensor:
    """Penalty for kp_a deviating from T∘kp_b (positions and local jacobians).

    Zero iff kp_a.positions = T(kp_b.positions) and
    kp_a.jacobians = ∇T(kp_b.positions) @ kp_b.jacobians.
    """
    moved = tps_transform_points(tps, kp_b.positions)
    pos_term = (kp_a.positions - moved).abs().mean()
    jac_t = tps_jacobian(tps, kp_b.positions)
    composed = jac_t @ kp_b.jacobians
    eye = torch.eye(2, dtype=composed.dtype, device=composed.device)
    resid = eye - torch.linalg.solve(kp_a.jacobians, composed)
    return pos_term + resid.abs().mean()


def equivariance_loss(model, image: torch.Tensor, tps: TPSParams) -> torch.Tensor:
    """Predict keypoints on ``image`` and its TPS deformation; penalize drift.

    The deformed frame is built by backward-sampling through the field of T,
    so content at z in the deformed image came from T(z): original keypoints
    must equal T(deformed keypoints).
    """
    grid = make_identity_grid(image.shape[-2], image.shape[-1], device=image.device)
    warp = apply_tps(tps, grid).to(image.dtype)
    deformed = sample(image, warp.unsqueeze(0).expand(image.shape[0], -1, -1, -1),
                      padding="border")
    kp_orig = model(image)
    kp_def = model(deformed)
    return equivariance_from_keypoints(kp_orig, tps, kp_def)


# ---------------------------------------------------------------------------
# simple image/mask penalties
# ---------------------------------------------------------------------------

def perceptual_loss(image_a: torch.Tensor, image_b: torch.Tensor,
                    phi: FeatureExtractor, layers=None) -> torch.Tensor:
    """Mean-abs feature difference, averaged over the configured layers."""
    feats_a = phi(image_a)
    feats_b = phi(image_b)
    names = layers if layers is not None else phi.layer_names
    terms = [(feats_a[n] - feats_b[n]).abs().mean() for n in names]
    return torch.stack(terms).mean()


def mask_alignment_losses(fused_mask: torch.Tensor, pseudo_mask: torch.Tensor,
                          x_a: torch.Tensor):
    """(L_mask^I, L_mask^T): mean-abs distance of each predicted mask to x_A."""
    return (fused_mask - x_a).abs().mean(), (pseudo_mask - x_a).abs().mean()


def reconstruction_loss(fused_image: torch.Tensor, pseudo_image: torch.Tensor) -> torch.Tensor:
    """Mean-abs distance between the transported output and the pseudo GT."""
    return (fused_image - pseudo_image).abs().mean()


def cycle_loss(y_b: torch.Tensor, y_b_hat: torch.Tensor) -> torch.Tensor:
    """Mean-abs distance between the exemplar and its cycle reconstruction."""
    return (y_b - y_b_hat).abs().mean()


_TERM_KEYS = ("eq", "perc", "context", "bound", "mask_i", "mask_t", "rec", "cyc")


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum; returns (total, per-term float breakdown).

    total = λ_eq·eq + λ_perc·perc + λ_ctx·context + λ_bound·bound
          + λ_mask·(mask_i + mask_t) + λ_rec·rec + λ_cyc·cyc
    """
    missing = [k for k in _TERM_KEYS if k not in terms]
    if missing:
        raise KeyError(f"missing loss terms: {missing}")
    total = (
        weights.eq * terms["eq"]
        + weights.perc * terms["perc"]
        + weights.context * terms["context"]
        + weights.bound * terms["bound"]
        + weights.mask * (terms["mask_i"] + terms["mask_t"])
        + weights.rec * terms["rec"]
        + weights.cyc * terms["cyc"]
    )
    breakdown = {k: float(terms[k].detach()) for k in _TERM_KEYS}
    breakdown["total"] = float(total.detach()) if torch.is_tensor(total) else float(total)
    return total, breakdown
