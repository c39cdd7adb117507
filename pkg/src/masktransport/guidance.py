"""Texture guidance: warp-field fusion, pseudo ground truth, cycle pass.

Fusing the K fields *before* sampling yields a pseudo ground-truth pair
produced by exactly one warp — spatially consistent by construction — which
anchors the style self-supervision.  The cycle pass re-runs the whole
pipeline with swapped roles to close the loop back onto the exemplar.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .geometry import sample
from .transport import AttentionNet, attention_maps


@dataclass
class PseudoGT:
    field: torch.Tensor  # fused warp field (B, H, W, 2)
    mask: torch.Tensor   # x̂_A^P = sample(y_A, field), (B, 1, H, W)
    image: torch.Tensor  # x̂_B^P = sample(y_B, field), (B, 3, H, W)

    def detach(self) -> "PseudoGT":
        return PseudoGT(self.field.detach(), self.mask.detach(), self.image.detach())


def guidance_attention(model: AttentionNet, warped_masks, conf_masks, y_b):
    """K-channel per-pixel softmax (no background channel)."""
    attn = attention_maps(model, warped_masks, conf_masks, y_b)
    if attn.shape[1] != warped_masks.shape[1]:
        raise ValueError(
            f"guidance attention must have K={warped_masks.shape[1]} channels, "
            f"got {attn.shape[1]}"
        )
    return attn


def fuse_warpfields(attn: torch.Tensor, fields: torch.Tensor) -> torch.Tensor:
    """ω_S = Σ_i m_i^T · ω_i, per-pixel convex combination of coordinates.

    attn (B, K, H, W), fields (B, K, H, W, 2) -> (B, H, W, 2).
    """
    if attn.shape[1] != fields.shape[1]:
        raise ValueError(f"count mismatch: {attn.shape[1]} weights vs {fields.shape[1]} fields")
    return (attn[..., None] * fields).sum(dim=1)


def pseudo_ground_truth(field: torch.Tensor, y_a: torch.Tensor,
                        y_b: torch.Tensor) -> PseudoGT:
    """Single-warp pseudo ground truth; differentiable through the field."""
    mask = sample(y_a, field, padding="zeros")
    image = sample(y_b, field, padding="border")
    return PseudoGT(field=field, mask=mask, image=image)


def cycle_pass(pipeline: Callable, x_a: torch.Tensor, y_a: torch.Tensor,
               y_b: torch.Tensor, pseudo: PseudoGT, detach_pseudo: bool = False):
    """Run the pipeline with swapped roles and return ŷ_B.

    The swapped pass uses the exemplar mask y_A as the conditional mask and
    the (geometrically consistent) pseudo-GT pair as the exemplar:
    conditional := y_A, exemplar mask := x̂_A^P, exemplar image := x̂_B^P.
    ``pipeline`` is any callable (x_a, y_a, y_b) -> forward dict containing
    "output_image".  With ``detach_pseudo`` gradients do not flow back into
    the first pass.
    """
    src = pseudo.detach() if detach_pseudo else pseudo
    result = pipeline(y_a, src.mask, src.image)
    return result["output_image"]
