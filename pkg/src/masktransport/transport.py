"""Region transportation: confidence masks, attention, convex fusion.

The output image is a per-pixel convex combination of the K warped exemplar
candidates plus the unwarped exemplar itself (channel 0, background
estimation).  No pixel value absent from the candidates can appear in the
output — the structural guarantee behind artifact-free compositing.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .correspondence import Hourglass


class AttentionNet(nn.Module):
    """Encoder-decoder producing per-pixel fusion logits at input resolution.

    Input channels: K warped masks + K confidence masks + 3 exemplar
    channels.  ``out_channels`` is K+1 for image transport (background channel
    first) and K for warp-field guidance.
    """

    def __init__(self, num_candidates, out_channels, block_expansion=32,
                 num_blocks=4, max_features=256):
        super().__init__()
        self.num_candidates = num_candidates
        self.out_channels = out_channels
        in_channels = 2 * num_candidates + 3
        self.hourglass = Hourglass(in_channels, block_expansion, num_blocks, max_features)
        self.head = nn.Conv2d(self.hourglass.out_channels, out_channels, kernel_size=7, padding=3)

    def forward(self, x):
        return self.head(self.hourglass(x))


def confidence_masks(x_a: torch.Tensor, warped_masks: torch.Tensor) -> torch.Tensor:
    """m_f^i = x_A - warped mask i; (B, 1, H, W) x (B, K, H, W) -> (B, K, H, W)."""
    if x_a.shape[-2:] != warped_masks.shape[-2:]:
        raise ValueError(
            f"shape mismatch: x_A {tuple(x_a.shape)} vs warped {tuple(warped_masks.shape)}"
        )
    return x_a[:, 0][:, None] - warped_masks if x_a.dim() == 4 else x_a - warped_masks


def attention_input(warped_masks: torch.Tensor, conf_masks: torch.Tensor,
                    y_b: torch.Tensor) -> torch.Tensor:
    """Stack network inputs: (B, K, H, W) + (B, K, H, W) + (B, 3, H, W)."""
    return torch.cat([warped_masks, conf_masks, y_b], dim=1)


def attention_maps(model: AttentionNet, warped_masks: torch.Tensor,
                   conf_masks: torch.Tensor, y_b: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the model's logit channels; sums to 1."""
    x = attention_input(warped_masks, conf_masks, y_b)
    expected = 2 * model.num_candidates + 3
    if x.shape[1] != expected:
        raise ValueError(f"attention input has {x.shape[1]} channels, expected {expected}")
    return torch.softmax(model(x), dim=1)


def transport(attn: torch.Tensor, warped_images: torch.Tensor,
              warped_masks: torch.Tensor, y_b: torch.Tensor, y_a: torch.Tensor):
    """Weighted fusion of candidates into (x̂_A, x̂_B).

    Candidate 0 is the unwarped exemplar pair (y_A, y_B) for background
    estimation; candidates 1..K are the warped pairs.  ``attn`` is
    (B, K+1, H, W) and must already sum to one per pixel.
    """
    k = warped_images.shape[1]
    if attn.shape[1] != k + 1:
        raise ValueError(f"attention has {attn.shape[1]} channels for {k} warped candidates")
    images = torch.cat([y_b[:, None], warped_images], dim=1)    # (B, K+1, 3, H, W)
    masks = torch.cat([y_a[:, 0][:, None], warped_masks], dim=1)  # (B, K+1, H, W)
    fused_image = (attn[:, :, None] * images).sum(dim=1)
    fused_mask = (attn * masks).sum(dim=1, keepdim=True)
    return fused_mask, fused_image
