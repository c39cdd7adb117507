"""Frozen convolutional feature extractor for perceptual-style losses/metrics.

The default backend is a deterministic, seed-fixed convolutional stack:
weights are drawn once from a named seed, never trained, and identical on
every machine.  Hierarchical random features are a standard stand-in where
pretrained weights cannot be downloaded; every consumer (contextual,
perceptual, style, LPIPS-style distances) only needs a fixed, reasonably
decorrelating feature map, not ImageNet semantics.

A ``vgg16`` backend is provided for environments with torchvision weights
available; it raises a clear error otherwise instead of silently degrading.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

_BUILTIN_SEED = 0x5EED
# (tag, out_channels, stride); taps are taken after each ReLU
_BUILTIN_PLAN = (
    ("shallow", 24, 1),
    ("mid1", 48, 2),
    ("mid2", 96, 2),
    ("deep", 160, 2),
)


class FeatureBackendError(RuntimeError):
    """Raised when a requested feature backend cannot be constructed."""


class FeatureExtractor(nn.Module):
    """Exposes named layer activations of a frozen backbone.

    forward(image) -> {layer_name: (B, C, h, w) tensor}; image is (B, 3, H, W)
    in [0, 1].  Weights are buffers (never trained, never checkpointed) and
    are cast on the fly so float64 inputs get float64 features.
    """

    def __init__(self, backend: str = "builtin", seed: int = _BUILTIN_SEED):
        super().__init__()
        self.backend = backend
        if backend == "builtin":
            self._build_builtin(seed)
        elif backend == "vgg16":
            self._build_vgg16()
        else:
            raise FeatureBackendError(f"unknown feature backend {backend!r}")
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    # -- builtin ------------------------------------------------------------

    def _build_builtin(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        cin = 3
        self._plan = _BUILTIN_PLAN
        for tag, cout, _stride in self._plan:
            fan_in = cin * 9
            weight = torch.randn(cout, cin, 3, 3, generator=gen) * (2.0 / fan_in) ** 0.5
            self.register_buffer(f"weight_{tag}", weight)
            self.register_buffer(f"bias_{tag}", torch.full((cout,), 0.05))
            cin = cout
        self.layer_names = tuple(tag for tag, _, _ in self._plan)

    def _forward_builtin(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        x = image * 2.0 - 1.0
        taps = {}
        for tag, _cout, stride in self._plan:
            weight = getattr(self, f"weight_{tag}").to(x.dtype)
            bias = getattr(self, f"bias_{tag}").to(x.dtype)
            x = F.relu(F.conv2d(x, weight, bias, stride=stride, padding=1))
            taps[tag] = x
        return taps

    # -- torchvision vgg16 ----------------------------------------------------

    def _build_vgg16(self):
        try:
            from torchvision import models
            vgg = models.vgg16(weights=models.VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # missing package or unreachable weight host
            raise FeatureBackendError(
                "vgg16 feature backend unavailable (torchvision pretrained "
                f"weights could not be loaded: {exc}); use backend='builtin'"
            ) from exc
        self._vgg = vgg.features
        # relu1_2, relu2_2, relu3_3, relu4_3
        self._vgg_taps = {3: "shallow", 8: "mid1", 15: "mid2", 22: "deep"}
        self.layer_names = ("shallow", "mid1", "mid2", "deep")
        self.register_buffer("_vgg_mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("_vgg_std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def _forward_vgg16(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        x = (image - self._vgg_mean.to(image.dtype)) / self._vgg_std.to(image.dtype)
        taps = {}
        for i, layer in enumerate(self._vgg):
            x = layer(x)
            if i in self._vgg_taps:
                taps[self._vgg_taps[i]] = x
            if len(taps) == len(self._vgg_taps):
                break
        return taps

    # -------------------------------------------------------------------------

    def forward(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        if self.backend == "builtin":
            return self._forward_builtin(image)
        return self._forward_vgg16(image)


_default_extractor = None


def default_extractor() -> FeatureExtractor:
    """Process-wide builtin extractor (frozen; safe to share)."""
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = FeatureExtractor("builtin")
    return _default_extractor
