"""Dataset plumbing: manifest parsing, image/mask IO, synthetic corpora.

Manifests are newline-delimited JSON records {"image": path, "mask": path};
relative paths resolve against the manifest's own directory.  Images are
PNG/JPEG, masks single-channel PNG with 0 = background and 255 = foreground.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image


class ManifestError(ValueError):
    """Raised when a manifest or one of its records is unusable."""


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    mask: Path
    style: str = ""


def load_manifest(path) -> List[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        if not isinstance(entry, dict) or "image" not in entry or "mask" not in entry:
            raise ManifestError(
                f'{path}:{lineno}: record must be {{"image": ..., "mask": ...}}'
            )
        image = (base / entry["image"]).resolve()
        mask = (base / entry["mask"]).resolve()
        for kind, p in (("image", image), ("mask", mask)):
            if not p.exists():
                raise ManifestError(f"{path}:{lineno}: {kind} file missing: {p}")
        records.append(ManifestRecord(image=image, mask=mask,
                                      style=str(entry.get("style", ""))))
    if not records:
        raise ManifestError(f"{path}: manifest is empty")
    return records


# ---------------------------------------------------------------------------
# image / mask IO
# ---------------------------------------------------------------------------

def load_image(path, resolution: Optional[int] = None) -> torch.Tensor:
    """PNG/JPEG -> float32 (3,H,W) in [0,1], optionally bilinear-resized."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(path, resolution: Optional[int] = None) -> torch.Tensor:
    """Single-channel PNG -> float32 (1,H,W) strictly in {0, 1}."""
    with Image.open(path) as img:
        if img.mode not in ("L", "1", "I", "I;16", "P"):
            raise ManifestError(
                f"{path}: mask must be single-channel, got mode {img.mode!r}"
            )
        img = img.convert("L")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.NEAREST)
        arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy((arr >= 128.0).astype(np.float32))[None]


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(C,H,W) or (H,W) float in [0,1] -> uint8 HWC/HW array."""
    arr = image.detach().cpu().clamp(0.0, 1.0).numpy()
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    return np.round(arr * 255.0).astype(np.uint8)


def save_image(image: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def save_mask(mask: torch.Tensor, path) -> None:
    """Binary (1,H,W)/(H,W) mask -> single-channel PNG with 0/255 only."""
    arr = mask.detach().cpu().numpy()
    if arr.ndim == 3:
        arr = arr[0]
    Image.fromarray(((arr >= 0.5) * 255).astype(np.uint8), mode="L").save(path)


def encode_image_png(image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return buf.getvalue()


def encode_mask_png(mask: torch.Tensor) -> bytes:
    arr = mask.detach().cpu().numpy()
    if arr.ndim == 3:
        arr = arr[0]
    buf = io.BytesIO()
    Image.fromarray(((arr >= 0.5) * 255).astype(np.uint8), mode="L").save(
        buf, format="PNG")
    return buf.getvalue()


def decode_image_png(data: bytes, resolution: Optional[int] = None) -> torch.Tensor:
    return load_image(io.BytesIO(data), resolution)


def decode_mask_png(data: bytes, resolution: Optional[int] = None) -> torch.Tensor:
    return load_mask(io.BytesIO(data), resolution)


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------

class PairDataset:
    """Loads a whole manifest into memory (desk-scale corpora are tiny)."""

    def __init__(self, records: Sequence[ManifestRecord], resolution: int):
        if not records:
            raise ManifestError("dataset is empty")
        self.resolution = resolution
        self.images = torch.stack([load_image(r.image, resolution) for r in records])
        self.masks = torch.stack([load_mask(r.mask, resolution) for r in records])
        self.styles = [r.style for r in records]

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, batch_size: int,
               generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        idx = torch.randint(0, len(self), (batch_size,), generator=generator)
        return self.images[idx], self.masks[idx]


# ---------------------------------------------------------------------------
# synthetic corpus (smoke training / fixtures)
# ---------------------------------------------------------------------------

def _smooth_field(gen: torch.Generator, resolution: int, channels: int,
                  base: int = 4) -> torch.Tensor:
    coarse = torch.rand(1, channels, base, base, generator=gen)
    field = torch.nn.functional.interpolate(
        coarse, size=(resolution, resolution), mode="bilinear", align_corners=True)
    return field[0]


def synthetic_sample(seed: int, resolution: int = 64) -> Tuple[torch.Tensor, torch.Tensor]:
    """One colorful textured image plus a blobby foreground mask."""
    gen = torch.Generator().manual_seed(seed)
    image = _smooth_field(gen, resolution, 3)
    image = image + 0.15 * _smooth_field(gen, resolution, 3, base=16)
    image = (image - image.min()) / (image.max() - image.min() + 1e-8)

    ys, xs = torch.meshgrid(
        torch.linspace(-1.0, 1.0, resolution),
        torch.linspace(-1.0, 1.0, resolution),
        indexing="ij",
    )
    cy = (torch.rand((), generator=gen).item() - 0.5) * 0.8
    cx = (torch.rand((), generator=gen).item() - 0.5) * 0.8
    r = 0.25 + 0.3 * torch.rand((), generator=gen).item()
    wobble = 0.2 * torch.sin(
        (3 + int(torch.randint(0, 3, (), generator=gen))) *
        torch.atan2(ys - cy, xs - cx)
        + torch.rand((), generator=gen).item() * math.tau
    )
    dist = torch.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    mask = (dist < r * (1.0 + wobble)).float()[None]

    # paint the foreground a contrasting hue so edits are visible
    tint = torch.rand(3, 1, 1, generator=gen)
    image = image * (1 - 0.6 * mask) + (0.4 * tint + 0.6 * image) * 0.6 * mask
    return image.clamp(0, 1), mask


def make_synthetic_corpus(directory, count: int, resolution: int = 64,
                          seed: int = 0) -> Path:
    """Write `count` image/mask PNG pairs and a manifest; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        image, mask = synthetic_sample(seed * 100003 + i, resolution)
        image_name = f"img_{i:04d}.png"
        mask_name = f"mask_{i:04d}.png"
        save_image(image, directory / image_name)
        save_mask(mask, directory / mask_name)
        lines.append(json.dumps({"image": image_name, "mask": mask_name}))
    manifest = directory / "manifest.ndjson"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
