"""Metric harness: style loss, SSIM, PSNR, LPIPS-style distance, relevance.

All scalar metrics are computed in float64 numpy; the only torch involvement
is the frozen feature extractor, whose activations are immediately moved to
numpy.  Region masking follows one rule everywhere: excluded pixels are zeroed
on both inputs before scoring, so a full-frame region is exactly the unmasked
metric.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .data import ManifestError, load_image, load_mask
from .features import FeatureExtractor, default_extractor

METRIC_KEYS = ("style_roi", "style_whole", "ssim_rou", "psnr_rou", "lpips_rou",
               "color_rel", "texture_rel")

PSNR_CAP_DB = 100.0


class MetricUnavailable(RuntimeError):
    """A metric backend cannot run here; callers must not read this as zero."""


@dataclass(frozen=True)
class RegionSpec:
    roi: torch.Tensor  # (1,H,W) binary — the edited region
    rou: torch.Tensor  # complement — the untouched region


@dataclass
class MetricReport:
    items: List[dict] = field(default_factory=list)
    aggregates: Dict[str, Dict[str, float]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------

def derive_regions(x_a: torch.Tensor, y_a: torch.Tensor,
                   dilation: int = 3) -> RegionSpec:
    """roi = dilate_d(x_A XOR y_A); rou is its complement."""
    if x_a.shape != y_a.shape:
        raise ValueError(f"mask shapes differ: {tuple(x_a.shape)} vs {tuple(y_a.shape)}")
    a = x_a.detach().cpu().numpy() >= 0.5
    b = y_a.detach().cpu().numpy() >= 0.5
    changed = np.logical_xor(a, b)
    if changed.ndim == 3:
        changed = changed[0]
    if dilation > 0 and changed.any():
        changed = ndimage.binary_dilation(changed, structure=np.ones((3, 3)),
                                          iterations=dilation)
    roi = torch.from_numpy(changed.astype(np.float32))[None]
    return RegionSpec(roi=roi, rou=1.0 - roi)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _to_f64(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().numpy().astype(np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def _masked_pair(a: torch.Tensor, b: torch.Tensor,
                 region: Optional[torch.Tensor]):
    arr_a, arr_b = _to_f64(a), _to_f64(b)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"image shapes differ: {arr_a.shape} vs {arr_b.shape}")
    if region is not None:
        m = _to_f64(region)
        if m.shape[-2:] != arr_a.shape[-2:]:
            raise ValueError("region resolution does not match images")
        arr_a = arr_a * m
        arr_b = arr_b * m
    return arr_a, arr_b


def _masked_tensor_pair(a: torch.Tensor, b: torch.Tensor,
                        region: Optional[torch.Tensor]):
    if region is None:
        return a, b
    m = region.to(a.dtype)
    return a * m, b * m


# ---------------------------------------------------------------------------
# SSIM / PSNR
# ---------------------------------------------------------------------------

def _ssim_single_channel(x: np.ndarray, y: np.ndarray, sigma: float,
                         truncate: float, k1: float, k2: float) -> float:
    blur = lambda z: ndimage.gaussian_filter(z, sigma=sigma, truncate=truncate,
                                             mode="reflect")
    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    c1, c2 = k1 ** 2, k2 ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    pad = int(truncate * sigma + 0.5)
    return float(s[pad:-pad, pad:-pad].mean(dtype=np.float64))


def ssim(a: torch.Tensor, b: torch.Tensor,
         region: Optional[torch.Tensor] = None, *, sigma: float = 1.5) -> float:
    """Gaussian-windowed single-scale SSIM (11-tap window, population cov)."""
    arr_a, arr_b = _masked_pair(a, b, region)
    truncate = 3.5  # 2*int(3.5*1.5+0.5)+1 == the classic 11-tap window
    values = [_ssim_single_channel(arr_a[c], arr_b[c], sigma, truncate,
                                   0.01, 0.03)
              for c in range(arr_a.shape[0])]
    return float(np.mean(values))


def psnr(a: torch.Tensor, b: torch.Tensor,
         region: Optional[torch.Tensor] = None, *, peak: float = 1.0) -> float:
    arr_a, arr_b = _masked_pair(a, b, region)
    mse = float(np.mean((arr_a - arr_b) ** 2, dtype=np.float64))
    if mse <= peak ** 2 * 10.0 ** (-PSNR_CAP_DB / 10.0):
        return PSNR_CAP_DB
    return float(10.0 * math.log10(peak ** 2 / mse))


# ---------------------------------------------------------------------------
# feature-space metrics
# ---------------------------------------------------------------------------

def _features_f64(image: torch.Tensor, phi: FeatureExtractor,
                  layers: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    if image.dim() == 3:
        image = image[None]
    with torch.no_grad():
        feats = phi(image.float())
    names = layers or list(feats)
    return {name: feats[name][0].numpy().astype(np.float64) for name in names}


def _gram(feat: np.ndarray) -> np.ndarray:
    c, h, w = feat.shape
    flat = feat.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


def style_loss(a: torch.Tensor, b: torch.Tensor,
               region: Optional[torch.Tensor] = None,
               phi: Optional[FeatureExtractor] = None) -> float:
    """Mean over layers of the MSE between normalized Gram matrices."""
    phi = phi or default_extractor()
    ta, tb = _masked_tensor_pair(a, b, region)
    fa = _features_f64(ta, phi)
    fb = _features_f64(tb, phi)
    per_layer = [float(np.mean((_gram(fa[n]) - _gram(fb[n])) ** 2))
                 for n in fa]
    return float(np.mean(per_layer))


def lpips(a: torch.Tensor, b: torch.Tensor,
          region: Optional[torch.Tensor] = None, *,
          backend: str = "builtin",
          phi: Optional[FeatureExtractor] = None) -> float:
    """Perceptual distance: unit-normalized features, squared difference.

    backend "builtin" uses the frozen extractor with unit layer weights (the
    reference metric's structure without its learned calibration); backend
    "lpips" defers to the reference package and raises MetricUnavailable when
    it cannot run (package or weights absent) — never silently zero.
    """
    ta, tb = _masked_tensor_pair(a, b, region)
    if backend == "lpips":
        try:
            import lpips as lpips_pkg  # noqa: F401
        except ImportError as exc:
            raise MetricUnavailable(
                "lpips backend requires the 'lpips' package, which is not "
                "installed; use backend='builtin' or install it"
            ) from exc
        try:
            model = lpips_pkg.LPIPS(net="alex", verbose=False)
            with torch.no_grad():
                value = model(ta[None] * 2 - 1 if ta.dim() == 3 else ta * 2 - 1,
                              tb[None] * 2 - 1 if tb.dim() == 3 else tb * 2 - 1)
            return float(value.mean())
        except Exception as exc:
            raise MetricUnavailable(f"lpips backend failed to run: {exc}") from exc
    if backend != "builtin":
        raise ValueError(f"unknown lpips backend {backend!r}")

    phi = phi or default_extractor()
    fa = _features_f64(ta, phi)
    fb = _features_f64(tb, phi)
    total = 0.0
    for name in fa:
        na = fa[name] / (np.linalg.norm(fa[name], axis=0, keepdims=True) + 1e-10)
        nb = fb[name] / (np.linalg.norm(fb[name], axis=0, keepdims=True) + 1e-10)
        total += float(np.mean(np.sum((na - nb) ** 2, axis=0)))
    return total


def color_texture_relevance(a: torch.Tensor, b: torch.Tensor,
                            phi: Optional[FeatureExtractor] = None,
                            bins: int = 32):
    """Cosine similarities of color histograms and shallow feature stats."""
    arr_a, arr_b = _masked_pair(a, b, None)

    def histogram(arr):
        return np.concatenate([
            np.histogram(arr[c], bins=bins, range=(0.0, 1.0))[0].astype(np.float64)
            for c in range(arr.shape[0])
        ])

    def cosine(u, v):
        den = np.linalg.norm(u) * np.linalg.norm(v)
        if den == 0:
            return 1.0 if np.array_equal(u, v) else 0.0
        return float(np.dot(u, v) / den)

    color = cosine(histogram(arr_a), histogram(arr_b))

    phi = phi or default_extractor()
    fa = _features_f64(a, phi, layers=["shallow"])["shallow"]
    fb = _features_f64(b, phi, layers=["shallow"])["shallow"]
    stats_a = np.concatenate([fa.mean(axis=(1, 2)), fa.std(axis=(1, 2))])
    stats_b = np.concatenate([fb.mean(axis=(1, 2)), fb.std(axis=(1, 2))])
    texture = cosine(stats_a, stats_b)
    return color, texture


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def evaluate_pair(output: torch.Tensor, exemplar: torch.Tensor,
                  x_a: torch.Tensor, y_a: torch.Tensor, *,
                  dilation: int = 3,
                  phi: Optional[FeatureExtractor] = None) -> Dict[str, float]:
    phi = phi or default_extractor()
    regions = derive_regions(x_a, y_a, dilation=dilation)
    color, texture = color_texture_relevance(output, exemplar, phi)
    return {
        "style_roi": style_loss(output, exemplar, regions.roi, phi),
        "style_whole": style_loss(output, exemplar, None, phi),
        "ssim_rou": ssim(output, exemplar, regions.rou),
        "psnr_rou": psnr(output, exemplar, regions.rou),
        "lpips_rou": lpips(output, exemplar, regions.rou, phi=phi),
        "color_rel": color,
        "texture_rel": texture,
    }


def _load_eval_manifest(path) -> List[dict]:
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
        required = ("output", "exemplar", "x_a", "y_a")
        if not isinstance(entry, dict) or any(k not in entry for k in required):
            raise ManifestError(
                f"{path}:{lineno}: record needs keys {required}")
        record = {k: (base / entry[k]).resolve() for k in required}
        for k, p in record.items():
            if not p.exists():
                raise ManifestError(f"{path}:{lineno}: {k} file missing: {p}")
        record["style"] = str(entry.get("style", ""))
        records.append(record)
    if not records:
        raise ManifestError(f"{path}: manifest is empty")
    return records


def run_report(manifest_path, *, out_csv=None, out_json=None,
               dilation: int = 3,
               metrics: Optional[Sequence[str]] = None,
               phi: Optional[FeatureExtractor] = None) -> MetricReport:
    """Evaluate every manifest record; aggregate per style group and overall.

    ``metrics`` restricts the report to a subset of METRIC_KEYS (default: all).
    """
    keys = METRIC_KEYS if metrics is None else tuple(metrics)
    unknown = [k for k in keys if k not in METRIC_KEYS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {METRIC_KEYS}")
    phi = phi or default_extractor()
    records = _load_eval_manifest(manifest_path)
    report = MetricReport()
    for record in records:
        output = load_image(record["output"])
        exemplar = load_image(record["exemplar"])
        resolution = output.shape[-1]
        x_a = load_mask(record["x_a"], resolution)
        y_a = load_mask(record["y_a"], resolution)
        values = evaluate_pair(output, exemplar, x_a, y_a,
                               dilation=dilation, phi=phi)
        report.items.append({
            "output": str(record["output"]),
            "style": record["style"],
            **{k: values[k] for k in keys},
        })

    groups: Dict[str, List[dict]] = {"All": report.items}
    for item in report.items:
        if item["style"]:
            groups.setdefault(item["style"], []).append(item)
    for group, items in groups.items():
        report.aggregates[group] = {
            key: float(np.mean([item[key] for item in items], dtype=np.float64))
            for key in keys
        }

    if out_json is not None:
        Path(out_json).write_text(json.dumps(
            {"items": report.items, "aggregates": report.aggregates}, indent=2))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["output", "style", *keys])
            for item in report.items:
                writer.writerow([item["output"], item["style"],
                                 *[repr(item[k]) for k in keys]])
            for group, values in sorted(report.aggregates.items()):
                writer.writerow([f"aggregate:{group}", group,
                                 *[repr(values[k]) for k in keys]])
    return report
