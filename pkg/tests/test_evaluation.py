"""Metric harness vs independent references (skimage, closed forms)."""

from __future__ import annotations

import csv
import json

import numpy as np
import pytest
import torch
from scipy import ndimage
from skimage.metrics import peak_signal_noise_ratio as sk_psnr
from skimage.metrics import structural_similarity as sk_ssim

from masktransport.data import (
    ManifestError,
    make_synthetic_corpus,
    save_image,
    save_mask,
    synthetic_sample,
)
from masktransport.evaluation import (
    METRIC_KEYS,
    MetricReport,
    MetricUnavailable,
    color_texture_relevance,
    derive_regions,
    evaluate_pair,
    lpips,
    psnr,
    run_report,
    ssim,
    style_loss,
)

# frozen goldens (generated once on the frozen extractor)
STYLE_GOLDEN = 3.0392616835416694e-06
LPIPS_GOLDEN = 3.270957620623706
COLOR_GOLDEN = 0.7699771902878284
TEXTURE_GOLDEN = 0.8580383208728575


def fixture_pair(seed_a=70, seed_b=71, res=32):
    a, _ = synthetic_sample(seed_a, res)
    b, _ = synthetic_sample(seed_b, res)
    return a, b


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------

def test_derive_regions_identity_empty_roi():
    mask = (torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(0))
            > 0.5).float()
    spec = derive_regions(mask, mask.clone(), dilation=3)
    assert spec.roi.sum() == 0
    assert spec.rou.sum() == 16 * 16


def test_derive_regions_complements_full_roi():
    mask = (torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(1))
            > 0.5).float()
    spec = derive_regions(mask, 1 - mask, dilation=0)
    assert spec.roi.sum() == 16 * 16
    assert spec.rou.sum() == 0


def test_derive_regions_matches_morphology_oracle():
    gen = torch.Generator().manual_seed(2)
    x_a = (torch.rand(1, 24, 24, generator=gen) > 0.5).float()
    y_a = (torch.rand(1, 24, 24, generator=gen) > 0.5).float()
    spec = derive_regions(x_a, y_a, dilation=3)
    want = ndimage.binary_dilation(
        np.logical_xor(x_a[0].numpy() >= 0.5, y_a[0].numpy() >= 0.5),
        structure=np.ones((3, 3)), iterations=3)
    assert np.array_equal(spec.roi[0].numpy().astype(bool), want)
    assert torch.equal(spec.rou, 1.0 - spec.roi)


# ---------------------------------------------------------------------------
# SSIM / PSNR
# ---------------------------------------------------------------------------

def test_ssim_identical_exactly_one():
    a, _ = fixture_pair()
    assert ssim(a, a.clone()) == 1.0


def test_ssim_matches_skimage_reference():
    a, b = fixture_pair(res=48)
    want = sk_ssim(a.permute(1, 2, 0).numpy().astype(np.float64),
                   b.permute(1, 2, 0).numpy().astype(np.float64),
                   channel_axis=2, data_range=1.0, gaussian_weights=True,
                   sigma=1.5, use_sample_covariance=False)
    assert abs(ssim(a, b) - want) < 1e-4, (ssim(a, b), want)


def test_psnr_matches_skimage_reference():
    a, b = fixture_pair()
    want = sk_psnr(a.numpy().astype(np.float64), b.numpy().astype(np.float64),
                   data_range=1.0)
    assert abs(psnr(a, b) - want) < 1e-4


def test_psnr_closed_form_offset():
    a = torch.full((3, 16, 16), 0.4, dtype=torch.float64)
    b = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
    assert abs(psnr(a, b) - 20.0) < 1e-9


def test_psnr_identical_capped():
    a, _ = fixture_pair()
    assert psnr(a, a.clone()) == 100.0


def test_ssim_psnr_monotone_in_noise():
    a, _ = fixture_pair()
    gen = torch.Generator().manual_seed(3)
    noise = torch.randn(a.shape, generator=gen)
    ssims, psnrs = [], []
    for level in (0.01, 0.02, 0.05, 0.1, 0.2):
        noisy = (a + level * noise).clamp(0, 1)
        ssims.append(ssim(a, noisy))
        psnrs.append(psnr(a, noisy))
    assert all(x > y for x, y in zip(ssims, ssims[1:])), ssims
    assert all(x > y for x, y in zip(psnrs, psnrs[1:])), psnrs


def test_full_frame_region_equals_unmasked():
    a, b = fixture_pair()
    full = torch.ones(1, 32, 32)
    assert ssim(a, b, full) == ssim(a, b)
    assert psnr(a, b, full) == psnr(a, b)
    assert style_loss(a, b, full) == style_loss(a, b)
    assert lpips(a, b, full) == lpips(a, b)


def test_region_masking_changes_scores():
    a, b = fixture_pair()
    half = torch.zeros(1, 32, 32)
    half[:, :, :16] = 1.0
    assert psnr(a, b, half) != psnr(a, b)


# ---------------------------------------------------------------------------
# style loss
# ---------------------------------------------------------------------------

def test_style_identical_zero():
    a, _ = fixture_pair()
    assert style_loss(a, a.clone()) == 0.0


def test_style_spatially_invariant():
    a, _ = fixture_pair(res=64)
    rolled = torch.roll(a, shifts=(32, 32), dims=(1, 2))
    _, unrelated = fixture_pair(res=64)
    assert style_loss(a, rolled) < 0.01 * style_loss(a, unrelated)


def test_style_symmetry():
    a, b = fixture_pair()
    assert abs(style_loss(a, b) - style_loss(b, a)) < 1e-9


def test_style_golden_fixture():
    a, b = fixture_pair()
    assert abs(style_loss(a, b) - STYLE_GOLDEN) < 1e-12


# ---------------------------------------------------------------------------
# lpips
# ---------------------------------------------------------------------------

def test_lpips_identical_zero_and_positive_otherwise():
    a, b = fixture_pair()
    assert lpips(a, a.clone()) == 0.0
    assert lpips(a, b) > 0


def test_lpips_golden_fixture():
    a, b = fixture_pair()
    assert abs(lpips(a, b) - LPIPS_GOLDEN) < 1e-9


def test_lpips_reference_backend_unavailable():
    a, b = fixture_pair()
    with pytest.raises(MetricUnavailable, match="lpips"):
        lpips(a, b, backend="lpips")


def test_lpips_unknown_backend():
    a, b = fixture_pair()
    with pytest.raises(ValueError):
        lpips(a, b, backend="nope")


# ---------------------------------------------------------------------------
# relevance
# ---------------------------------------------------------------------------

def test_relevance_identical_is_unity():
    a, _ = fixture_pair()
    color, texture = color_texture_relevance(a, a.clone())
    assert abs(color - 1.0) < 1e-12
    assert abs(texture - 1.0) < 1e-12


def test_relevance_channel_permutation_lowers_color():
    a, _ = fixture_pair()
    permuted = a[[2, 0, 1]]
    color, _ = color_texture_relevance(a, permuted)
    assert color < 1.0 - 1e-6


def test_relevance_golden_fixture():
    a, b = fixture_pair()
    color, texture = color_texture_relevance(a, b)
    assert abs(color - COLOR_GOLDEN) < 1e-12
    assert abs(texture - TEXTURE_GOLDEN) < 1e-12


def test_relevance_bounded():
    a, b = fixture_pair()
    color, texture = color_texture_relevance(a, b)
    assert -1.0 <= color <= 1.0 and -1.0 <= texture <= 1.0


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def write_eval_fixture(tmp_path, count=3, styles=("Ab", "Cu", "Ab")):
    lines = []
    for i in range(count):
        out_img, out_mask = synthetic_sample(100 + i, 32)
        ex_img, ex_mask = synthetic_sample(200 + i, 32)
        save_image(out_img, tmp_path / f"out_{i}.png")
        save_image(ex_img, tmp_path / f"ex_{i}.png")
        save_mask(out_mask, tmp_path / f"xa_{i}.png")
        save_mask(ex_mask, tmp_path / f"ya_{i}.png")
        lines.append(json.dumps({
            "output": f"out_{i}.png", "exemplar": f"ex_{i}.png",
            "x_a": f"xa_{i}.png", "y_a": f"ya_{i}.png",
            "style": styles[i % len(styles)],
        }))
    manifest = tmp_path / "eval.ndjson"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def test_run_report_single_item_aggregate_equals_item(tmp_path):
    manifest = write_eval_fixture(tmp_path, count=1)
    report = run_report(manifest)
    assert len(report.items) == 1
    for key in METRIC_KEYS:
        assert report.aggregates["All"][key] == report.items[0][key]


def test_run_report_aggregates_are_means(tmp_path):
    manifest = write_eval_fixture(tmp_path, count=3)
    report = run_report(manifest)
    for group, values in report.aggregates.items():
        member = [item for item in report.items
                  if group == "All" or item["style"] == group]
        for key in METRIC_KEYS:
            want = float(np.mean([item[key] for item in member], dtype=np.float64))
            assert abs(values[key] - want) < 1e-9
    assert set(report.aggregates) == {"All", "Ab", "Cu"}


def test_run_report_exports(tmp_path):
    manifest = write_eval_fixture(tmp_path, count=2)
    out_json = tmp_path / "report.json"
    out_csv = tmp_path / "report.csv"
    report = run_report(manifest, out_json=out_json, out_csv=out_csv)
    loaded = json.loads(out_json.read_text())
    assert loaded["aggregates"]["All"] == report.aggregates["All"]
    with open(out_csv) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["output", "style", *METRIC_KEYS]
    assert len(rows) == 1 + 2 + len(report.aggregates)
    # csv stores full-precision reprs
    assert float(rows[1][2]) == report.items[0]["style_roi"]


def test_run_report_empty_manifest(tmp_path):
    bad = tmp_path / "empty.ndjson"
    bad.write_text("")
    with pytest.raises(ManifestError, match="empty"):
        run_report(bad)


def test_run_report_missing_file(tmp_path):
    bad = tmp_path / "m.ndjson"
    bad.write_text(json.dumps({"output": "a.png", "exemplar": "b.png",
                               "x_a": "c.png", "y_a": "d.png"}))
    with pytest.raises(ManifestError, match="missing"):
        run_report(bad)


def test_evaluate_pair_keys():
    out_img, out_mask = synthetic_sample(300, 32)
    ex_img, ex_mask = synthetic_sample(301, 32)
    metrics = evaluate_pair(out_img, ex_img, out_mask, ex_mask)
    assert set(metrics) == set(METRIC_KEYS)
    assert all(np.isfinite(v) for v in metrics.values())
