"""Forward assembly, checkpoint loading, manipulate, mask extraction."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from scipy import ndimage

from masktransport.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from masktransport.data import encode_mask_png, synthetic_sample
from masktransport.pipeline import (
    ArchConfig,
    MaskBackendError,
    auto_mask,
    build_models,
    extract_mask,
    forward_once,
    load_model,
    manipulate,
)

TINY = ArchConfig(num_keypoints=3, internal_resolution=32, block_expansion=8,
                  num_blocks=2, max_features=32, attention_block_expansion=8,
                  attention_num_blocks=2, attention_max_features=32)


def fixture_inputs(seed=0, batch=2, res=32):
    imgs, masks = [], []
    for i in range(batch):
        im, mk = synthetic_sample(seed * 10 + i, res)
        imgs.append(im)
        masks.append(mk)
    y_b = torch.stack(imgs)
    y_a = torch.stack(masks)
    x_a = torch.roll(y_a, shifts=(2, 1), dims=(-2, -1))
    return x_a, y_a, y_b


def test_build_models_deterministic():
    a = build_models(TINY, seed=5)
    b = build_models(TINY, seed=5)
    for (na, ta), (nb, tb) in zip(sorted(a.segments().items()),
                                  sorted(b.segments().items())):
        assert na == nb and torch.equal(ta, tb)
    c = build_models(TINY, seed=6)
    assert any(not torch.equal(t, c.segments()[n]) for n, t in a.segments().items())


def test_forward_once_shapes_and_ranges():
    bundle = build_models(TINY, seed=1)
    x_a, y_a, y_b = fixture_inputs()
    out = forward_once(bundle, x_a, y_a, y_b, with_guidance=True)
    k = TINY.num_keypoints
    assert out["attention_transport"].shape == (2, k + 1, 32, 32)
    assert out["attention_guidance"].shape == (2, k, 32, 32)
    assert out["output_image"].shape == (2, 3, 32, 32)
    assert out["output_mask"].shape == (2, 1, 32, 32)
    assert out["fused_field"].shape == (2, 32, 32, 2)
    assert out["pseudo"].image.shape == (2, 3, 32, 32)
    assert out["output_mask"].min() >= -1e-6 and out["output_mask"].max() <= 1 + 1e-6
    assert out["output_image"].min() >= y_b.min() - 1e-5
    assert out["output_image"].max() <= y_b.max() + 1e-5


def test_forward_once_upscales_output():
    bundle = build_models(TINY, seed=1)
    x_a, y_a, y_b = fixture_inputs(res=32)
    out = forward_once(bundle, x_a, y_a, y_b, output_size=(64, 64))
    assert out["output_image"].shape == (2, 3, 64, 64)
    assert out["output_mask"].shape == (2, 1, 64, 64)


def test_manipulate_single_sample_and_statelessness():
    bundle = build_models(TINY, seed=2)
    x_a, y_a, y_b = fixture_inputs(batch=1)
    before = {n: t.clone() for n, t in bundle.segments().items()}
    result = manipulate(bundle, y_b[0], y_a[0], x_a[0])
    assert result["output_image"].shape == (3, 32, 32)
    assert result["output_mask"].shape == (1, 32, 32)
    assert not result["binarized_input"]
    after = bundle.segments()
    for name, tensor in before.items():
        assert torch.equal(tensor, after[name]), f"manipulate mutated {name}"
    # identical inputs -> identical outputs
    again = manipulate(bundle, y_b[0], y_a[0], x_a[0])
    assert torch.equal(result["output_image"], again["output_image"])


def test_manipulate_resolution_mismatch():
    bundle = build_models(TINY, seed=2)
    x_a, y_a, y_b = fixture_inputs(batch=1)
    with pytest.raises(ValueError, match="resolution"):
        manipulate(bundle, y_b[0], y_a[0], x_a[0, :, :16, :16])


def test_manipulate_thresholds_soft_mask():
    bundle = build_models(TINY, seed=2)
    x_a, y_a, y_b = fixture_inputs(batch=1)
    soft = x_a[0] * 0.7 + 0.1
    result = manipulate(bundle, y_b[0], y_a[0], soft)
    assert result["binarized_input"]
    hard = manipulate(bundle, y_b[0], y_a[0], x_a[0])
    assert torch.equal(result["output_image"], hard["output_image"])


def test_manipulate_diagnostics_payload():
    bundle = build_models(TINY, seed=3)
    x_a, y_a, y_b = fixture_inputs(batch=1)
    result = manipulate(bundle, y_b[0], y_a[0], x_a[0], diagnostics=True)
    diag = result["diagnostics"]
    k = TINY.num_keypoints
    assert diag["source_keypoints"].shape == (k, 2)
    assert diag["driver_keypoints"].shape == (k, 2)
    assert diag["attention"].shape == (k + 1, 32, 32)
    assert diag["fused_field"].shape == (32, 32, 2)


def test_checkpoint_load_round_trip(tmp_path):
    from masktransport.training import TrainConfig, init_state, make_checkpoint

    cfg = TrainConfig(resolution=32, batch_size=1, steps=1, arch=TINY, seed=4)
    state = init_state(cfg)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, make_checkpoint(state))

    bundle, ckpt = load_model(path)
    assert ckpt.step == 0
    x_a, y_a, y_b = fixture_inputs(batch=1)
    state.bundle.eval()
    with torch.no_grad():
        want = forward_once(state.bundle, x_a, y_a, y_b)["output_image"]
    got = forward_once(bundle, x_a, y_a, y_b)["output_image"]
    assert torch.equal(want, got)
    assert all(not p.requires_grad for p in bundle.parameters())


def test_load_model_truncated(tmp_path):
    from masktransport.training import TrainConfig, init_state, make_checkpoint

    cfg = TrainConfig(resolution=32, batch_size=1, steps=1, arch=TINY)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, make_checkpoint(init_state(cfg)))
    data = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[: len(data) // 3])
    with pytest.raises(CheckpointFormatError):
        load_model(tmp_path / "cut.bin")


def test_load_model_mismatched_k(tmp_path):
    from masktransport.training import TrainConfig, init_state, make_checkpoint

    cfg = TrainConfig(resolution=32, batch_size=1, steps=1, arch=TINY)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, make_checkpoint(init_state(cfg)))
    ckpt = load_checkpoint(path)
    ckpt.config["arch"]["num_keypoints"] = 7  # lie about K
    tampered = tmp_path / "tampered.bin"
    save_checkpoint(tampered, ckpt)
    with pytest.raises(CheckpointFormatError, match="K=7"):
        load_model(tampered)


def test_auto_mask_finds_bright_blob():
    image = torch.zeros(3, 32, 32)
    image[:, 8:20, 10:22] = 0.9
    image += 0.05 * torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(6))
    mask = auto_mask(image)
    assert mask.shape == (1, 32, 32)
    assert mask[0, 12, 14] == 1.0 and mask[0, 2, 2] == 0.0
    labels, count = ndimage.label(mask[0].numpy())
    assert count == 1, "auto mask must be a single connected region"


def test_auto_mask_keeps_largest_component():
    image = torch.zeros(3, 32, 32)
    image[:, 2:4, 2:4] = 1.0       # small bright spot
    image[:, 10:26, 10:26] = 0.95  # large bright region
    mask = auto_mask(image)
    assert mask[0, 18, 18] == 1.0
    assert mask[0, 3, 3] == 0.0


def test_extract_mask_file_backend(tmp_path):
    from masktransport.data import save_mask

    gen = torch.Generator().manual_seed(7)
    mask = (torch.rand(1, 32, 32, generator=gen) > 0.5).float()
    save_mask(mask, tmp_path / "m.png")
    image = torch.rand(3, 32, 32, generator=gen)
    got = extract_mask(image, mask_file=tmp_path / "m.png")
    assert torch.equal(got, mask)


def test_extract_mask_segmenter_round_trip(monkeypatch):
    gen = torch.Generator().manual_seed(8)
    fixture = (torch.rand(1, 32, 32, generator=gen) > 0.5).float()
    payload = encode_mask_png(fixture)

    class FakeResponse:
        content = payload

        def raise_for_status(self):
            return None

    import httpx

    calls = {}

    def fake_post(url, **kwargs):
        calls["url"] = url
        return FakeResponse()

    monkeypatch.setattr(httpx, "post", fake_post)
    image = torch.rand(3, 32, 32, generator=gen)
    got = extract_mask(image, segmenter_url="http://segmenter.test/predict")
    assert calls["url"] == "http://segmenter.test/predict"
    assert torch.equal(got, fixture)


def test_extract_mask_segmenter_unreachable():
    image = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(9))
    with pytest.raises(MaskBackendError, match="degraded"):
        extract_mask(image, segmenter_url="http://127.0.0.1:1/predict",
                     timeout=0.2)


def test_extract_mask_default_is_auto():
    image = torch.zeros(3, 32, 32)
    image[:, 8:20, 10:22] = 0.9
    got = extract_mask(image)
    assert torch.equal(got, auto_mask(image))
