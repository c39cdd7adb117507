"""Manifest parsing, PNG IO round trips, synthetic corpus."""

from __future__ import annotations

import json

import numpy as np
import pytest
import torch
from PIL import Image

from masktransport.data import (
    ManifestError,
    PairDataset,
    decode_mask_png,
    encode_image_png,
    encode_mask_png,
    load_image,
    load_manifest,
    load_mask,
    make_synthetic_corpus,
    save_image,
    save_mask,
    synthetic_sample,
)


def write_pair(directory, name, resolution=16):
    image, mask = synthetic_sample(hash(name) % 1000, resolution)
    save_image(image, directory / f"{name}.png")
    save_mask(mask, directory / f"{name}_mask.png")
    return f"{name}.png", f"{name}_mask.png"


def test_manifest_parses_and_resolves_relative_paths(tmp_path):
    img, mask = write_pair(tmp_path, "a")
    manifest = tmp_path / "manifest.ndjson"
    manifest.write_text(
        json.dumps({"image": img, "mask": mask, "style": "Ab"}) + "\n")
    records = load_manifest(manifest)
    assert len(records) == 1
    assert records[0].image.exists() and records[0].image.is_absolute()
    assert records[0].style == "Ab"


def test_manifest_missing_file_rejected(tmp_path):
    manifest = tmp_path / "m.ndjson"
    manifest.write_text(json.dumps({"image": "no.png", "mask": "no_mask.png"}))
    with pytest.raises(ManifestError, match="missing"):
        load_manifest(manifest)


def test_manifest_bad_json_rejected(tmp_path):
    img, mask = write_pair(tmp_path, "b")
    manifest = tmp_path / "m.ndjson"
    manifest.write_text('{"image": ' + img)
    with pytest.raises(ManifestError, match="invalid JSON"):
        load_manifest(manifest)


def test_manifest_wrong_record_shape_rejected(tmp_path):
    manifest = tmp_path / "m.ndjson"
    manifest.write_text(json.dumps({"img": "x.png"}))
    with pytest.raises(ManifestError, match="record"):
        load_manifest(manifest)


def test_manifest_empty_rejected(tmp_path):
    manifest = tmp_path / "m.ndjson"
    manifest.write_text("\n\n")
    with pytest.raises(ManifestError, match="empty"):
        load_manifest(manifest)


def test_manifest_not_found(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.ndjson")


def test_mask_round_trip_bit_exact(tmp_path):
    gen = torch.Generator().manual_seed(0)
    mask = (torch.rand(1, 16, 16, generator=gen) > 0.5).float()
    save_mask(mask, tmp_path / "m.png")
    loaded = load_mask(tmp_path / "m.png")
    assert torch.equal(loaded, mask)
    # and the file is truly single-channel 0/255
    arr = np.asarray(Image.open(tmp_path / "m.png"))
    assert arr.ndim == 2 and set(np.unique(arr)) <= {0, 255}


def test_mask_png_bytes_round_trip_bit_exact():
    gen = torch.Generator().manual_seed(1)
    mask = (torch.rand(1, 9, 9, generator=gen) > 0.4).float()
    assert torch.equal(decode_mask_png(encode_mask_png(mask)), mask)


def test_rgb_mask_rejected(tmp_path):
    Image.new("RGB", (8, 8), (255, 0, 0)).save(tmp_path / "rgb.png")
    with pytest.raises(ManifestError, match="single-channel"):
        load_mask(tmp_path / "rgb.png")


def test_mask_resize_stays_binary(tmp_path):
    gen = torch.Generator().manual_seed(2)
    mask = (torch.rand(1, 32, 32, generator=gen) > 0.5).float()
    save_mask(mask, tmp_path / "m.png")
    small = load_mask(tmp_path / "m.png", resolution=16)
    assert small.shape == (1, 16, 16)
    assert set(small.unique().tolist()) <= {0.0, 1.0}


def test_image_round_trip_within_quantization(tmp_path):
    gen = torch.Generator().manual_seed(3)
    image = torch.rand(3, 12, 12, generator=gen)
    save_image(image, tmp_path / "i.png")
    loaded = load_image(tmp_path / "i.png")
    assert loaded.shape == image.shape
    assert (loaded - image).abs().max().item() <= 0.5 / 255 + 1e-6


def test_image_png_bytes_round_trip():
    gen = torch.Generator().manual_seed(4)
    image = torch.rand(3, 10, 10, generator=gen)
    from masktransport.data import decode_image_png

    again = decode_image_png(encode_image_png(image))
    assert (again - image).abs().max().item() <= 0.5 / 255 + 1e-6


def test_image_resize(tmp_path):
    image = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(5))
    save_image(image, tmp_path / "i.png")
    small = load_image(tmp_path / "i.png", resolution=16)
    assert small.shape == (3, 16, 16)
    assert small.min() >= 0 and small.max() <= 1


def test_pair_dataset_sampling_deterministic(tmp_path):
    manifest = make_synthetic_corpus(tmp_path, count=5, resolution=16, seed=9)
    dataset = PairDataset(load_manifest(manifest), resolution=16)
    assert len(dataset) == 5
    a_img, a_mask = dataset.sample(3, torch.Generator().manual_seed(7))
    b_img, b_mask = dataset.sample(3, torch.Generator().manual_seed(7))
    assert torch.equal(a_img, b_img) and torch.equal(a_mask, b_mask)
    assert a_img.shape == (3, 3, 16, 16) and a_mask.shape == (3, 1, 16, 16)


def test_synthetic_corpus_valid_and_nonempty(tmp_path):
    manifest = make_synthetic_corpus(tmp_path, count=4, resolution=32, seed=1)
    records = load_manifest(manifest)
    assert len(records) == 4
    for record in records:
        image = load_image(record.image)
        mask = load_mask(record.mask)
        assert image.std().item() > 0.02, "synthetic image should be textured"
        assert 0 < mask.sum().item() < mask.numel(), "mask should be a real region"
        assert set(mask.unique().tolist()) <= {0.0, 1.0}


def test_synthetic_sample_deterministic():
    a_img, a_mask = synthetic_sample(123, 16)
    b_img, b_mask = synthetic_sample(123, 16)
    assert torch.equal(a_img, b_img) and torch.equal(a_mask, b_mask)
    c_img, _ = synthetic_sample(124, 16)
    assert not torch.equal(a_img, c_img)
