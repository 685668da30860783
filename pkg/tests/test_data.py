import hashlib
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from spcyclegan.data import (
    CropSpec,
    PairedSample,
    SyntheticSpec,
    apply_crop,
    batch_iterator,
    crop_dataset,
    generate_synthetic_domains,
    load_directory_dataset,
)
from spcyclegan.data.synthetic import invert_shift, render_sample, texture_field
from spcyclegan.errors import DimensionError, IngestionError, ValidationError


def write_dataset(root, n, size=(8, 8), labelled=None, channels=3, seed=0, max_label=1):
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True)
    (root / "labels").mkdir()
    labelled = range(n) if labelled is None else labelled
    for k in range(n):
        shape = size + ((channels,) if channels == 3 else ())
        Image.fromarray(rng.integers(0, 256, shape, dtype=np.uint8)).save(root / "images" / f"im{k:02d}.png")
        if k in labelled:
            mask = rng.integers(0, max_label + 1, size, dtype=np.uint8)
            Image.fromarray(mask).save(root / "labels" / f"im{k:02d}.png")
    return root


def sample(h, w, c=3, seed=0, label=True):
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1, 1, (c, h, w)).astype(np.float32)
    lab = rng.integers(0, 2, (h, w)) if label else None
    return PairedSample(img, lab, f"s{seed}")


def test_load_labelled_and_unlabelled(tmp_path):
    write_dataset(tmp_path / "d", 5, labelled={0, 2})
    ds = load_directory_dataset(tmp_path / "d", 3, 2)
    assert [s.name for s in ds] == [f"im{k:02d}" for k in range(5)]
    assert [s.label is not None for s in ds] == [True, False, True, False, False]
    assert ds[0].image.shape == (3, 8, 8) and ds[0].image.dtype == np.float32
    assert all(s.image.min() >= -1 and s.image.max() <= 1 for s in ds)


def test_twenty_labelled(tmp_path):
    write_dataset(tmp_path / "d", 20)
    ds = load_directory_dataset(tmp_path / "d", 3, 2)
    assert len(ds) == 20 and all(s.label is not None for s in ds)


def test_empty_label_dir_gives_unlabelled(tmp_path):
    write_dataset(tmp_path / "d", 3, labelled=set())
    assert all(s.label is None for s in load_directory_dataset(tmp_path / "d", 3, 2))


def test_zero_raster_maps_to_minus_one(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "images" / "z.png")
    Image.fromarray(np.full((4, 4), 255, np.uint8)).save(tmp_path / "images" / "w.png")
    ds = load_directory_dataset(tmp_path, 1, 2)
    assert np.all(ds[1].image == -1.0) and np.all(ds[0].image == 1.0)


def test_label_out_of_range(tmp_path):
    write_dataset(tmp_path / "d", 2, max_label=3, seed=1)
    with pytest.raises(ValidationError):
        load_directory_dataset(tmp_path / "d", 3, 2)
    assert len(load_directory_dataset(tmp_path / "d", 3, 4)) == 2


def test_undecodable_file_named(tmp_path):
    write_dataset(tmp_path / "d", 2)
    (tmp_path / "d" / "images" / "broken.png").write_bytes(b"not an image")
    with pytest.raises(IngestionError, match="broken.png"):
        load_directory_dataset(tmp_path / "d", 3, 2)


@pytest.mark.parametrize("n, bs, sizes", [(20, 2, [2] * 10), (320, 8, [8] * 40), (5, 2, [2, 2, 1])])
def test_batch_counts(n, bs, sizes):
    ds = [sample(4, 4, seed=k) for k in range(n)]
    got = [imgs.data.shape[0] for imgs, _ in batch_iterator(ds, bs, shuffle_seed=3)]
    assert got == sizes


def test_batch_order_deterministic_and_epoch_dependent():
    ds = [sample(4, 4, seed=k) for k in range(12)]

    def names(seed, epoch):
        out = []
        for imgs, _ in batch_iterator(ds, 5, shuffle_seed=seed, epoch=epoch):
            out.append(imgs.data.clone())
        return torch.cat(out)

    assert torch.equal(names(1, 0), names(1, 0))
    assert not torch.equal(names(1, 0), names(1, 1))


def test_batch_iterator_errors():
    with pytest.raises(ValidationError):
        next(batch_iterator([], 2))
    with pytest.raises(ValidationError):
        next(batch_iterator([sample(4, 4)], 0))
    with pytest.raises(ValidationError):
        next(batch_iterator([sample(4, 4, label=False)], 1, with_labels=True))
    imgs, masks = next(batch_iterator([sample(4, 4, label=False)], 1, with_labels=False, domain="target"))
    assert masks is None and imgs.domain_tag == "target"


def test_quadrant_tiling_counts_and_anchors():
    s = sample(512, 512, seed=2)
    patches = apply_crop(s, CropSpec("quadrant_tile", (364, 364)))
    assert len(patches) == 4
    anchors = [(0, 0), (0, 148), (148, 0), (148, 148)]
    for p, (t, l) in zip(patches, anchors):
        assert p.image.shape == (3, 364, 364)
        assert np.array_equal(p.image, s.image[:, t:t + 364, l:l + 364])
        assert np.array_equal(p.label, s.label[t:t + 364, l:l + 364])
    assert len(crop_dataset([sample(512, 512, seed=k) for k in range(20)],
                            CropSpec("quadrant_tile", (364, 364)))) == 80


def test_resize_then_tile():
    s = sample(600, 700, seed=3)
    patches = apply_crop(s, CropSpec("quadrant_tile", (364, 364), resize_to=(512, 512)))
    assert len(patches) == 4 and patches[3].label.shape == (364, 364)
    assert set(np.unique(patches[0].label)) <= {0, 1}


def test_center_crop_identity_and_random_determinism():
    s = sample(192, 192, seed=4)
    (c,) = apply_crop(s, CropSpec("center", (192, 192)))
    assert np.array_equal(c.image, s.image) and np.array_equal(c.label, s.label)
    big = sample(100, 90, seed=5)
    spec = CropSpec("random", (40, 40))
    a, b = apply_crop(big, spec, 11)[0], apply_crop(big, spec, 11)[0]
    assert np.array_equal(a.image, b.image)
    offsets = {apply_crop(big, spec, k)[0].image[0, 0, 0] for k in range(10)}
    assert len(offsets) > 1


def test_crop_errors():
    with pytest.raises(DimensionError):
        apply_crop(sample(10, 10), CropSpec("center", (12, 12)))
    with pytest.raises(ValidationError):
        CropSpec("diagonal", (4, 4))
    with pytest.raises(ValidationError):
        CropSpec("center", (600, 600), resize_to=(512, 512))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(20, 60), w=st.integers(20, 60), seed=st.integers(0, 10_000),
       kind=st.sampled_from(["random", "center"]))
def test_crop_containing_structure_preserves_count(h, w, seed, kind):
    rng = np.random.default_rng(seed)
    label = np.zeros((h, w), np.int64)
    # small blob in the middle, always inside a crop of at least h-8 x w-8
    cy, cx = h // 2, w // 2
    label[cy - 2:cy + 2, cx - 2:cx + 2] = rng.integers(0, 2, (4, 4))
    s = PairedSample(np.zeros((1, h, w), np.float32), label, "x")
    crop = apply_crop(s, CropSpec(kind, (h - 4, w - 4)), seed)[0]
    assert crop.label.sum() == label.sum()
    wide = apply_crop(s, CropSpec(kind, (h // 3, w // 3)), seed)[0]
    assert wide.label.sum() <= label.sum()


def test_synthetic_layout_and_shared_masks(tmp_path):
    spec = SyntheticSpec(image_size=32, splits={"train": 3, "adapt": 2, "test": 2})
    manifest = generate_synthetic_domains(spec, tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text()) == json.loads(json.dumps(manifest))
    for dom in "AB":
        for split, n in spec.splits.items():
            ds = load_directory_dataset(tmp_path / dom / split, 3, 2)
            assert len(ds) == n
    a = load_directory_dataset(tmp_path / "A" / "train", 3, 2)
    b = load_directory_dataset(tmp_path / "B" / "train", 3, 2)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.label, sb.label)
        assert sa.label.any()
        assert not np.array_equal(sa.image, sb.image)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_byte_identical(tmp_path):
    spec = SyntheticSpec(image_size=32, splits={"train": 2, "test": 2}, seed=9)
    generate_synthetic_domains(spec, tmp_path / "a")
    generate_synthetic_domains(spec, tmp_path / "b")
    generate_synthetic_domains(SyntheticSpec(image_size=32, splits={"train": 2, "test": 2}, seed=10), tmp_path / "c")
    assert digest(tmp_path / "a") == digest(tmp_path / "b") != digest(tmp_path / "c")


@pytest.mark.parametrize("fg, channels", [(1, 3), (2, 1)])
def test_synthetic_invertible(fg, channels):
    spec = SyntheticSpec(image_size=48, foreground_classes=fg, channels=channels, seed=4)
    for k in range(5):
        _, a, b = render_sample(spec, "train", k)
        to_f = lambda x: x.transpose(2, 0, 1).astype(np.float64) / 255
        rec = invert_shift(spec, to_f(b), texture_field(spec, "train", k))
        assert np.abs(rec - to_f(a)).max() <= 2 / 255


def test_synthetic_cardiac_masks(tmp_path):
    spec = SyntheticSpec(image_size=32, foreground_classes=2, channels=1, splits={"train": 4})
    generate_synthetic_domains(spec, tmp_path)
    ds = load_directory_dataset(tmp_path / "B" / "train", 1, 3)
    for s in ds:
        assert set(np.unique(s.label)) == {0, 1, 2}
        assert s.image.shape == (1, 32, 32)


@pytest.mark.parametrize("bad", [dict(image_size=30), dict(foreground_classes=3), dict(channels=2),
                                 dict(remap_scale=0.1), dict(remap_offset=0.5),
                                 dict(splits={"train": -1})])
def test_synthetic_spec_validation(bad):
    with pytest.raises(ValidationError):
        SyntheticSpec(**bad)


def test_labels_skipped_when_not_requested(tmp_path):
    write_dataset(tmp_path / "d", 3, max_label=1)
    for p in (tmp_path / "d" / "labels").iterdir():
        p.write_bytes(b"corrupt")
    ds = load_directory_dataset(tmp_path / "d", 3, 2, with_labels=False)
    assert len(ds) == 3 and all(s.label is None for s in ds)
