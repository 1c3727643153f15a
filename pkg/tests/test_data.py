import csv
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dicom_ssl.data import (AugPolicy, AugParams, ImageBatch, apply_augmentation,
                            generate_synthetic, load_dataset, read_manifest, two_views)
from dicom_ssl.errors import ConfigError, DataError


def _write_manifest(root, rows, size=(40, 48)):
    (root / "img").mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    with (root / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "label", "split"])
        for sid, label, split in rows:
            arr = rng.integers(0, 256, size, dtype=np.uint8)
            Image.fromarray(arr, mode="L").save(root / "img" / f"{sid}.png")
            w.writerow([sid, f"img/{sid}.png", label, split])
    return root / "manifest.csv"


def test_load_four_pngs(tmp_path):
    m = _write_manifest(tmp_path, [(f"a{i}", i % 2, "train") for i in range(4)])
    ds = load_dataset(m, (32, 32), patch_size=8)
    batches = list(ds.batches(4, shuffle=False))
    assert len(batches) == 1
    assert batches[0].images.shape == (4, 32, 32)
    assert batches[0].images.min() >= 0.0 and batches[0].images.max() <= 1.0


def test_split_partition(tmp_path):
    m = _write_manifest(tmp_path, [("a", 0, "train"), ("b", 1, "train"), ("c", 0, "train"),
                                   ("d", 1, "test")])
    ds = load_dataset(m, (32, 32))
    ids = [i for b in ds.split("train").batches(2, seed=0) for i in b.ids]
    assert sorted(ids) == ["a", "b", "c"]
    assert ds.split("test").ids == ["d"]


def test_batch_order_deterministic(tmp_path):
    m = _write_manifest(tmp_path, [(f"a{i}", 0, "train") for i in range(9)])
    ds = load_dataset(m, (16, 16))
    run1 = [b.ids for b in ds.batches(2, seed=5, epoch=1)]
    run2 = [b.ids for b in load_dataset(m, (16, 16)).batches(2, seed=5, epoch=1)]
    assert run1 == run2
    assert run1 != [b.ids for b in ds.batches(2, seed=6, epoch=1)]


def test_missing_image_names_path(tmp_path):
    m = _write_manifest(tmp_path, [("a", 0, "train")])
    (tmp_path / "img" / "a.png").unlink()
    with pytest.raises(DataError, match="a.png"):
        load_dataset(m, (16, 16))


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="nope.csv"):
        load_dataset(tmp_path / "nope.csv", (16, 16))


def test_indivisible_target_size(tmp_path):
    m = _write_manifest(tmp_path, [("a", 0, "train")])
    with pytest.raises(ConfigError):
        load_dataset(m, (30, 32), patch_size=8)


def test_pgm_supported(tmp_path):
    arr = np.arange(64, dtype=np.uint8).reshape(8, 8)
    Image.fromarray(arr, mode="L").save(tmp_path / "x.pgm")
    (tmp_path / "manifest.csv").write_text("id,path,label,split\nx,x.pgm,0,train\n")
    ds = load_dataset(tmp_path / "manifest.csv", (8, 8))
    np.testing.assert_allclose(ds.images[0], arr / 255.0, atol=1e-7)


def test_synthetic_split_counts(tmp_path):
    man = generate_synthetic(tmp_path, 50, 2, (64, 64), seed=7)
    assert len(man.entries) == 100
    assert [len(man.ids(s)) for s in ("train", "val", "test")] == [70, 15, 15]
    splits = [set(man.ids(s)) for s in ("train", "val", "test")]
    assert not (splits[0] & splits[1] or splits[0] & splits[2] or splits[1] & splits[2])


def _digest(folder):
    h = hashlib.sha256()
    for p in sorted((folder / "images").iterdir()):
        h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_byte_identical(tmp_path):
    generate_synthetic(tmp_path / "a", 7, 2, (32, 32), seed=11)
    generate_synthetic(tmp_path / "b", 7, 2, (32, 32), seed=11)
    generate_synthetic(tmp_path / "c", 7, 2, (32, 32), seed=12)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_synthetic_balanced_three_classes(tmp_path):
    man = generate_synthetic(tmp_path, 50, 3, (32, 32), seed=0)
    labels, counts = np.unique([e.label for e in man.entries], return_counts=True)
    assert dict(zip(labels.tolist(), counts.tolist())) == {0: 50, 1: 50, 2: 50}
    assert read_manifest(tmp_path / "manifest.csv").class_names[2] == "texture_2"


def test_synthetic_refuses_small(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic(tmp_path, 6, 2, (32, 32), seed=0)
    with pytest.raises(ConfigError):
        generate_synthetic(tmp_path, 10, 1, (32, 32), seed=0)


def test_synthetic_masks_loaded(synth_small):
    assert synth_small.masks is not None
    assert set(np.unique(synth_small.masks)) <= {0, 1}
    assert synth_small.masks.mean() > 0.1


def _batch(rng, n=3, size=(32, 32)):
    return ImageBatch(rng.random((n, *size)).astype(np.float32), np.arange(n),
                      [f"i{k}" for k in range(n)])


def test_identity_views(rng):
    batch = _batch(rng)
    pair = two_views(batch, AugPolicy.identity(), rng)
    np.testing.assert_array_equal(pair.view1.images, batch.images)
    np.testing.assert_array_equal(pair.view2.images, batch.images)


def test_crop_only_views_match_recorded_params(rng):
    batch = _batch(rng)
    pair = two_views(batch, AugPolicy.crop_only(), np.random.default_rng(3))
    assert pair.view1.images.shape == batch.images.shape
    assert pair.view1.ids == batch.ids == pair.view2.ids
    assert not np.array_equal(pair.view1.images, pair.view2.images)
    for view, params in ((pair.view1, pair.params1), (pair.view2, pair.params2)):
        again = np.stack([apply_augmentation(img, p) for img, p in zip(batch.images, params)])
        np.testing.assert_array_equal(view.images, again)


def test_rotation_of_constant_image():
    img = np.full((32, 32), 0.37, dtype=np.float32)
    for angle in (-10.0, 3.3, 10.0):
        out = apply_augmentation(img, AugParams(angle=angle))
        np.testing.assert_allclose(out, 0.37, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), crop=st.booleans(), rotate=st.booleans(), jitter=st.booleans())
def test_augmentation_preserves_shape_ids_range(seed, crop, rotate, jitter):
    rng = np.random.default_rng(seed)
    batch = _batch(rng, n=2, size=(16, 24))
    pair = two_views(batch, AugPolicy(crop=crop, rotate=rotate, jitter=jitter), rng)
    for v in (pair.view1, pair.view2):
        assert v.images.shape == batch.images.shape
        assert v.ids == batch.ids
        assert v.images.min() >= 0.0 and v.images.max() <= 1.0


def test_views_pure_function_of_seed(rng):
    batch = _batch(rng)
    a = two_views(batch, AugPolicy(), np.random.default_rng(9))
    b = two_views(batch, AugPolicy(), np.random.default_rng(9))
    np.testing.assert_array_equal(a.view1.images, b.view1.images)
    np.testing.assert_array_equal(a.view2.images, b.view2.images)
