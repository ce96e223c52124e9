"""Glyph generator and IDX loader tests."""

import struct

import numpy as np
import pytest

from purifybench.data import (CLASS_NAMES, IMAGE_SIDE, NUM_CLASSES, Dataset,
                              IdxBadMagicError, IdxDimensionError,
                              IdxTruncatedError, _area_average_matrix,
                              generate_glyphs, knn_accuracy, load_idx)


def test_generate_glyphs_deterministic_and_balanced():
    a = generate_glyphs(5, 42, "train")
    b = generate_glyphs(5, 42, "train")
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert len(a) == 5 * NUM_CLASSES
    clean = generate_glyphs(5, 42, "train", label_noise=0.0)
    assert all((clean.labels == c).sum() == 5 for c in range(NUM_CLASSES))
    assert np.array_equal(a.images, clean.images)   # noise touches labels only
    assert a.images.shape == (20, 1, IMAGE_SIDE, IMAGE_SIDE)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0


def test_label_noise_train_only_and_fraction():
    train = generate_glyphs(100, 42, "train")
    clean = generate_glyphs(100, 42, "train", label_noise=0.0)
    n_flip = (train.labels != clean.labels).sum()
    assert n_flip == int(0.05 * 400)                # exact count, all changed
    test = generate_glyphs(100, 42, "test")
    assert all((test.labels == c).sum() == 100 for c in range(NUM_CLASSES))


def test_splits_differ_and_seeds_differ():
    tr = generate_glyphs(5, 42, "train")
    te = generate_glyphs(5, 42, "test")
    other = generate_glyphs(5, 43, "train")
    assert not np.array_equal(tr.images, te.images)
    assert not np.array_equal(tr.images, other.images)


def test_knn_baseline_separability():
    train = generate_glyphs(40, 7, "train")
    test = generate_glyphs(15, 7, "test")
    assert knn_accuracy(train, test, k=3) >= 0.90


def test_class_names():
    assert len(CLASS_NAMES) == NUM_CLASSES == 4


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 16, 16), 2.0), np.array([0]), "train", "x")
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 16, 16)), np.array([0]), "train", "x")


# ------------------------------------------------------------------- IDX i/o

def _write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def _write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def test_idx_fixture_roundtrip(tmp_path):
    imgs = np.zeros((2, 16, 16), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    imgs[0, 3, 5] = 51
    imgs[1, 15, 15] = 128
    _write_idx_images(tmp_path / "imgs", imgs)
    _write_idx_labels(tmp_path / "labs", [1, 3])
    ds = load_idx(tmp_path / "imgs", tmp_path / "labs")
    assert ds.images.shape == (2, 1, 16, 16)
    assert ds.images[0, 0, 0, 0] == 1.0            # 255 -> exactly 1.0
    assert ds.images[0, 0, 3, 5] == 51 / 255
    assert ds.images[1, 0, 15, 15] == 128 / 255
    assert list(ds.labels) == [1, 3]


def test_idx_resize_28_to_16_preserves_constants(tmp_path):
    imgs = np.full((1, 28, 28), 200, dtype=np.uint8)
    _write_idx_images(tmp_path / "imgs", imgs)
    _write_idx_labels(tmp_path / "labs", [0])
    ds = load_idx(tmp_path / "imgs", tmp_path / "labs")
    assert ds.images.shape == (1, 1, 16, 16)
    assert np.allclose(ds.images, 200 / 255, atol=1e-12)


def test_area_average_matrix_is_row_stochastic():
    m = _area_average_matrix(28, 16)
    assert m.shape == (16, 28)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_idx_bad_magic(tmp_path):
    _write_idx_labels(tmp_path / "labs", [0])
    _write_idx_images(tmp_path / "imgs", np.zeros((1, 16, 16), dtype=np.uint8))
    with pytest.raises(IdxBadMagicError):
        load_idx(tmp_path / "labs", tmp_path / "labs")   # label magic in image slot
    with pytest.raises(IdxBadMagicError):
        load_idx(tmp_path / "imgs", tmp_path / "imgs")   # image magic in label slot


def test_idx_count_mismatch(tmp_path):
    _write_idx_images(tmp_path / "imgs", np.zeros((2, 16, 16), dtype=np.uint8))
    _write_idx_labels(tmp_path / "labs", [0])
    with pytest.raises(IdxDimensionError):
        load_idx(tmp_path / "imgs", tmp_path / "labs")


def test_idx_truncation(tmp_path):
    _write_idx_images(tmp_path / "imgs", np.zeros((2, 16, 16), dtype=np.uint8))
    blob = (tmp_path / "imgs").read_bytes()
    (tmp_path / "short").write_bytes(blob[:100])
    _write_idx_labels(tmp_path / "labs", [0, 0])
    with pytest.raises(IdxTruncatedError):
        load_idx(tmp_path / "short", tmp_path / "labs")
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(IdxTruncatedError):
        load_idx(tmp_path / "tiny", tmp_path / "labs")
