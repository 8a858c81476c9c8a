import struct

import numpy as np
import pytest

from fedguard.datasets import (
    CountMismatchError,
    Dataset,
    TruncatedFileError,
    WrongMagicError,
    load_digits_task,
    load_idx,
    synth_blobs,
    train_test_split,
    write_idx,
)


def _write_bytes(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I" + "I" * len(dims), magic, *dims) + bytes(payload))


def test_handbuilt_fixture(tmp_path):
    img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
    pixels = [0, 255, 51, 102, 7, 8, 9, 10]  # two 2x2 images
    _write_bytes(img, 0x00000803, (2, 2, 2), pixels)
    _write_bytes(lab, 0x00000801, (2,), [4, 1])
    d = load_idx(img, lab, num_classes=10)
    assert d.shape == (2, 2) and len(d) == 2
    np.testing.assert_array_equal(d.X[0], [0.0, 1.0, 0.2, 0.4])
    np.testing.assert_array_equal(d.X[1] * 255, [7, 8, 9, 10])
    np.testing.assert_array_equal(d.y, [4, 1])


def test_errors(tmp_path):
    img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
    _write_bytes(img, 0x00000801, (1, 1, 1), [0])
    _write_bytes(lab, 0x00000801, (1,), [0])
    with pytest.raises(WrongMagicError, match="wrong magic"):
        load_idx(img, lab)
    _write_bytes(img, 0x00000803, (2, 2, 2), [0] * 5)
    with pytest.raises(TruncatedFileError):
        load_idx(img, lab)
    _write_bytes(img, 0x00000803, (2, 1, 1), [0, 0])
    with pytest.raises(CountMismatchError):
        load_idx(img, lab)
    img.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_idx(img, lab)


def test_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5)
    write_idx(tmp_path / "a", tmp_path / "b", images, labels)
    d = load_idx(tmp_path / "a", tmp_path / "b", num_classes=10)
    np.testing.assert_array_equal(np.rint(d.X * 255).reshape(5, 3, 4), images)
    np.testing.assert_array_equal(d.y, labels)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset([[1.5]], [0], 2)
    with pytest.raises(ValueError):
        Dataset([[0.5]], [2], 2)
    with pytest.raises(ValueError):
        Dataset([[0.5], [0.1]], [0], 2)


def test_synth_blobs():
    a = synth_blobs(3, 10, 5, 0.1, np.random.default_rng(0))
    b = synth_blobs(3, 10, 5, 0.1, np.random.default_rng(0))
    assert a.X.tobytes() == b.X.tobytes() and len(a) == 30
    c = synth_blobs(3, 4, 5, 0.0, np.random.default_rng(1))
    for k in range(3):
        rows = c.X[c.y == k]
        assert np.all(rows == rows[0])
    assert len(synth_blobs(3, 0, 5, 0.1, np.random.default_rng(0))) == 0


def test_digits_task_and_split():
    d = load_digits_task((0, 3))
    assert d.shape == (8, 8) and d.num_classes == 2
    assert d.X.min() >= 0 and d.X.max() <= 1
    tr, te = train_test_split(d, 0.25, np.random.default_rng(0))
    assert len(tr) + len(te) == len(d)
    assert abs(np.mean(te.y) - np.mean(d.y)) < 0.02
