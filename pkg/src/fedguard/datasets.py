"""Dataset container, IDX reader/writer and desk-scale synthetic tasks."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXError(ValueError):
    """Base class for malformed IDX input."""


class WrongMagicError(IDXError):
    pass


class TruncatedFileError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Row-per-sample feature matrix with integer labels.

    ``shape`` is the (height, width) of each sample when the features are a
    flattened image, else None.
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    shape: Optional[tuple] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            X = X.reshape(len(y), -1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} samples but {y.shape[0]} labels")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("sample values must lie in [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if self.shape is not None:
            shape = tuple(int(s) for s in self.shape)
            if shape[0] * shape[1] != X.shape[1]:
                raise ValueError(f"image shape {shape} does not match {X.shape[1]} features")
            object.__setattr__(self, "shape", shape)
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.shape)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.num_classes != self.num_classes or other.n_features != self.n_features:
            raise ValueError("datasets are not compatible")
        return Dataset(
            np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]), self.num_classes, self.shape
        )

    def labels_present(self) -> set:
        return set(int(c) for c in np.unique(self.y))


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_header(buf: bytes, path, expected_magic: int, ndims: int) -> tuple:
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: header truncated ({len(buf)} bytes)")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise WrongMagicError(f"{path}: wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    return struct.unpack(">" + "I" * ndims, buf[4:need]), need


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped); pixels are scaled by 1/255."""
    with _open(images_path) as fh:
        ibuf = fh.read()
    with _open(labels_path) as fh:
        lbuf = fh.read()
    (count, rows, cols), off = _read_header(ibuf, images_path, IMAGE_MAGIC, 3)
    if len(ibuf) - off < count * rows * cols:
        raise TruncatedFileError(
            f"{images_path}: expected {count * rows * cols} pixel bytes, found {len(ibuf) - off}"
        )
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=count * rows * cols, offset=off)
    (lcount,), loff = _read_header(lbuf, labels_path, LABEL_MAGIC, 1)
    if len(lbuf) - loff < lcount:
        raise TruncatedFileError(f"{labels_path}: expected {lcount} labels, found {len(lbuf) - loff}")
    if lcount != count:
        raise CountMismatchError(f"{count} images but {lcount} labels")
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=lcount, offset=loff).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if lcount else 1
    X = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(X, labels, num_classes, (rows, cols))


def write_idx(images_path, labels_path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Write uint8 ``images`` of shape (count, rows, cols) and their labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def synth_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    rng: np.random.Generator,
    centers: Optional[np.ndarray] = None,
    shape: Optional[tuple] = None,
) -> Dataset:
    """Gaussian blobs around random class centres in [0.2, 0.8]^dim, clamped to [0, 1].

    Pass ``centers`` from a previous call to draw a test split around the
    same centres.
    """
    if centers is None:
        centers = make_centers(num_classes, dim, rng)
    X = np.repeat(centers, per_class, axis=0)
    if spread > 0 and X.size:
        X = X + rng.normal(0.0, spread, size=X.shape)
    X = np.clip(X, 0.0, 1.0)
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(X, y, num_classes, shape)


def make_centers(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.2, 0.8, size=(num_classes, dim))


def load_digits_task(classes: Sequence[int] = (0, 3)) -> Dataset:
    """The 8x8 handwritten digits bundled with scikit-learn, restricted to ``classes``.

    Labels are re-indexed to ``0..len(classes)-1`` in the given order.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    mask = np.isin(d.target, classes)
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[int(t)] for t in d.target[mask]])
    return Dataset(d.data[mask] / 16.0, y, len(classes), (8, 8))


def train_test_split(data: Dataset, test_fraction: float, rng: np.random.Generator) -> tuple:
    """Class-stratified split; each class sends ``round(test_fraction * count)`` samples to test."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    train_idx, test_idx = [], []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.y == c)
        idx = idx[rng.permutation(idx.shape[0])]
        n_test = int(round(test_fraction * idx.shape[0]))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return (
        data.subset(np.sort(np.concatenate(train_idx))),
        data.subset(np.sort(np.concatenate(test_idx))),
    )
