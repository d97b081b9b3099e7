"""MNIST IDX reader and separable-subset selection."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataMissingError, IdxFormatError
from .network import Dataset
from .rng import rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "ALIGN_LAB_DATA_DIR"
IMAGE_NAMES = ("train-images-idx3-ubyte", "train-images.idx3-ubyte")
LABEL_NAMES = ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte")
SEPARABLE_MARGIN = 1e-9


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(raw: bytes, path, magic: int, words: int) -> tuple:
    need = 4 * (1 + words)
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{words}I", raw[4:need]), need


def load_idx_images(path) -> np.ndarray:
    """``(rows*cols) x count`` matrix of pixels scaled to [0, 1]."""
    raw = _read_bytes(path)
    (count, rows, cols), start = _header(raw, path, IMAGES_MAGIC, 3)
    size = count * rows * cols
    if len(raw) - start < size:
        raise IdxFormatError(f"{path}: truncated pixel data ({len(raw) - start} of {size} bytes)")
    if len(raw) - start > size:
        raise IdxFormatError(f"{path}: {len(raw) - start - size} trailing bytes after pixel data")
    pix = np.frombuffer(raw, dtype=np.uint8, count=size, offset=start)
    return pix.reshape(count, rows * cols).T.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (count,), start = _header(raw, path, LABELS_MAGIC, 1)
    if len(raw) - start < count:
        raise IdxFormatError(f"{path}: truncated label data ({len(raw) - start} of {count} bytes)")
    if len(raw) - start > count:
        raise IdxFormatError(f"{path}: {len(raw) - start - count} trailing bytes after labels")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=start).astype(np.int64)


def load_mnist(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[1] != len(labels):
        raise IdxFormatError(f"{images.shape[1]} images but {len(labels)} labels")
    return images, labels


def find_mnist(data_dir: Optional[str] = None) -> tuple[Path, Path]:
    """Locate the training IDX pair in ``data_dir`` or ``$ALIGN_LAB_DATA_DIR``."""
    root = data_dir or os.environ.get(DATA_DIR_ENV)
    if not root:
        raise DataMissingError(
            f"no MNIST directory given (use --data-dir or set {DATA_DIR_ENV}); "
            "a synthetic fallback is unavailable for classification experiments")
    root = Path(root)

    def pick(names):
        for name in names:
            for suffix in ("", ".gz"):
                p = root / (name + suffix)
                if p.is_file():
                    return p
        return None

    images, labels = pick(IMAGE_NAMES), pick(LABEL_NAMES)
    if images is None or labels is None:
        raise DataMissingError(
            f"MNIST IDX files not found in {root}; "
            "a synthetic fallback is unavailable for classification experiments")
    return images, labels


def one_hot(labels, classes: int = 10) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((classes, len(labels)))
    out[labels, np.arange(len(labels))] = 1.0
    return out


def _separable(x: np.ndarray, labels: np.ndarray, classes: int) -> bool:
    xa = np.vstack([x, np.ones((1, x.shape[1]))])
    y = one_hot(labels, classes)
    w = np.linalg.lstsq(xa.T, y.T, rcond=None)[0].T
    scores = w @ xa
    cols = np.arange(len(labels))
    true = scores[labels, cols]
    scores[labels, cols] = -np.inf
    return bool(np.all(true - scores.max(axis=0) > SEPARABLE_MARGIN))


@dataclass
class SubsetResult:
    dataset: Dataset
    indices: np.ndarray
    achieved: int
    requested: int


def select_separable_subset(images, labels, count: int, seed: int, classes: int = 10) -> SubsetResult:
    """Greedy seeded selection keeping a least-squares (with bias) classifier exact.

    Candidates are visited in a seeded random order; one is kept when the
    least-squares map on the kept set plus it still puts the strict argmax
    on every kept label. Stops at ``count`` or when candidates run out; a
    short ``achieved`` is reported, not raised.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if count < 1 or count > images.shape[1]:
        raise ValueError(f"count must be in [1, {images.shape[1]}]")
    order = rng(seed).permutation(images.shape[1])
    kept: list[int] = []
    for cand in order:
        trial = kept + [int(cand)]
        if len(trial) == 1 or _separable(images[:, trial], labels[trial], classes):
            kept = trial
            if len(kept) == count:
                break
    idx = np.array(kept, dtype=np.int64)
    data = Dataset(images[:, idx], one_hot(labels[idx], classes))
    return SubsetResult(dataset=data, indices=idx, achieved=len(kept), requested=count)
