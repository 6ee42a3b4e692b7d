"""Synthetic datasets (balanced and long-tailed Gaussian blobs) and the EKDS file format.

EKDS layout, all little-endian::

    magic    4 bytes  b"EKDS"
    version  u32      1
    N        u64
    d        u32
    K        u32
    features N*d float32, row-major
    labels   N   u16

Sample ids are implicit: row i has id i.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EKDS_MAGIC = b"EKDS"
EKDS_VERSION = 1
_HEADER = struct.Struct("<4sIQII")


class DatasetFormatError(ValueError):
    """Raised when an EKDS file fails validation; ``code`` names the failure."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


@dataclass
class Dataset:
    features: np.ndarray  # (N, d) float32
    labels: np.ndarray  # (N,) int64
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an (N, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per sample required")
        if self.n_classes < 2 or self.n_classes > 65535:
            raise ValueError(f"n_classes must be in [2, 65535], got {self.n_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature value")

    def __len__(self):
        return self.features.shape[0]

    @property
    def ids(self):
        return np.arange(len(self), dtype=np.int64)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset(self.features[ids], self.labels[ids], self.n_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class LongTailSpec:
    n_classes: int
    n_max: int
    imbalance_factor: float = 0.5

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not 0 < self.imbalance_factor <= 1:
            raise ValueError("imbalance_factor must be in (0, 1]")

    def counts(self):
        """n_k = max(1, round(n_max * f**(k/(K-1)))), so n_{K-1}/n_0 = f."""
        k = self.n_classes
        return [
            max(1, _round_half_up(self.n_max * self.imbalance_factor ** (i / (k - 1))))
            for i in range(k)
        ]


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _blob_centers(rng, k, d, separation, max_tries=100):
    # typical pairwise distance 1.5 * separation; retry until the closest pair clears it
    std = 1.5 * separation / math.sqrt(2 * d)
    for _ in range(max_tries):
        centers = rng.normal(0.0, std, size=(k, d))
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        dist[np.diag_indices(k)] = np.inf
        if dist.min() >= separation:
            return centers
    raise ValueError(
        f"could not place {k} centers {separation} apart in {d} dims after {max_tries} tries"
    )


def _sample(rng, centers, counts, noise_sigma):
    d = centers.shape[1]
    xs, ys = [], []
    for cls, n in enumerate(counts):
        xs.append(centers[cls] + noise_sigma * rng.standard_normal((n, d)))
        ys.append(np.full(n, cls, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _shuffle(rng, x, y):
    order = rng.permutation(len(y))
    return x[order], y[order]


def _generate(counts, test_counts, d, class_separation, noise_sigma, seed):
    k = len(counts)
    if k < 2:
        raise ValueError("K must be >= 2")
    if d < 2:
        raise ValueError("d must be >= 2")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    centers = _blob_centers(rng, k, d, class_separation)
    x, y = _shuffle(rng, *_sample(rng, centers, counts, noise_sigma))
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    train = Dataset((x - mean) / std, y, k)
    if test_counts is None:
        return train, None
    xt, yt = _shuffle(rng, *_sample(rng, centers, test_counts, noise_sigma))
    return train, Dataset((xt - mean) / std, yt, k)


def make_blobs(n_classes, n_per_class, dim, class_separation=4.0, noise_sigma=1.0,
               seed=0, n_test_per_class=None):
    """Gaussian class clusters at seeded random centers, standardized per dimension.

    Returns the training Dataset, or ``(train, test)`` when ``n_test_per_class``
    is given; the test split shares centers and the training standardization.
    """
    train, test = _generate(
        [n_per_class] * n_classes,
        None if n_test_per_class is None else [n_test_per_class] * n_classes,
        dim, class_separation, noise_sigma, seed,
    )
    return train if n_test_per_class is None else (train, test)


def make_long_tail(spec: LongTailSpec, dim, class_separation=4.0, noise_sigma=1.0,
                   seed=0, n_test_per_class=None):
    """Exponentially decaying class counts for training; balanced test split."""
    train, test = _generate(
        spec.counts(),
        None if n_test_per_class is None else [n_test_per_class] * spec.n_classes,
        dim, class_separation, noise_sigma, seed,
    )
    return train if n_test_per_class is None else (train, test)


def dataset_bytes(ds: Dataset) -> bytes:
    n, d = ds.features.shape
    head = _HEADER.pack(EKDS_MAGIC, EKDS_VERSION, n, d, ds.n_classes)
    return (head + ds.features.astype("<f4").tobytes()
            + ds.labels.astype("<u2").tobytes())


def save_dataset(ds: Dataset, path):
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != EKDS_MAGIC:
        raise DatasetFormatError("bad_magic", "bad magic")
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated", "truncated header")
    _, version, n, d, k = _HEADER.unpack_from(buf)
    if version != EKDS_VERSION:
        raise DatasetFormatError("bad_version", f"unsupported version {version}")
    if d < 1 or k < 2:
        raise DatasetFormatError("bad_shape", f"invalid shape d={d} K={k}")
    n_feat = n * d * 4
    expected = _HEADER.size + n_feat + n * 2
    if len(buf) < expected:
        raise DatasetFormatError("truncated", "truncated payload")
    if len(buf) > expected:
        raise DatasetFormatError("trailing", "trailing bytes after payload")
    off = _HEADER.size
    x = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(buf, dtype="<u2", count=n, offset=off + n_feat)
    if not np.all(np.isfinite(x)):
        raise DatasetFormatError("non_finite", "non-finite feature value")
    if n and int(y.max()) >= k:
        raise DatasetFormatError("label_range", "label out of range")
    return Dataset(x.astype(np.float32), y.astype(np.int64), int(k))


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def write_params(path, params: dict):
    """Echo generation parameters as ``# key=value`` lines."""
    lines = [f"# {key}={value}" for key, value in params.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_params(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line.startswith("#") and "=" in line:
            key, _, value = line[1:].strip().partition("=")
            out[key.strip()] = value.strip()
    return out
