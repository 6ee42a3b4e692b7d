"""High-energy data augmentation: mix pairs of high-energy samples and append them.

One augmented sample is generated per selected source sample; its partner is
drawn uniformly from the other selected samples.  Sample ``j`` of the batch
uses its own RNG stream ``default_rng([seed, j])`` so output does not depend on
generation order.

Provenance side-file columns: ``new_id,src_a,src_b,lambda,method,box`` where
``box`` is ``y0 x0 y1 x1`` (half-open, pixel units) for CutMix and empty for MixUp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import Dataset
from .energy import Bucket, PartitionPlan


class Method(str, Enum):
    CUTMIX = "cutmix"
    MIXUP = "mixup"


@dataclass(frozen=True)
class Provenance:
    new_id: int
    src_a: int
    src_b: int
    lam: float
    method: Method
    box: tuple | None = None  # (y0, x0, y1, x1)


@dataclass
class AugmentedSample:
    features: np.ndarray
    label_weights: np.ndarray  # distribution over K classes
    lam: float
    method: Method
    box: tuple | None = None


@dataclass
class HedaSet:
    dataset: Dataset  # originals first, then augmented samples (hard label = argmax weight)
    targets: np.ndarray  # (N', K) soft targets; one-hot for originals
    provenance: list  # Provenance per appended sample


def split_by_bucket(ds: Dataset, plan: PartitionPlan):
    """(x_low, x_else, x_high) as lists of sample ids in ascending id order."""
    ids = ds.ids
    missing = [int(i) for i in ids if int(i) not in plan.buckets]
    if missing:
        raise ValueError(f"sample id {missing[0]} not in partition plan")
    if len(plan.buckets) != len(ds):
        raise ValueError("plan covers ids outside the dataset")
    out = {b: [] for b in Bucket}
    for i in ids:
        out[plan.buckets[int(i)]].append(int(i))
    return out[Bucket.LOW], out[Bucket.ELSE], out[Bucket.HIGH]


def _label_weights(label_a, label_b, lam, k):
    w = np.zeros(k)
    w[label_a] += lam
    w[label_b] += 1.0 - lam
    return w


def mixup(a, b, label_a, label_b, lam, n_classes):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    return AugmentedSample(lam * a + (1.0 - lam) * b,
                           _label_weights(label_a, label_b, lam, n_classes),
                           float(lam), Method.MIXUP)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def cutmix(a, b, label_a, label_b, lam_target, rng, n_classes, center=None):
    """Paste a box from ``b`` into ``a``; images are (H, W) or (H, W, C).

    The box is round(H*sqrt(1-lam)) x round(W*sqrt(1-lam)) around a uniform
    center (or ``center=(cy, cx)``), clipped to the image.  The recorded lambda
    is 1 - clipped_area / (H*W).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3) or a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError("cutmix needs images of at least 2x2")
    if not 0.0 <= lam_target <= 1.0:
        raise ValueError(f"lambda_target={lam_target} outside [0, 1]")
    h, w = a.shape[:2]
    cut = math.sqrt(1.0 - lam_target)
    bh, bw = _round_half_up(h * cut), _round_half_up(w * cut)
    if center is None:
        cy, cx = int(rng.integers(h)), int(rng.integers(w))
    else:
        cy, cx = center
    y0, x0 = cy - bh // 2, cx - bw // 2
    y0, y1 = max(0, y0), min(h, y0 + bh)
    x0, x1 = max(0, x0), min(w, x0 + bw)
    area = max(0, y1 - y0) * max(0, x1 - x0)
    out = a.copy()
    if area:
        out[y0:y1, x0:x1] = b[y0:y1, x0:x1]
    lam = 1.0 - area / (h * w)
    return AugmentedSample(out, _label_weights(label_a, label_b, lam, n_classes),
                           lam, Method.CUTMIX, (y0, x0, y1, x1) if area else None)


def image_shape_for(dim):
    """Most square (H, W, 1) factorization of a flat feature length, both sides >= 2."""
    for h in range(int(math.isqrt(dim)), 1, -1):
        if dim % h == 0 and dim // h >= 2:
            return (h, dim // h, 1)
    raise ValueError(f"feature length {dim} cannot be viewed as an image of at least 2x2")


def select_sources(plan_or_ids, fraction=None, source="high"):
    """Ids to augment.

    With a PartitionPlan and no ``fraction``: the HIGH bucket (or LOW for
    ``source="low"``).  With ``fraction``: the floor(N*fraction) highest
    (lowest) energy samples by rank, allowing fractions up to 1.0 for cost
    measurements.  ``source="both"`` splits the budget between the two ends,
    extra sample to the high end.
    """
    if isinstance(plan_or_ids, PartitionPlan):
        by_rank = list(plan_or_ids.ids_by_rank)
        if fraction is None:
            fraction = plan_or_ids.r
    else:
        by_rank = list(plan_or_ids)
        if fraction is None:
            raise ValueError("fraction required when passing ranked ids")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction={fraction} outside (0, 1]")
    n = len(by_rank)
    m = math.floor(n * fraction)
    if source == "high":
        chosen = by_rank[n - m:]
    elif source == "low":
        chosen = by_rank[:m]
    elif source == "both":
        lo = m // 2
        chosen = by_rank[:lo] + by_rank[n - (m - lo):]
    else:
        raise ValueError(f"unknown source {source!r}")
    return sorted(chosen)


def augment_ids(ds: Dataset, source_ids, method, seed, image_shape=None):
    """One augmented sample per source id, partners drawn from the other sources."""
    method = Method(method)
    source_ids = [int(i) for i in source_ids]
    if len(source_ids) < 2:
        raise ValueError("need at least 2 source samples to form mixing pairs")
    if method is Method.CUTMIX and image_shape is None:
        image_shape = image_shape_for(ds.dim)
    n, k = len(ds), ds.n_classes
    feats = np.empty((len(source_ids), ds.dim), dtype=np.float64)
    weights = np.empty((len(source_ids), k))
    prov = []
    for j, a_id in enumerate(source_ids):
        rng = np.random.default_rng([seed, j])
        pick = int(rng.integers(len(source_ids) - 1))
        b_id = source_ids[pick if pick < j else pick + 1]
        lam_draw = float(rng.beta(1.0, 1.0))
        xa, xb = ds.features[a_id], ds.features[b_id]
        ya, yb = int(ds.labels[a_id]), int(ds.labels[b_id])
        if method is Method.MIXUP:
            s = mixup(xa, xb, ya, yb, lam_draw, k)
        else:
            s = cutmix(xa.reshape(image_shape), xb.reshape(image_shape), ya, yb, lam_draw, rng, k)
        feats[j] = s.features.reshape(-1)
        weights[j] = s.label_weights
        prov.append(Provenance(n + j, a_id, b_id, s.lam, method, s.box))
    return feats, weights, prov


def build_heda_dataset(ds: Dataset, plan: PartitionPlan, method=Method.CUTMIX, seed=0,
                       fraction=None, source="high", image_shape=None):
    """Original samples followed by one augmented sample per selected source.

    Default selection is the plan's HIGH bucket.  ``fraction`` and ``source``
    exist for cost and ablation experiments (e.g. low-energy-only augmentation).
    """
    if source == "high" and fraction is None:
        _, _, sources = split_by_bucket(ds, plan)
    else:
        if len(plan.buckets) != len(ds):
            raise ValueError("plan does not cover the dataset")
        sources = select_sources(plan, fraction, source)
    feats, weights, prov = augment_ids(ds, sources, method, seed, image_shape)
    hard = np.argmax(weights, axis=1)
    merged = Dataset(np.concatenate([ds.features, feats.astype(np.float32)]),
                     np.concatenate([ds.labels, hard]), ds.n_classes)
    onehot = np.zeros((len(ds), ds.n_classes))
    onehot[np.arange(len(ds)), ds.labels] = 1.0
    return HedaSet(merged, np.concatenate([onehot, weights]), prov)


# ---------------------------------------------------------------- provenance file

PROVENANCE_COLUMNS = "new_id,src_a,src_b,lambda,method,box"


def write_provenance(prov, path):
    lines = [PROVENANCE_COLUMNS]
    for p in prov:
        box = "" if p.box is None else " ".join(str(v) for v in p.box)
        lines.append(f"{p.new_id},{p.src_a},{p.src_b},{p.lam!r},{p.method.value},{box}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_provenance(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != PROVENANCE_COLUMNS:
        raise ValueError("missing provenance header")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        new_id, a, b, lam, method, box = line.split(",")
        out.append(Provenance(int(new_id), int(a), int(b), float(lam), Method(method),
                              tuple(int(v) for v in box.split()) if box else None))
    return out


def heda_from_files(ds_aug: Dataset, prov, n_original):
    """Rebuild soft targets for a saved augmented dataset from its provenance."""
    k = ds_aug.n_classes
    targets = np.zeros((len(ds_aug), k))
    targets[np.arange(n_original), ds_aug.labels[:n_original]] = 1.0
    for p in prov:
        targets[p.new_id] = _label_weights(int(ds_aug.labels[p.src_a]),
                                           int(ds_aug.labels[p.src_b]), p.lam, k)
    return HedaSet(ds_aug, targets, list(prov))
