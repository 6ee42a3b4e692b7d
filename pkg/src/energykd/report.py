"""Metrics: per-bucket confidence, teacher/student correlation disparity, HE-DA cost."""

from __future__ import annotations

import gc
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore
from .energy import Bucket, PartitionPlan


def accuracy(logits, labels):
    return float(np.mean(numcore.argmax(logits) == np.asarray(labels)))


@dataclass
class BucketStats:
    count: int
    mean_confidence: float  # mean max-softmax probability
    mean_entropy: float
    mean_prediction: np.ndarray  # (K,)


def bucket_confidence(logits, plan: PartitionPlan):
    """Softmax (T=1) statistics of each LOW/ELSE/HIGH bucket; rows indexed by sample id."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != len(plan.buckets):
        raise ValueError("plan does not cover the logit rows")
    if sorted(plan.buckets) != list(range(logits.shape[0])):
        raise ValueError("plan ids must be 0..N-1")
    probs = numcore.softmax_t(logits, 1.0)
    which = np.array([plan.buckets[i] for i in range(len(probs))])
    out = {}
    k = logits.shape[1]
    for b in Bucket:
        p = probs[which == b]
        if len(p) == 0:
            out[b] = BucketStats(0, float("nan"), float("nan"), np.full(k, np.nan))
            continue
        out[b] = BucketStats(len(p), float(p.max(axis=1).mean()),
                             float(numcore.entropy(p).mean()), p.mean(axis=0))
    return out


def _pearson(z):
    z = np.asarray(z, dtype=np.float64)
    centered = z - z.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    # tolerance relative to the column scale: float cancellation never yields an exact zero
    scale = np.abs(z).max(axis=0) * math.sqrt(z.shape[0]) + 1e-300
    if np.any(norms <= 1e-12 * scale):
        raise ValueError("degenerate logit column")
    c = (centered.T @ centered) / np.outer(norms, norms)
    c = np.clip(c, -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return c


def correlation_disparity(z_s, z_t):
    """|corr(z_s) - corr(z_t)| over class-logit columns; returns (K x K matrix, mean off-diagonal)."""
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_s.shape != z_t.shape or z_s.ndim != 2:
        raise ValueError(f"logit shape mismatch: {z_s.shape} vs {z_t.shape}")
    if z_s.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    d = np.abs(_pearson(z_s) - _pearson(z_t))
    d = (d + d.T) / 2.0
    np.fill_diagonal(d, 0.0)
    k = d.shape[0]
    summary = float(d.sum() / (k * (k - 1)))
    return d, summary


def cost_report(base_n, r):
    """Exact relative increase in per-epoch samples when floor(N*r) are appended."""
    if not 0 <= r <= 1:
        raise ValueError(f"r={r} outside [0, 1]")
    return math.floor(base_n * (1 + r)) / base_n - 1


def time_call(fn, repeats=3):
    """Minimum wall-clock seconds over ``repeats`` calls."""
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def time_interleaved(fns, rounds=30):
    """Mean wall-clock seconds per callable, measured in interleaved rounds.

    Rounds alternate forward and reverse order and the collector is paused
    around each call, so slow drift in machine speed hits every callable alike.
    On a shared CPU this orders workloads a few percent apart far more reliably
    than a per-callable minimum.
    """
    fns = list(fns)
    totals = [0.0] * len(fns)
    for k in range(rounds):
        order = range(len(fns)) if k % 2 == 0 else reversed(range(len(fns)))
        for i in order:
            enabled = gc.isenabled()
            gc.disable()
            try:
                t0 = time.perf_counter()
                fns[i]()
                totals[i] += time.perf_counter() - t0
            finally:
                if enabled:
                    gc.enable()
    return [t / rounds for t in totals]


# ---------------------------------------------------------------- output


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Bucket):
        return v.name
    return v


def append_jsonl(path, record: dict):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({k: _jsonable(v) for k, v in record.items()}, sort_keys=True) + "\n")


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def bucket_stats_csv(stats: dict) -> str:
    k = len(next(iter(stats.values())).mean_prediction)
    head = "bucket,count,mean_confidence,mean_entropy," + ",".join(f"p{j}" for j in range(k))
    rows = [head]
    for b, s in stats.items():
        rows.append(",".join([b.name, str(s.count), repr(s.mean_confidence), repr(s.mean_entropy)]
                             + [repr(float(v)) for v in s.mean_prediction]))
    return "\n".join(rows) + "\n"


def matrix_csv(m) -> str:
    m = np.asarray(m)
    head = "," + ",".join(f"c{j}" for j in range(m.shape[1]))
    rows = [head] + [f"c{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(m)]
    return "\n".join(rows) + "\n"


def text_table(header, rows):
    cells = [list(map(str, header))] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
