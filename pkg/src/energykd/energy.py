"""Per-sample energy scores from teacher logits, ranking, and LOW/ELSE/HIGH partitioning.

Energy of a logit vector z at energy temperature T_E is ``-T_E * logsumexp(z / T_E)``.
Low energy means a confident teacher; high energy means an uncertain one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import numcore


class Bucket(IntEnum):
    LOW = 0
    ELSE = 1
    HIGH = 2


def energy_score(z, t_e=1.0):
    """Energy of one logit vector (float) or of every row of a logit matrix (array)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise ValueError("energy needs at least 2 logits")
    if not (t_e > 0 and math.isfinite(t_e)):
        raise ValueError("invalid temperature")
    return -t_e * numcore.log_sum_exp(z / t_e)


def log_unnormalized_density(z, t_e=1.0):
    """log p(x) up to the additive constant log C: ``-energy / T_E``."""
    return -energy_score(z, t_e) / t_e


@dataclass(frozen=True)
class EnergyRecord:
    sample_id: int
    energy: float
    rank: int


def rank_dataset(logits, t_e=1.0, ids=None):
    """Energy records in ascending energy order, ties broken by ascending sample id."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("empty logit matrix")
    energies = energy_score(logits, t_e)
    ids = np.arange(len(energies)) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape != energies.shape:
        raise ValueError("one id per logit row required")
    if len(np.unique(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    return records_from_energies(energies, ids)


def records_from_energies(energies, ids=None):
    energies = np.asarray(energies, dtype=np.float64)
    ids = np.arange(len(energies)) if ids is None else np.asarray(ids, dtype=np.int64)
    order = np.lexsort((ids, energies))
    return [
        EnergyRecord(int(ids[i]), float(energies[i]), rank)
        for rank, i in enumerate(order, start=1)
    ]


@dataclass(frozen=True)
class PartitionPlan:
    r: float
    n_boundary: int
    e_low: float
    e_high: float
    ids_by_rank: tuple  # sample ids in ascending energy order
    buckets: dict = field(compare=True)  # sample_id -> Bucket

    @property
    def n(self):
        return len(self.ids_by_rank)

    def bucket_of(self, sample_id):
        return self.buckets[sample_id]

    def ids_in(self, bucket):
        return [i for i in self.ids_by_rank if self.buckets[i] == bucket]

    def sizes(self):
        counts = {b: 0 for b in Bucket}
        for b in self.buckets.values():
            counts[b] += 1
        return counts[Bucket.LOW], counts[Bucket.ELSE], counts[Bucket.HIGH]


def _check_records(records):
    if not records:
        raise ValueError("no records")
    ranks = [rec.rank for rec in records]
    if sorted(ranks) != list(range(1, len(records) + 1)):
        raise ValueError("ranks must be a permutation of 1..N")
    return sorted(records, key=lambda rec: rec.rank)


def partition(records, r):
    """Ranks 1..n are LOW, N-n+1..N are HIGH, the rest ELSE, with n = floor(N*r).

    Membership is decided by rank so bucket sizes stay exact under ties; the
    thresholds are the energies at ranks n and N-n+1 and are kept for reporting.
    """
    if not 0 < r <= 0.5:
        raise ValueError(f"r={r}: buckets would overlap or be empty (need 0 < r <= 0.5)")
    recs = _check_records(records)
    n_total = len(recs)
    n = math.floor(n_total * r)
    if n == 0:
        raise ValueError(f"floor(N*r) = 0 for N={n_total}, r={r}")
    buckets = {}
    for rec in recs:
        if rec.rank <= n:
            buckets[rec.sample_id] = Bucket.LOW
        elif rec.rank >= n_total - n + 1:
            buckets[rec.sample_id] = Bucket.HIGH
        else:
            buckets[rec.sample_id] = Bucket.ELSE
    return PartitionPlan(
        r=float(r),
        n_boundary=n,
        e_low=recs[n - 1].energy,
        e_high=recs[n_total - n].energy,
        ids_by_rank=tuple(rec.sample_id for rec in recs),
        buckets=buckets,
    )


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestRow:
    sample_id: int
    energy: float
    rank: int
    bucket: Bucket
    temperature: float


@dataclass
class EnergyManifest:
    n_classes: int
    r: float
    t_e: float
    policy: object  # kdloss.TemperaturePolicy
    teacher_checksum: str
    rows: list  # ManifestRow, ordered by sample id

    @property
    def n(self):
        return len(self.rows)

    def temperatures(self):
        """Temperature per sample, indexed by sample id."""
        out = np.empty(self.n)
        for row in self.rows:
            out[row.sample_id] = row.temperature
        return out

    def buckets(self):
        return np.array([row.bucket for row in self.rows], dtype=np.int64)


def _f32(x):
    return float(np.float32(x))


def build_manifest(plan: PartitionPlan, records, policy, n_classes, t_e=1.0,
                   teacher_checksum=""):
    """Attach each sample's assigned temperature to its energy, rank and bucket.

    Energies are stored at float32 precision so the 9-significant-digit text
    form round-trips exactly.
    """
    from .kdloss import assign_temperature

    recs = _check_records(records)
    if set(plan.buckets) != {rec.sample_id for rec in recs} or len(plan.buckets) != len(recs):
        raise ValueError("plan and records cover different sample ids")
    ids = sorted(plan.buckets)
    if ids != list(range(len(ids))):
        raise ValueError("sample ids must be contiguous from 0")
    n = len(recs)
    rows = [
        ManifestRow(
            rec.sample_id,
            _f32(rec.energy),
            rec.rank,
            plan.buckets[rec.sample_id],
            float(assign_temperature(plan.buckets[rec.sample_id], rec.rank, n, policy)),
        )
        for rec in recs
    ]
    rows.sort(key=lambda row: row.sample_id)
    return EnergyManifest(n_classes, plan.r, float(t_e), policy, teacher_checksum, rows)


MANIFEST_COLUMNS = "sample_id,energy,rank,bucket,temperature"


def manifest_text(m: EnergyManifest) -> str:
    lines = [
        f"# N={m.n}",
        f"# K={m.n_classes}",
        f"# r={m.r!r}",
        f"# T_E={m.t_e!r}",
        f"# policy={m.policy.to_string()}",
        f"# teacher_checksum={m.teacher_checksum}",
        MANIFEST_COLUMNS,
    ]
    for row in m.rows:
        lines.append(
            f"{row.sample_id},{row.energy:.9g},{row.rank},{row.bucket.name},{row.temperature!r}"
        )
    return "\n".join(lines) + "\n"


def write_manifest(m: EnergyManifest, path):
    Path(path).write_text(manifest_text(m), encoding="utf-8")


def parse_manifest(text: str) -> EnergyManifest:
    from .kdloss import TemperaturePolicy

    header = {}
    rows = []
    seen_columns = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: malformed header {line!r}")
            header[key.strip()] = value.strip()
            continue
        if not seen_columns:
            if line.strip() != MANIFEST_COLUMNS:
                raise ValueError(f"line {lineno}: expected column header {MANIFEST_COLUMNS!r}")
            seen_columns = True
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields")
        rows.append(ManifestRow(int(parts[0]), _f32(parts[1]), int(parts[2]),
                                Bucket[parts[3]], float(parts[4])))
    missing = {"N", "K", "r", "T_E", "policy", "teacher_checksum"} - set(header)
    if missing:
        raise ValueError(f"manifest header missing {sorted(missing)}")
    if int(header["N"]) != len(rows):
        raise ValueError(f"manifest declares N={header['N']} but has {len(rows)} rows")
    if [row.sample_id for row in rows] != list(range(len(rows))):
        raise ValueError("manifest rows must list sample ids 0..N-1 in order")
    if any(not row.temperature > 0 for row in rows):
        raise ValueError("manifest temperatures must be positive")
    return EnergyManifest(
        n_classes=int(header["K"]),
        r=float(header["r"]),
        t_e=float(header["T_E"]),
        policy=TemperaturePolicy.from_string(header["policy"]),
        teacher_checksum=header["teacher_checksum"],
        rows=rows,
    )


def read_manifest(path) -> EnergyManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def plan_from_manifest(m: EnergyManifest) -> PartitionPlan:
    recs = sorted(m.rows, key=lambda row: row.rank)
    n = sum(1 for row in m.rows if row.bucket == Bucket.LOW)
    return PartitionPlan(
        r=m.r,
        n_boundary=n,
        e_low=recs[n - 1].energy,
        e_high=recs[len(recs) - n].energy,
        ids_by_rank=tuple(row.sample_id for row in recs),
        buckets={row.sample_id: row.bucket for row in m.rows},
    )
