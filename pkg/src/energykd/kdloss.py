"""Distillation losses with per-sample temperature.

The KD term for one sample at temperature T is ``T**2 * KL(softmax(z_t/T) || softmax(z_s/T))``.
The T**2 factor (``t_squared=True``) keeps gradient magnitudes comparable across
temperatures; pass ``t_squared=False`` for the bare KL.

Batch means use numpy's pairwise summation, which is deterministic for a fixed
input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from . import numcore
from .energy import Bucket


class PolicyMode(str, Enum):
    CONSTANT = "constant"
    ENERGY_TWO_SIDED = "energy"
    GRADATION = "gradation"


@dataclass(frozen=True)
class TemperaturePolicy:
    mode: PolicyMode = PolicyMode.ENERGY_TWO_SIDED
    base_t: float = 4.0
    t_plus: float = 2.0
    t_minus: float = -2.0
    segments: int = 10
    t_min: float = 2.0
    t_max: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "mode", PolicyMode(self.mode))
        if not self.base_t > 0:
            raise ValueError("base_t must be > 0")
        if self.mode is PolicyMode.ENERGY_TWO_SIDED:
            if self.t_plus < 0:
                raise ValueError("t_plus must be >= 0")
            if self.t_minus > 0:
                raise ValueError("t_minus must be <= 0")
            if not self.base_t + self.t_minus > 0:
                raise ValueError("base_t + t_minus must stay > 0")
        if self.mode is PolicyMode.GRADATION:
            if self.segments < 2:
                raise ValueError("gradation needs at least 2 segments")
            if not 0 < self.t_min <= self.t_max:
                raise ValueError("gradation needs 0 < t_min <= t_max")

    @classmethod
    def constant(cls, t=4.0):
        return cls(PolicyMode.CONSTANT, base_t=t)

    def to_string(self):
        parts = [self.mode.value]
        parts += [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self) if f.name != "mode"]
        return ";".join(parts)

    @classmethod
    def from_string(cls, text):
        mode, *rest = text.split(";")
        kwargs = {}
        for item in rest:
            key, _, value = item.partition("=")
            kwargs[key] = int(value) if key == "segments" else float(value)
        return cls(PolicyMode(mode), **kwargs)


def assign_temperature(bucket, rank, n, policy: TemperaturePolicy):
    """Temperature for one sample given its bucket and 1-based ascending energy rank."""
    if not 1 <= rank <= n:
        raise ValueError(f"rank {rank} outside 1..{n}")
    if policy.mode is PolicyMode.CONSTANT:
        t = policy.base_t
    elif policy.mode is PolicyMode.ENERGY_TWO_SIDED:
        bucket = Bucket(bucket)
        if bucket is Bucket.LOW:
            t = policy.base_t + policy.t_plus
        elif bucket is Bucket.HIGH:
            t = policy.base_t + policy.t_minus
        else:
            t = policy.base_t
    else:
        s = min(policy.segments - 1, (rank - 1) * policy.segments // n)
        t = policy.t_min + s * (policy.t_max - policy.t_min) / (policy.segments - 1)
    if not t > 0:
        raise ValueError(f"assigned temperature {t} is not positive")
    return t


def kd_loss_constant(z_t, z_s, T, t_squared=True):
    """Single-sample KD loss at one temperature; returns (loss, grad wrt z_s)."""
    if not T > 0:
        raise ValueError("invalid temperature")
    scale = T * T if t_squared else 1.0
    loss = scale * numcore.kl_tempered(z_t, z_s, T)
    grad = scale * numcore.kl_grad_wrt_student_logits(z_t, z_s, T)
    return loss, grad


@dataclass
class DistillLossBatch:
    losses: np.ndarray  # (N,)
    temperatures: np.ndarray  # (N,)
    mean: float
    grad: np.ndarray  # (N, K), gradient of ``mean`` wrt student logits


def energy_kd_loss(z_t, z_s, temperatures, t_squared=True):
    """Per-sample KD with each sample's own temperature; gradient is of the batch mean."""
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    temps = np.asarray(temperatures, dtype=np.float64).reshape(-1)
    if z_t.shape != z_s.shape:
        raise ValueError(f"logit shape mismatch: {z_t.shape} vs {z_s.shape}")
    if temps.shape[0] != z_s.shape[0]:
        raise ValueError(f"{temps.shape[0]} temperatures for {z_s.shape[0]} samples")
    if np.any(~(temps > 0)):
        raise ValueError("invalid temperature")
    scale = temps**2 if t_squared else np.ones_like(temps)
    losses = scale * numcore.kl_tempered(z_t, z_s, temps)
    grad = (scale / len(temps))[:, None] * numcore.kl_grad_wrt_student_logits(z_t, z_s, temps)
    return DistillLossBatch(losses, temps, float(np.mean(losses)), grad)


def total_objective(z_t, z_s, targets, temperatures, alpha, t_squared=True):
    """(1-alpha) * mean cross-entropy + alpha * mean KD; returns (loss, grad wrt z_s).

    ``targets`` is either integer labels or a per-sample target distribution
    matrix (used for mixed labels of augmented samples).
    """
    if not 0.0 <= alpha <= 1.0 or math.isnan(alpha):
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    targets = np.asarray(targets)
    if targets.ndim == 1:
        ce = numcore.cross_entropy(z_s, targets)
        ce_grad = numcore.cross_entropy_grad(z_s, targets)
    else:
        ce, ce_grad = numcore.soft_cross_entropy(z_s, targets)
    n = z_s.shape[0]
    kd = energy_kd_loss(z_t, z_s, temperatures, t_squared)
    loss = (1.0 - alpha) * float(np.mean(ce)) + alpha * kd.mean
    grad = (1.0 - alpha) * ce_grad / n + alpha * kd.grad
    return loss, grad
