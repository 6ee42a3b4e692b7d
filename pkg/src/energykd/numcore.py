"""Numerically stable primitives: log-sum-exp, tempered softmax, KL, cross-entropy.

Every function accepts either a single vector or a matrix whose rows are
independent samples; the class axis is always the last one.  Accumulation is
done in float64 regardless of the input dtype.
"""

from __future__ import annotations

import numpy as np


def _as_logits(z, name="input"):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0 or z.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite input")
    return z


def _check_temperature(T):
    T = np.asarray(T, dtype=np.float64)
    if not np.all(np.isfinite(T)) or np.any(T <= 0):
        raise ValueError("invalid temperature")
    return T


def _col(T, z):
    """Broadcast a scalar or per-row temperature against logits ``z``."""
    if T.ndim == 0 or z.ndim == 1:
        return T
    if T.shape != z.shape[:-1]:
        raise ValueError(f"temperature shape {T.shape} does not match {z.shape[:-1]}")
    return T[..., None]


def log_sum_exp(z):
    """log(sum(exp(z))) along the last axis, via max-shift."""
    z = _as_logits(z)
    m = z.max(axis=-1, keepdims=True)
    out = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = out[..., 0]
    return float(out) if out.ndim == 0 else out


def log_softmax_t(z, T=1.0):
    z = _as_logits(z)
    T = _col(_check_temperature(T), z)
    s = z / T
    m = s.max(axis=-1, keepdims=True)
    shifted = s - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_t(z, T=1.0):
    """Softmax of ``z / T``.  Raises ``ValueError("invalid temperature")`` for T <= 0."""
    z = _as_logits(z)
    T = _col(_check_temperature(T), z)
    s = z / T
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def argmax(z):
    # np.argmax already returns the lowest index among ties
    return np.argmax(np.asarray(z), axis=-1)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def kl_div(p, q):
    """KL(p || q) with the 0 * log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise ValueError("q has zero mass where p is positive")
    ratio = np.where(support, p, 1.0) / np.where(support, q, 1.0)
    out = (p * np.log(ratio)).sum(axis=-1)
    # float noise can push an exact zero slightly negative
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def kl_tempered(z_t, z_s, T):
    """KL(softmax(z_t/T) || softmax(z_s/T)) computed in log space."""
    z_t = _as_logits(z_t)
    z_s = _as_logits(z_s)
    if z_t.shape != z_s.shape:
        raise ValueError(f"length mismatch: {z_t.shape} vs {z_s.shape}")
    log_pt = log_softmax_t(z_t, T)
    log_ps = log_softmax_t(z_s, T)
    out = np.maximum((np.exp(log_pt) * (log_pt - log_ps)).sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def kl_grad_wrt_student_logits(z_t, z_s, T):
    """d/dz_s KL(softmax(z_t/T) || softmax(z_s/T)) = (softmax(z_s/T) - softmax(z_t/T)) / T."""
    z_t = _as_logits(z_t)
    z_s = _as_logits(z_s)
    if z_t.shape != z_s.shape:
        raise ValueError(f"length mismatch: {z_t.shape} vs {z_s.shape}")
    Tc = _col(_check_temperature(T), z_s)
    return (softmax_t(z_s, T) - softmax_t(z_t, T)) / Tc


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise ValueError("labels must be integers")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")
    return labels.astype(np.int64)


def cross_entropy(z, label):
    """-log softmax(z)[label] for a vector, or per-row values for a matrix."""
    z = _as_logits(z)
    label = _check_labels(label, z.shape[-1])
    logp = log_softmax_t(z, 1.0)
    if z.ndim == 1:
        if label.ndim != 0:
            raise ValueError("a single logit vector takes a single label")
        return float(-logp[label])
    if label.shape != z.shape[:-1]:
        raise ValueError("one label per row required")
    return -np.take_along_axis(logp, label[:, None], axis=-1)[:, 0]


def cross_entropy_grad(z, label):
    """softmax(z) - onehot(label)."""
    z = _as_logits(z)
    label = _check_labels(label, z.shape[-1])
    g = softmax_t(z, 1.0)
    if z.ndim == 1:
        g[label] -= 1.0
    else:
        g[np.arange(z.shape[0]), label] -= 1.0
    return g


def soft_cross_entropy(z, target):
    """Cross-entropy against a target distribution; returns (per-row loss, grad)."""
    z = _as_logits(z)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != z.shape:
        raise ValueError(f"target shape {target.shape} does not match {z.shape}")
    logp = log_softmax_t(z, 1.0)
    loss = -(target * logp).sum(axis=-1)
    grad = np.exp(logp) * target.sum(axis=-1, keepdims=True) - target
    return loss, grad


def onehot(labels, k):
    labels = _check_labels(labels, k)
    out = np.zeros(labels.shape + (k,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out
