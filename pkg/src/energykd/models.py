"""ReLU MLP classifiers with analytic backprop, SGD training for teacher and student.

Randomness: all RNG streams are numpy ``Generator(PCG64)`` seeded through
``np.random.default_rng(seed)``.  Batch order for epoch e is a permutation drawn
from the model's training stream, so (seed, config, dataset) fix every number.

EKDM checkpoint layout, little-endian::

    magic     4 bytes  b"EKDM"
    version   u32      1
    n_dims    u32      number of entries in layer_dims
    dims      n_dims * u32
    params    float64, per layer: W (in x out, row-major) then b (out)

EKDL logit dump layout, little-endian::

    magic     4 bytes  b"EKDL"
    version   u32      1
    N         u64
    K         u32
    logits    N*K float64, row-major
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore
from .data import Dataset
from .energy import EnergyManifest
from .kdloss import TemperaturePolicy, total_objective

log = logging.getLogger(__name__)

EKDM_MAGIC = b"EKDM"
EKDL_MAGIC = b"EKDL"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, message):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class MlpModel:
    layer_dims: list
    weights: list  # (in, out) float64 each
    biases: list  # (out,) float64 each

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least input and output sizes")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {i}: expected W{shape}, b({shape[1]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @classmethod
    def init(cls, layer_dims, seed=0):
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            ws.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(list(layer_dims), ws, bs)

    @classmethod
    def zeros(cls, layer_dims):
        return cls(list(layer_dims),
                   [np.zeros((a, b)) for a, b in zip(layer_dims[:-1], layer_dims[1:])],
                   [np.zeros(b) for b in layer_dims[1:]])

    @property
    def n_classes(self):
        return self.layer_dims[-1]

    def params(self):
        """Flat list [W0, b0, W1, b1, ...]; arrays are shared, not copied."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return MlpModel(list(self.layer_dims), [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def checksum(self):
        return hashlib.sha256(model_bytes(self)).hexdigest()


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ValueError(f"expected {model.layer_dims[0]} features, got shape {x.shape}")
    return x, single


def _forward_cache(model, x):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(model, x):
    """Logits for one feature vector or for each row of a feature matrix."""
    x, single = _check_input(model, x)
    out = _forward_cache(model, x)[-1]
    return out[0] if single else out


def backward(model, x, upstream):
    """Parameter gradients [dW0, db0, ...] given d(loss)/d(logits).

    Gradients are summed over rows; fold any batch-mean factor into ``upstream``.
    """
    x, single = _check_input(model, x)
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if g.shape != (x.shape[0], model.n_classes):
        raise ValueError(f"upstream gradient shape {g.shape} != {(x.shape[0], model.n_classes)}")
    acts = _forward_cache(model, x)
    grads = [None] * (2 * len(model.weights))
    for i in reversed(range(len(model.weights))):
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ model.weights[i].T) * (acts[i] > 0)
    return grads


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    alpha: float = 0.9
    policy: TemperaturePolicy = field(default_factory=TemperaturePolicy)
    r: float = 0.2
    t_e: float = 1.0
    t_squared_scaling: bool = True
    aug_temperature_mode: str = "base"  # "base" | "inherit"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.aug_temperature_mode not in ("base", "inherit"):
            raise ValueError("aug_temperature_mode must be 'base' or 'inherit'")


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """In place: v <- momentum*v + g + wd*theta;  theta <- theta - lr*v."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def accuracy(model, ds: Dataset):
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(numcore.argmax(forward(model, ds.features)) == ds.labels))


def _fit(model, x, n_epochs, cfg, batch_loss, on_epoch=None):
    """Shared SGD loop; ``batch_loss(idx, logits) -> (loss, dlogits)``."""
    rng = np.random.default_rng([cfg.seed, 1])
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    for epoch in range(1, n_epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(rng, x.shape[0], cfg.batch_size):
            xb = x[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                logits = _forward_cache(model, xb)[-1]
            if not np.all(np.isfinite(logits)):
                raise TrainingDiverged(epoch, "logits became non-finite")
            loss, dlogits = batch_loss(idx, logits)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, f"loss became {loss}")
            grads = backward(model, xb, dlogits)
            sgd_step(params, grads, velocity, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
            total += loss * len(idx)
            count += len(idx)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDiverged(epoch, "parameters became non-finite")
        mean_loss = total / count
        log.debug("epoch %d loss %.6f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)


def train_supervised(ds: Dataset, hidden, cfg: TrainConfig, test: Dataset | None = None):
    """Cross-entropy SGD from a seeded init; returns (model, history)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    model = MlpModel.init([ds.dim, *hidden, ds.n_classes], seed=[cfg.seed, 0])
    x = ds.features.astype(np.float64)
    history = []

    def batch_loss(idx, logits):
        labels = ds.labels[idx]
        loss = float(np.mean(numcore.cross_entropy(logits, labels)))
        return loss, numcore.cross_entropy_grad(logits, labels) / len(idx)

    def on_epoch(epoch, loss):
        history.append(_history_row(epoch, loss, model, ds, test))

    _fit(model, x, cfg.epochs, cfg, batch_loss, on_epoch)
    return model, history


def pretrain_teacher(ds: Dataset, cfg: TrainConfig, hidden=(64,), test=None):
    """Train a teacher with cross-entropy; returns (model, N x K logit dump, history)."""
    model, history = train_supervised(ds, hidden, cfg, test)
    return model, forward(model, ds.features), history


def _history_row(epoch, loss, model, train, test):
    row = {"epoch": epoch, "train_loss": loss, "train_acc": accuracy(model, train)}
    if test is not None:
        row["test_acc"] = accuracy(model, test)
    return row


def distill_student(ds: Dataset, teacher: MlpModel, manifest: EnergyManifest,
                    cfg: TrainConfig, hidden=(16,), test=None, augmented=None):
    """Train a student on total_objective with per-sample temperatures from ``manifest``.

    ``augmented`` is an optional ``augment.HedaSet`` whose extra samples are
    appended after the originals; their teacher logits come from a forward pass
    and their temperature is ``policy.base_t`` (or, with
    ``aug_temperature_mode="inherit"``, the lambda-weighted source temperatures).
    Returns (student, history).
    """
    if manifest.n != len(ds):
        raise ValueError(f"manifest has {manifest.n} rows for a dataset of {len(ds)}")
    if manifest.n_classes != ds.n_classes or teacher.n_classes != ds.n_classes:
        raise ValueError("class count mismatch between manifest, teacher and dataset")
    checksum_before = teacher.checksum()
    temps = manifest.temperatures()
    targets = numcore.onehot(ds.labels, ds.n_classes)
    x = ds.features.astype(np.float64)
    if augmented is not None:
        aug_ds = augmented.dataset
        if len(aug_ds) < len(ds) or not np.array_equal(aug_ds.features[:len(ds)], ds.features):
            raise ValueError("augmented dataset must start with the original samples")
        x = aug_ds.features.astype(np.float64)
        targets = augmented.targets
        temps = np.concatenate([temps, augmented_temperatures(augmented, temps, manifest, cfg)])
    z_t = forward(teacher, x)
    student = MlpModel.init([ds.dim, *hidden, ds.n_classes], seed=[cfg.seed, 0])
    history = []

    def batch_loss(idx, logits):
        return total_objective(z_t[idx], logits, targets[idx], temps[idx], cfg.alpha,
                               cfg.t_squared_scaling)

    def on_epoch(epoch, loss):
        history.append(_history_row(epoch, loss, student, ds, test))

    _fit(student, x, cfg.epochs, cfg, batch_loss, on_epoch)
    if teacher.checksum() != checksum_before:
        raise RuntimeError("teacher parameters changed during distillation")
    return student, history


def augmented_temperatures(augmented, temps, manifest, cfg):
    base = manifest.policy.base_t
    if cfg.aug_temperature_mode == "base":
        return np.full(len(augmented.provenance), base)
    return np.array([p.lam * temps[p.src_a] + (1 - p.lam) * temps[p.src_b]
                     for p in augmented.provenance])


# ---------------------------------------------------------------- formats


def model_bytes(model: MlpModel) -> bytes:
    dims = model.layer_dims
    head = struct.pack(f"<4sII{len(dims)}I", EKDM_MAGIC, FORMAT_VERSION, len(dims), *dims)
    body = b"".join(p.astype("<f8").tobytes() for p in model.params())
    return head + body


def save_model(model: MlpModel, path):
    Path(path).write_bytes(model_bytes(model))


def parse_model(buf: bytes) -> MlpModel:
    if buf[:4] != EKDM_MAGIC:
        raise ValueError("bad magic")
    if len(buf) < 12:
        raise ValueError("truncated header")
    version, n_dims = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported version {version}")
    if len(buf) < 12 + 4 * n_dims:
        raise ValueError("truncated header")
    dims = list(struct.unpack_from(f"<{n_dims}I", buf, 12))
    off = 12 + 4 * n_dims
    n_params = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if len(buf) != off + 8 * n_params:
        raise ValueError("truncated payload" if len(buf) < off + 8 * n_params
                         else "trailing bytes after payload")
    flat = np.frombuffer(buf, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    ws, bs, pos = [], [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        ws.append(flat[pos:pos + a * b].reshape(a, b).copy())
        pos += a * b
        bs.append(flat[pos:pos + b].copy())
        pos += b
    return MlpModel(dims, ws, bs)


def load_model(path) -> MlpModel:
    return parse_model(Path(path).read_bytes())


def save_logits(logits, path):
    logits = np.asarray(logits, dtype="<f8")
    n, k = logits.shape
    Path(path).write_bytes(struct.pack("<4sIQI", EKDL_MAGIC, FORMAT_VERSION, n, k)
                           + logits.tobytes())


def load_logits(path):
    buf = Path(path).read_bytes()
    if buf[:4] != EKDL_MAGIC:
        raise ValueError("bad magic")
    if len(buf) < 20:
        raise ValueError("truncated header")
    _, version, n, k = struct.unpack_from("<4sIQI", buf)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported version {version}")
    if len(buf) != 20 + 8 * n * k:
        raise ValueError("truncated payload" if len(buf) < 20 + 8 * n * k
                         else "trailing bytes after payload")
    return np.frombuffer(buf, dtype="<f8", offset=20).reshape(n, k).astype(np.float64)
