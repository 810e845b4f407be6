"""Training loop, early stopping and leave-one-subject-out evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import model as M
from .errors import ArgumentError, TrainingError
from .ops import logcosh_loss
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

# penalty(weights) -> (value, {(layer, key): gradient}). A penalty with a
# ``prox(weights, step)`` method and a ``prox_keys`` set is applied by that
# proximal step after each update instead of through its gradient.
Penalty = Callable[[M.Weights], tuple[float, dict[tuple[int, str], np.ndarray]]]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # start the regression bias at the mean training label
    init_head_bias: bool = True

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ArgumentError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.patience > self.max_epochs:
            raise ArgumentError("patience must not exceed max_epochs")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ArgumentError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    """Stacked windows ``x`` (N, C, T) with BPM labels ``y`` (N,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.float32)
        if self.x.ndim != 3 or len(self.x) != len(self.y):
            raise ArgumentError(f"dataset shapes x={self.x.shape} y={self.y.shape} inconsistent")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    @staticmethod
    def concat(parts: Iterable["Dataset"]) -> "Dataset":
        parts = list(parts)
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_mae: float


@dataclass
class TrainResult:
    weights: M.Weights
    curve: list[EpochStats]
    best_epoch: int
    best_val_mae: float


class EarlyStopping:
    """Strict-decrease early stopping.

    ``update`` returns True once ``patience`` consecutive epochs have
    passed without a new best.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, value: float) -> bool:
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.stale = value, self.epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    @property
    def improved(self) -> bool:
        return self.stale == 0


class Adam:
    """Adam with decoupled weight decay.

    Decay multiplies a parameter by ``1 - lr * weight_decay`` before the
    moment update and is skipped for keys in ``no_decay``.
    """

    def __init__(self, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, no_decay: set = frozenset(), metric: dict | None = None) -> None:
        """One update. ``metric`` holds gradient terms that enter only the
        second-moment estimate (a penalty handled by a proximal step)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            full = g + metric[key] if metric and key in metric else g
            if self.weight_decay and key not in no_decay:
                p *= np.float32(1.0 - self.lr * self.weight_decay)
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (full * full)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def step_size(self, key) -> np.ndarray | None:
        """Per-element effective step ``lr / (sqrt(v_hat) + eps)``."""
        v = self.v.get(key)
        if v is None:
            return None
        return self.lr / (np.sqrt(v / (1.0 - self.beta2**self.t)) + self.eps)


def _decay_exempt(spec: M.NetworkSpec) -> set:
    out = set()
    for i, l in enumerate(spec.layers):
        for key in M.PARAM_KEYS.get(l.kind, ()):
            if l.kind == M.BATCHNORM or key == "bias":
                out.add((i, key))
    return out


def predict(spec: M.NetworkSpec, weights: M.Weights, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if len(x) == 0:
        return np.zeros(0, np.float32)
    return np.concatenate([M.forward(spec, weights, x[i : i + chunk]) for i in range(0, len(x), chunk)])


def mae(preds, truths) -> float:
    preds, truths = np.asarray(preds, np.float64), np.asarray(truths, np.float64)
    if preds.shape != truths.shape:
        raise ArgumentError(f"{preds.shape[0] if preds.ndim else 0} predictions for {truths.shape} truths")
    if preds.size == 0:
        raise ArgumentError("MAE of an empty set")
    return float(np.mean(np.abs(preds - truths)))


def evaluate_mae(spec: M.NetworkSpec, weights: M.Weights, windows, truths) -> float:
    windows = np.asarray(windows)
    if len(windows) != len(truths):
        raise ArgumentError(f"{len(windows)} windows for {len(truths)} truths")
    if len(windows) == 0:
        raise ArgumentError("MAE of an empty set")
    return mae(predict(spec, weights, windows), truths)


def train(
    spec: M.NetworkSpec,
    train_set: Dataset,
    val_set: Dataset | None = None,
    config: TrainConfig | None = None,
    weights: M.Weights | None = None,
    penalty: Penalty | None = None,
    frozen: Iterable[int] = (),
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Minimize LogCosh (+ optional penalty) with Adam and early stopping.

    Returns the weights of the epoch with the best validation MAE. With a
    penalty the monitored quantity is validation MAE plus the penalty, so
    a sparsifying run is not cut short by its own shrinkage. Layers listed
    in ``frozen`` keep their parameters and batch-norm buffers untouched
    (their batch norms run in inference mode).
    """
    config = config or TrainConfig()
    if len(train_set) == 0:
        raise ArgumentError("empty training set")
    val_set = val_set if val_set is not None and len(val_set) else train_set
    frozen = set(frozen)
    if weights is None:
        weights = M.init_weights(spec, config.seed)
        if config.init_head_bias:
            weights[-1]["bias"][:] = float(np.mean(train_set.y))
    else:
        weights = M.copy_weights(weights)
    M.check_weights(spec, weights)

    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.weight_decay, config.beta1, config.beta2, config.eps)
    no_decay = _decay_exempt(spec)
    trainable = {
        (i, key): arr for i, key, arr in M.iter_params(spec, weights) if i not in frozen
    }
    prox_keys = getattr(penalty, "prox_keys", None) if penalty is not None else None
    stopper = EarlyStopping(config.patience)
    best = M.copy_weights(weights)
    curve: list[EpochStats] = []
    n = len(train_set)
    bs = config.batch_size

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            if len(idx) < 2 and n >= 2:
                continue
            leaves = [
                {k: Tensor(w[k], requires_grad=i not in frozen) for k in M.PARAM_KEYS.get(l.kind, ())}
                for i, (l, w) in enumerate(zip(spec.layers, weights))
            ]
            with GradTape() as tape:
                pred = M.forward_tensors(
                    spec, weights, Tensor(train_set.x[idx]), training=True, params=leaves, frozen=frozen
                )
                loss = logcosh_loss(pred, train_set.y[idx])
            value = float(loss.data)
            tape.backward(loss)
            grads = {(i, k): tape.grad(t) for i, d in enumerate(leaves) for k, t in d.items() if i not in frozen}
            metric = None
            if penalty is not None:
                pen, pgrads = penalty(weights)
                value += pen
                if prox_keys:
                    metric = {k: g for k, g in pgrads.items() if k in prox_keys}
                else:
                    for key, g in pgrads.items():
                        if key in grads:
                            grads[key] = grads[key] + g.astype(grads[key].dtype)
            if not np.isfinite(value):
                raise TrainingError("loss is not finite", epoch)
            losses.append(value)
            opt.step(trainable, grads, no_decay, metric)
            if prox_keys:
                penalty.prox(weights, lambda key: opt.step_size(key) if key in trainable else None)

        val_mae = evaluate_mae(spec, weights, val_set.x, val_set.y)
        if not np.isfinite(val_mae):
            raise TrainingError("validation MAE is not finite", epoch)
        stats = EpochStats(epoch, float(np.mean(losses)) if losses else float("nan"), val_mae)
        curve.append(stats)
        if on_epoch:
            on_epoch(stats)
        log.debug("epoch %d loss %.4f val_mae %.3f", epoch, stats.train_loss, val_mae)
        monitored = val_mae + (penalty(weights)[0] if penalty is not None else 0.0)
        stop = stopper.update(monitored)
        if stopper.improved:
            best = M.copy_weights(weights)
        if stop:
            break
    return TrainResult(best, curve, stopper.best_epoch, curve[stopper.best_epoch - 1].val_mae)


def write_curve(curve: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mae"])
        for s in curve:
            w.writerow([s.epoch, f"{s.train_loss:.6f}", f"{s.val_mae:.6f}"])


# --------------------------------------------------------------------------
# leave-one-subject-out
# --------------------------------------------------------------------------


@dataclass
class FoldResult:
    subject_id: str
    predictions: np.ndarray
    truths: np.ndarray
    mae: float
    val_subject: str = ""


@dataclass
class CrossvalResult:
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def mean_mae(self) -> float:
        return float(np.mean([f.mae for f in self.folds]))


def loso_crossval(spec: M.NetworkSpec, recordings, config: TrainConfig | None = None) -> CrossvalResult:
    """Hold out each subject in turn; one other subject (seeded) validates."""
    from .pipeline import NormStats, windows_for

    config = config or TrainConfig()
    if len(recordings) < 2:
        raise ArgumentError("cross-validation needs at least two subjects")
    per_subject = {r.subject_id: windows_for(r) for r in recordings}
    if len(per_subject) != len(recordings):
        raise ArgumentError("subject ids must be unique")
    for sid, ws in per_subject.items():
        if len(ws) == 0:
            raise ArgumentError(f"subject {sid} has no windows")
    rng = np.random.default_rng(config.seed)
    result = CrossvalResult()
    ids = [r.subject_id for r in recordings]
    for sid in ids:
        pool = [o for o in ids if o != sid]
        val_id = pool[rng.integers(len(pool))]
        train_ids = [o for o in pool if o != val_id] or pool
        train_raw = Dataset.concat(per_subject[o] for o in train_ids)
        stats = NormStats.fit(train_raw.x)
        norm = lambda d: Dataset(stats.apply(d.x), d.y)  # noqa: E731
        res = train(spec, norm(train_raw), norm(per_subject[val_id]), config)
        test = norm(per_subject[sid])
        preds = predict(spec, res.weights, test.x)
        result.folds.append(FoldResult(sid, preds, test.y, mae(preds, test.y), val_id))
        log.info("fold %s: MAE %.3f (val %s)", sid, result.folds[-1].mae, val_id)
    return result


def write_folds(result: CrossvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "val_subject", "windows", "mae_bpm"])
        for f in result.folds:
            w.writerow([f.subject_id, f.val_subject, len(f.truths), f"{f.mae:.4f}"])
        w.writerow(["mean", "", sum(len(f.truths) for f in result.folds), f"{result.mean_mae:.4f}"])
