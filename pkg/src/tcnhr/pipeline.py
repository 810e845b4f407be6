"""Windowing, normalization, the physiological clipper and subject fine-tuning."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import model as M
from .errors import ArgumentError
from .trainer import Dataset, TrainConfig, mae, predict, train

WINDOW = 256  # 8 s at 32 Hz
HOP = 64  # 2 s, i.e. 75 % overlap
N_CHANNELS = 4  # PPG, accel x/y/z

HISTORY = 10
CLIP_FRACTION = 0.10


@dataclass(frozen=True)
class Window:
    samples: np.ndarray  # (4, 256); channel 0 is PPG
    truth_bpm: float


def n_windows(length: int, window: int = WINDOW, hop: int = HOP) -> int:
    return 0 if length < window else (length - window) // hop + 1


def window_arrays(ppg, accel, hr_truth, hr_rate: float | None = None):
    """Cut streams into ``(N, 4, 256)`` windows and their BPM labels.

    With a per-sample truth stream (same length as the signals) the label
    is the mean truth inside the window. A shorter stream is treated as
    one label per window hop (``hr_rate`` = 32 / 64 Hz), as shipped with
    PPG-DaLiA.
    """
    ppg = np.asarray(ppg, dtype=np.float32).ravel()
    accel = np.asarray(accel, dtype=np.float32)
    hr = np.asarray(hr_truth, dtype=np.float32).ravel()
    if accel.shape != (3, ppg.size):
        raise ArgumentError(f"accelerometer must be (3, {ppg.size}), got {accel.shape}")
    if ppg.size < WINDOW:
        raise ArgumentError(f"stream of {ppg.size} samples is shorter than one {WINDOW}-sample window")
    signals = np.concatenate([ppg[None], accel])
    count = n_windows(ppg.size)
    if hr.size == ppg.size and hr_rate in (None, 32, 32.0):
        labels = sliding_window_view(hr, WINDOW)[::HOP][:count].mean(axis=1)
    else:
        if hr_rate is not None and not math.isclose(hr_rate, 32 / HOP):
            raise ArgumentError(f"label rate {hr_rate} Hz is neither per-sample nor per-hop")
        count = min(count, hr.size)
        labels = hr[:count]
    x = sliding_window_view(signals, WINDOW, axis=1)[:, ::HOP][:, :count]
    return np.ascontiguousarray(x.transpose(1, 0, 2)), labels.astype(np.float32)


def make_windows(ppg, accel, hr_truth, hr_rate: float | None = None) -> list[Window]:
    x, y = window_arrays(ppg, accel, hr_truth, hr_rate)
    return [Window(x[i], float(y[i])) for i in range(len(y))]


def windows_for(recording) -> Dataset:
    x, y = window_arrays(recording.ppg, recording.accel, recording.hr, recording.hr_rate)
    return Dataset(x, y)


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics, fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "NormStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or len(x) == 0:
            raise ArgumentError(f"need a non-empty (N, C, T) window stack, got {x.shape}")
        mean = x.mean(axis=(0, 2))
        std = x.std(axis=(0, 2))
        return cls(mean.astype(np.float32), np.maximum(std, 1e-8).astype(np.float32))

    @classmethod
    def identity(cls, channels: int = N_CHANNELS) -> "NormStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        return (x - self.mean[:, None]) / self.std[:, None]


# --------------------------------------------------------------------------
# post-processing
# --------------------------------------------------------------------------


class HRPostProcessor:
    """Clip each prediction to within ``fraction`` of the recent mean.

    The reference is the mean of up to ``history`` previously *returned*
    values; with an empty history the prediction passes through.
    """

    def __init__(self, history: int = HISTORY, fraction: float = CLIP_FRACTION):
        if history < 1 or fraction < 0:
            raise ArgumentError("history must be >= 1 and fraction >= 0")
        self.fraction = fraction
        self.history: deque[float] = deque(maxlen=history)

    def __call__(self, raw_bpm: float) -> float:
        raw_bpm = float(raw_bpm)
        if not math.isfinite(raw_bpm):
            raise ArgumentError(f"prediction must be finite, got {raw_bpm}")
        out = raw_bpm
        if self.history:
            m = sum(self.history) / len(self.history)
            band = self.fraction * m
            if abs(raw_bpm - m) > band:
                out = m + math.copysign(band, raw_bpm - m)
        self.history.append(out)
        return out

    def run(self, preds) -> np.ndarray:
        return np.array([self(p) for p in preds], dtype=np.float64)


def postprocess(pp: HRPostProcessor, raw_pred: float) -> float:
    return pp(raw_pred)


def write_trace(path, raw, post, truth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "raw_bpm", "post_bpm", "truth_bpm"])
        for i, (r, p, t) in enumerate(zip(raw, post, truth)):
            w.writerow([i, f"{r:.4f}", f"{p:.4f}", f"{t:.4f}"])


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------

# The network regresses raw BPM, so adapting to an unseen HR range means
# moving the output by tens of BPM; 1e-4 over 50 epochs barely moves it.
FINETUNE_CONFIG = TrainConfig(lr=1e-3, batch_size=8, max_epochs=150, patience=20, init_head_bias=False)
FINETUNE_FRACTION = 0.25
MIN_FINETUNE_WINDOWS = 8


@dataclass
class FinetuneResult:
    weights: M.Weights
    mae: float
    split: int
    predictions: np.ndarray


def finetune_split(n: int) -> int:
    return int(math.floor(FINETUNE_FRACTION * n + 0.5))


def finetune(
    spec: M.NetworkSpec,
    weights: M.Weights,
    subject: Dataset,
    config: TrainConfig | None = None,
) -> FinetuneResult:
    """Adapt to one subject on its first 25 % of windows (chronological).

    The first convolutional block stays frozen, and so does every batch
    norm: a few dozen windows from one subject would otherwise overwrite
    the running statistics and wreck in-range accuracy. Returns the
    adapted weights and the MAE on the remaining 75 %.
    """
    n = len(subject)
    if n < MIN_FINETUNE_WINDOWS:
        raise ArgumentError(f"fine-tuning needs >= {MIN_FINETUNE_WINDOWS} windows, got {n}")
    config = replace(config or FINETUNE_CONFIG, init_head_bias=False)
    k = finetune_split(n)
    head, tail = subject.subset(slice(0, k)), subject.subset(slice(k, n))
    frozen = set(spec.first_block())
    frozen.update(i for i, l in enumerate(spec.layers) if l.kind == M.BATCHNORM)
    res = train(spec, head, None, config, weights=weights, frozen=frozen)
    preds = predict(spec, res.weights, tail.x)
    return FinetuneResult(res.weights, mae(preds, tail.y), k, preds)
