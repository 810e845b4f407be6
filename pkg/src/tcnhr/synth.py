"""Synthetic wrist PPG + accelerometer recordings with known heart rate.

Each subject gets a heart-rate trace (bounded random walk inside a BPM
band), a PPG made of the fundamental and a second harmonic at that rate,
accelerometer bursts band-limited to 0.5-5 Hz and a motion artifact that
leaks the accelerometer into the PPG with strength ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import ArgumentError

FS = 32
MAX_STEP_BPM_PER_S = 2.0
PPG_NOISE_STD = 0.05
HARMONIC_GAIN = 0.3
JITTER_BPM_PER_S = 0.5
DRIFT_BPM_PER_S = 0.8
DRIFT_PERIOD_S = (120.0, 300.0)


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    bpm_lo: float
    bpm_hi: float
    alpha: float = 0.3
    duration_s: float = 600.0
    seed: int = 0

    def __post_init__(self):
        if not 40 <= self.bpm_lo <= self.bpm_hi <= 200:
            raise ArgumentError(f"HR band must satisfy 40 <= lo <= hi <= 200, got {self.bpm_lo}-{self.bpm_hi}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ArgumentError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.duration_s < 16:
            raise ArgumentError(f"duration must be >= 16 s, got {self.duration_s}")


@dataclass
class Recording:
    """Raw streams of one subject; all share the 32 Hz clock except ``hr``
    which is sampled at ``hr_rate`` Hz."""

    subject_id: str
    ppg: np.ndarray
    accel: np.ndarray  # (3, n)
    hr: np.ndarray
    fs: float = FS
    hr_rate: float = FS

    def __post_init__(self):
        self.ppg = np.ascontiguousarray(self.ppg, dtype=np.float32)
        self.accel = np.ascontiguousarray(self.accel, dtype=np.float32)
        self.hr = np.ascontiguousarray(self.hr, dtype=np.float32)
        if self.accel.shape != (3, self.ppg.size):
            raise ArgumentError(
                f"subject {self.subject_id}: accel shape {self.accel.shape} != (3, {self.ppg.size})"
            )


RecordingSet = list[Recording]


def _hr_trace(profile: SubjectProfile, rng: np.random.Generator, n: int) -> np.ndarray:
    lo, hi = profile.bpm_lo, profile.bpm_hi
    seconds = int(np.ceil(n / FS)) + 1
    knots = np.empty(seconds)
    knots[0] = rng.uniform(lo, hi)
    steps = rng.uniform(-JITTER_BPM_PER_S, JITTER_BPM_PER_S, seconds - 1)
    # slow sinusoidal drift sweeps the walk across the band within a few
    # minutes; a plain walk covers only part of it in a short recording
    period = rng.uniform(*DRIFT_PERIOD_S)
    drift = DRIFT_BPM_PER_S * np.sin(2 * np.pi * np.arange(seconds - 1) / period + rng.uniform(0, 2 * np.pi))
    steps = np.clip(steps + drift, -MAX_STEP_BPM_PER_S, MAX_STEP_BPM_PER_S)
    for i, step in enumerate(steps):
        v = knots[i] + step
        if v > hi:
            v = 2 * hi - v
        elif v < lo:
            v = 2 * lo - v
        knots[i + 1] = min(max(v, lo), hi)
    t = np.arange(n) / FS
    return np.interp(t, np.arange(seconds), knots)


def _accel_bursts(rng: np.random.Generator, n: int) -> np.ndarray:
    sos = signal.butter(4, [0.5, 5.0], btype="bandpass", fs=FS, output="sos")
    noise = signal.sosfiltfilt(sos, rng.standard_normal((3, n)), axis=1)
    noise /= noise.std(axis=1, keepdims=True) + 1e-12
    # on/off activity envelope: segments of 4-20 s, smoothed edges
    env = np.zeros(n)
    pos = 0
    active = rng.random() < 0.5
    while pos < n:
        length = int(rng.uniform(4, 20) * FS)
        if active:
            env[pos : pos + length] = rng.uniform(0.5, 1.5)
        pos += length
        active = not active
    smooth = signal.windows.hann(FS)
    env = np.convolve(env, smooth / smooth.sum(), mode="same")
    return noise * env


def synth_subject(profile: SubjectProfile) -> Recording:
    """Generate one subject; the output is a pure function of ``profile``."""
    rng = np.random.default_rng(profile.seed)
    n = int(round(profile.duration_s * FS))
    hr = _hr_trace(profile, rng, n)
    phase = 2 * np.pi * np.cumsum(hr / 60.0) / FS
    phase += rng.uniform(0, 2 * np.pi)
    accel = _accel_bursts(rng, n)
    mix = rng.normal(0.0, 1.0, 3)
    mix /= np.linalg.norm(mix)
    motion = mix @ accel
    ppg = (
        np.sin(phase)
        + HARMONIC_GAIN * np.sin(2 * phase)
        + profile.alpha * motion
        + rng.normal(0.0, PPG_NOISE_STD, n)
    )
    return Recording(profile.subject_id, ppg, accel, hr)


IN_BAND = ((55, 120), (65, 130), (60, 125), (70, 135), (60, 130), (65, 125), (55, 125))
OUT_OF_BAND = (160, 180)


def default_profiles(
    subjects: int = 6, minutes: float = 10.0, seed: int = 0, alpha: float = 0.3
) -> list[SubjectProfile]:
    """The default synthetic cohort.

    The last subject is out-of-band (160-180 BPM) whenever ``subjects >= 2``;
    the rest cycle through overlapping in-band ranges between 55 and 135 BPM.
    """
    if subjects < 1:
        raise ArgumentError("need at least one subject")
    profiles = []
    for i in range(subjects):
        oob = subjects >= 2 and i == subjects - 1
        lo, hi = OUT_OF_BAND if oob else IN_BAND[i % len(IN_BAND)]
        profiles.append(
            SubjectProfile(f"S{i + 1}", lo, hi, alpha, minutes * 60.0, seed * 1000 + i)
        )
    return profiles


def synth_set(profiles: list[SubjectProfile]) -> RecordingSet:
    return [synth_subject(p) for p in profiles]


# --------------------------------------------------------------------------
# PPG-DaLiA conversion contract
# --------------------------------------------------------------------------


def from_ppg_dalia(subject_id: str, bvp_64hz, acc_32hz, labels) -> Recording:
    """Convert one PPG-DaLiA subject to the 32 Hz container layout.

    ``bvp_64hz`` is the wrist BVP at 64 Hz, ``acc_32hz`` the wrist
    accelerometer ``(n, 3)`` at 32 Hz and ``labels`` the 0.5 Hz ground
    truth, one value per 8 s window shifted by 2 s. The BVP passes a
    4th-order low-pass at 16 Hz (zero-phase) before 2x decimation.
    """
    bvp = np.asarray(bvp_64hz, dtype=np.float64).ravel()
    acc = np.asarray(acc_32hz, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[1] != 3:
        raise ArgumentError(f"accelerometer must be (n, 3), got {acc.shape}")
    sos = signal.butter(4, 16.0, btype="lowpass", fs=64, output="sos")
    ppg = signal.sosfiltfilt(sos, bvp)[::2]
    n = min(ppg.size, acc.shape[0])
    return Recording(subject_id, ppg[:n], acc[:n].T, np.asarray(labels).ravel(), FS, 0.5)


def convert_ppg_dalia(pickle_paths) -> RecordingSet:
    """Read PPG-DaLiA ``S*.pkl`` files (trusted local data only)."""
    import pickle
    from pathlib import Path

    out = []
    for path in pickle_paths:
        with open(path, "rb") as fh:
            data = pickle.load(fh, encoding="latin1")
        wrist = data["signal"]["wrist"]
        out.append(from_ppg_dalia(Path(path).stem, wrist["BVP"], wrist["ACC"], data["label"]))
    return out
