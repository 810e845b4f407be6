import time
from dataclasses import dataclass

import numpy as np
import pytest

from tcnhr import model as M, pipeline as P, synth as S, trainer as T


@dataclass
class Cohort:
    """A small model trained on five in-band subjects, plus two unseen ones."""

    spec: M.NetworkSpec
    weights: M.Weights
    norm: P.NormStats
    train: T.Dataset
    val: T.Dataset
    held_out: T.Dataset  # in-band, never seen
    out_of_band: T.Dataset  # 160-180 BPM, never seen
    result: T.TrainResult
    seconds: float = 0.0  # data synthesis + training wall time


def chronological_split(d: T.Dataset, *fractions):
    n, cuts, acc = len(d), [0], 0.0
    for f in fractions:
        acc += f
        cuts.append(int(round(acc * n)))
    cuts.append(n)
    return [d.subset(np.arange(a, b)) for a, b in zip(cuts[:-1], cuts[1:])]


def build_cohort(minutes=10.0, seed=1, channels=(8, 16, 32), hidden=(32, 16), epochs=60) -> Cohort:
    t0 = time.perf_counter()
    profiles = S.default_profiles(7, minutes, seed=seed)
    data = [P.windows_for(S.synth_subject(p)) for p in profiles]
    parts = [chronological_split(d, 0.8) for d in data[:5]]
    train_raw = T.Dataset.concat(p[0] for p in parts)
    norm = P.NormStats.fit(train_raw.x)
    z = lambda d: T.Dataset(norm.apply(d.x), d.y)  # noqa: E731
    spec = M.build_seed(channels, hidden)
    tr, va = z(train_raw), z(T.Dataset.concat(p[1] for p in parts))
    res = T.train(spec, tr, va, T.TrainConfig(max_epochs=epochs, patience=8, batch_size=32))
    return Cohort(spec, res.weights, norm, tr, va, z(data[5]), z(data[6]), res, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def cohort() -> Cohort:
    return build_cohort()


@pytest.fixture(scope="session")
def small_model(cohort):
    return cohort.spec, cohort.weights, cohort.norm


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
