"""Channel-width search: group-Lasso shrink, threshold prune, uniform expand.

Each conv output channel (its ``c_in x K`` filter slice) is one group. The
penalty weights every group by what the channel costs, either in
parameters (``size``) or in MACs (``flops``), so the optimizer trades
accuracy against the resource being targeted.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .errors import ArgumentError
from .ops import BN_EPS
from .trainer import Dataset, TrainConfig, evaluate_mae, train

log = logging.getLogger(__name__)

SIZE = "size"
FLOPS = "flops"


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = FLOPS
    strength: float = 1e-5
    threshold: float = 0.01
    expansion: float = 1.0

    def __post_init__(self):
        if self.kind not in (SIZE, FLOPS):
            raise ArgumentError(f"regularizer kind must be 'size' or 'flops', got {self.kind!r}")
        if self.strength < 0 or self.threshold < 0:
            raise ArgumentError("strength and threshold must be non-negative")
        if self.expansion < 1:
            raise ArgumentError(f"expansion must be >= 1, got {self.expansion}")


def default_grid() -> list[RegularizerConfig]:
    return [
        RegularizerConfig(kind, lam, tau)
        for kind in (SIZE, FLOPS)
        for lam in (1e-6, 1e-5, 1e-4)
        for tau in (0.001, 0.01, 0.05)
    ]


# --------------------------------------------------------------------------
# topology helpers
# --------------------------------------------------------------------------


def consumer_of(spec: M.NetworkSpec, i: int) -> int:
    """Index of the next weighted layer after conv ``i``."""
    for j in range(i + 1, len(spec.layers)):
        if spec.layers[j].kind in (M.CONV, M.LINEAR, M.HEAD):
            return j
    raise ArgumentError(f"layer {i} has no consumer")


def _between(spec: M.NetworkSpec, i: int, kind: str) -> list[int]:
    j = consumer_of(spec, i)
    return [k for k in range(i + 1, j) if spec.layers[k].kind == kind]


def _consumer_span(spec: M.NetworkSpec, i: int) -> int:
    """Input columns one channel of conv ``i`` occupies in its consumer."""
    j = consumer_of(spec, i)
    cons = spec.layers[j]
    if cons.kind == M.CONV:
        return 1
    c, t = spec.input_shape(j)
    return t if t is not None else 1


def channel_cost(spec: M.NetworkSpec, i: int, kind: str) -> float:
    """Resource cost of one output channel of conv layer ``i``.

    ``size``: its own filter and bias, its batch-norm pair and the slice it
    occupies in the consumer's weights. ``flops``: its own MACs plus the
    MACs the consumer spends on it as an input channel.
    """
    l = spec.layers[i]
    if l.kind != M.CONV:
        raise ArgumentError(f"layer {i} is not a conv layer")
    j = consumer_of(spec, i)
    cons = spec.layers[j]
    span = _consumer_span(spec, i)
    if kind == SIZE:
        own = l.c_in * l.k + 1 + 2 * len(_between(spec, i, M.BATCHNORM))
        downstream = cons.k * cons.c_out if cons.kind == M.CONV else span * cons.c_out
        return float(own + downstream)
    if kind == FLOPS:
        own = l.k * l.c_in * spec.output_shape(i)[1]
        if cons.kind == M.CONV:
            downstream = cons.k * cons.c_out * spec.output_shape(j)[1]
        else:
            downstream = span * cons.c_out
        return float(own + downstream)
    raise ArgumentError(f"unknown regularizer kind {kind!r}")


def _bn_after(spec: M.NetworkSpec, i: int) -> int | None:
    """Index of a batch norm directly following conv ``i``, if any."""
    j = i + 1
    if j < len(spec.layers) and spec.layers[j].kind == M.BATCHNORM:
        return j
    return None


def _bn_scale(weights: M.Weights, j: int) -> np.ndarray:
    bn = weights[j]
    return bn["gamma"].astype(np.float64) / np.sqrt(bn["running_var"].astype(np.float64) + BN_EPS)


def channel_norms(spec: M.NetworkSpec, weights: M.Weights, i: int) -> np.ndarray:
    """L2 norm of each output-channel filter of conv ``i`` as the network applies it.

    A batch norm right after the conv makes the raw filter scale
    meaningless, so its per-channel factor ``gamma / sqrt(running_var + eps)``
    is folded in first (the filter an inference engine would hold). Without
    a batch norm this is the plain filter norm.
    """
    w = weights[i]["weight"].astype(np.float64)
    norms = np.sqrt((w * w).sum(axis=(1, 2)))
    j = _bn_after(spec, i)
    return norms if j is None else norms * np.abs(_bn_scale(weights, j))


# --------------------------------------------------------------------------
# penalty / prune / expand
# --------------------------------------------------------------------------


def _lasso(spec: M.NetworkSpec, weights: M.Weights, costs: dict[int, float], strength: float):
    grads: dict[tuple[int, str], np.ndarray] = {}
    if strength == 0:
        return 0.0, grads
    total = 0.0
    for i, cost in costs.items():
        w = weights[i]["weight"]
        raw = np.sqrt((w.astype(np.float64) ** 2).sum(axis=(1, 2)))
        j = _bn_after(spec, i)
        fac = np.ones_like(raw) if j is None else _bn_scale(weights, j)
        total += strength * cost * float((raw * np.abs(fac)).sum())
        scale = np.divide(strength * cost * np.abs(fac), raw, out=np.zeros_like(raw), where=raw > 0)
        grads[(i, "weight")] = (w * scale[:, None, None]).astype(w.dtype)
        if j is not None:
            g = weights[j]["gamma"]
            denom = np.sqrt(weights[j]["running_var"].astype(np.float64) + BN_EPS)
            grads[(j, "gamma")] = (strength * cost * raw * np.sign(g) / denom).astype(g.dtype)
    return float(total), grads


def group_lasso_penalty(
    weights: M.Weights, spec: M.NetworkSpec, config: RegularizerConfig, costs: dict[int, float] | None = None
):
    """``lambda * sum_l sum_c cost(l, c) * ||W[l][c]||_2`` and its gradient.

    ``W[l][c]`` is the effective filter of :func:`channel_norms`. Returns
    ``(value, grads)`` with ``grads`` keyed by ``(layer, 'weight')`` and,
    where a batch norm is folded in, ``(bn_layer, 'gamma')``. The
    subgradient at a zero norm is taken as zero; running statistics are
    treated as constants. ``costs`` overrides :func:`channel_cost` per conv.
    """
    if costs is None:
        costs = {i: channel_cost(spec, i, config.kind) for i in spec.conv_indices()}
    return _lasso(spec, weights, costs, config.strength)


def alive_costs(spec: M.NetworkSpec, weights: M.Weights, kind: str, threshold: float) -> dict[int, float]:
    """Per-conv channel costs in the network that would survive pruning now.

    Each conv's width is taken as its count of channels at or above
    ``threshold``, so a channel whose neighbours are dying gets cheaper.
    With ``threshold = 0`` these are the plain :func:`channel_cost` values.
    """
    widths = {
        i: max(1, int(np.count_nonzero(channel_norms(spec, weights, i) >= threshold)))
        for i in spec.conv_indices()
    }
    live = M.with_channels(spec, widths)
    return {i: channel_cost(live, i, kind) for i in spec.conv_indices()}


class GroupLasso:
    """The group-Lasso penalty as used during training.

    Calling it gives ``(value, grads)``; costs are re-derived from the alive
    channel counts on every call (:func:`alive_costs`), so the pressure on
    a layer eases as its neighbours thin out instead of staying at the
    seed's full-width price. During training it is applied by :meth:`prox`
    instead of through its gradient: Adam alone never drives a group
    exactly to zero, it leaves every group hovering at a norm of order
    ``lr``. The proximal step soft-thresholds the factor that actually
    scales the effective filter (the batch-norm gamma if one follows, else
    the filter itself), so a channel stays dead exactly when its loss
    gradient is weaker than its cost.
    """

    def __init__(self, spec: M.NetworkSpec, config: RegularizerConfig):
        self.spec = spec
        self.kind = config.kind
        self.strength = config.strength
        self.threshold = config.threshold
        self.prox_keys = set()
        if self.strength:
            for i in spec.conv_indices():
                j = _bn_after(spec, i)
                self.prox_keys.add((j, "gamma") if j is not None else (i, "weight"))

    def costs(self, weights: M.Weights) -> dict[int, float]:
        return alive_costs(self.spec, weights, self.kind, self.threshold)

    def __call__(self, weights: M.Weights):
        return _lasso(self.spec, weights, self.costs(weights), self.strength)

    def prox(self, weights: M.Weights, step) -> None:
        """Shrink each group by ``step * strength * cost``, clamping at zero.

        ``step(key)`` gives per-element step sizes (None leaves the key alone).
        """
        if not self.strength:
            return
        for i, cost in self.costs(weights).items():
            w = weights[i]["weight"]
            raw = np.sqrt((w.astype(np.float64) ** 2).sum(axis=(1, 2)))
            j = _bn_after(self.spec, i)
            if j is not None:
                eta = step((j, "gamma"))
                if eta is None:
                    continue
                g = weights[j]["gamma"]
                denom = np.sqrt(weights[j]["running_var"].astype(np.float64) + BN_EPS)
                shrink = eta * self.strength * cost * raw / denom
                g[:] = np.sign(g) * np.maximum(np.abs(g) - shrink, 0.0)
            else:
                eta = step((i, "weight"))
                if eta is None:
                    continue
                shrink = eta.reshape(len(w), -1).mean(axis=1) * self.strength * cost
                keep = np.divide(np.maximum(raw - shrink, 0.0), raw, out=np.zeros_like(raw), where=raw > 0)
                w *= keep[:, None, None].astype(w.dtype)


def make_penalty(spec: M.NetworkSpec, config: RegularizerConfig) -> GroupLasso:
    return GroupLasso(spec, config)


def prune(spec: M.NetworkSpec, weights: M.Weights, threshold: float):
    """Drop conv output channels whose filter norm is below ``threshold``.

    A channel exactly at the threshold survives, and every layer keeps at
    least its strongest channel. Batch-norm entries, biases and the
    consumer's input slice are removed with the channel.
    """
    if threshold < 0:
        raise ArgumentError("threshold must be non-negative")
    M.check_weights(spec, weights)
    keep: dict[int, np.ndarray] = {}
    for i in spec.conv_indices():
        norms = channel_norms(spec, weights, i)
        mask = norms >= threshold
        if not mask.any():
            mask[np.argmax(norms)] = True
        keep[i] = mask
    new_spec = M.with_channels(spec, {i: int(m.sum()) for i, m in keep.items()})
    new_w = M.copy_weights(weights)
    for i, mask in keep.items():
        new_w[i]["weight"] = new_w[i]["weight"][mask]
        new_w[i]["bias"] = new_w[i]["bias"][mask]
        for b in _between(spec, i, M.BATCHNORM):
            for key in ("gamma", "beta", "running_mean", "running_var"):
                new_w[b][key] = new_w[b][key][mask]
        j = consumer_of(spec, i)
        if spec.layers[j].kind == M.CONV:
            new_w[j]["weight"] = new_w[j]["weight"][:, mask, :]
        else:
            cols = np.repeat(mask, _consumer_span(spec, i))
            new_w[j]["weight"] = new_w[j]["weight"][:, cols]
    for w in new_w:
        for key, arr in w.items():
            w[key] = np.ascontiguousarray(arr)
    M.check_weights(new_spec, new_w)
    return new_spec, new_w


def expand(spec: M.NetworkSpec, factor: float) -> M.NetworkSpec:
    """Scale every conv width by ``factor`` (round half up, at least 1)."""
    if factor < 1:
        raise ArgumentError(f"expansion factor must be >= 1, got {factor}")
    widths = {i: max(1, int(math.floor(spec.layers[i].c_out * factor + 0.5))) for i in spec.conv_indices()}
    return M.with_channels(spec, widths)


# --------------------------------------------------------------------------
# search
# --------------------------------------------------------------------------


@dataclass
class SearchPoint:
    config: RegularizerConfig
    spec: M.NetworkSpec
    mae: float
    params: int
    macs: int
    weights: M.Weights | None = field(default=None, repr=False)
    degenerate: bool = False


def _is_minimal(spec: M.NetworkSpec) -> bool:
    return all(spec.layers[i].c_out == 1 for i in spec.conv_indices())


def search_point(
    seed: M.NetworkSpec,
    train_set: Dataset,
    val_set: Dataset,
    reg: RegularizerConfig,
    config: TrainConfig,
    eval_set: Dataset | None = None,
    iterations: int = 1,
    retrain: bool = True,
    mae_bound: float = 7.0,
) -> SearchPoint:
    """One shrink -> prune (-> expand + retrain) run for a single grid point."""
    eval_set = eval_set if eval_set is not None else val_set
    spec, weights = seed, None
    for it in range(iterations):
        shrink = train(spec, train_set, val_set, config, penalty=make_penalty(spec, reg) if reg.strength else None)
        spec, weights = prune(spec, shrink.weights, reg.threshold)
        log.info("%s iter %d: pruned to %s (%d params)", reg, it, spec.block_out_channels(), M.count_params(spec))
        if retrain:
            spec = expand(spec, reg.expansion)
            weights = train(spec, train_set, val_set, config).weights
    score = evaluate_mae(spec, weights, eval_set.x, eval_set.y)
    return SearchPoint(
        reg, spec, score, M.count_params(spec), M.count_macs(spec), weights,
        degenerate=_is_minimal(spec) and score > mae_bound,
    )


def morph_search(
    seed: M.NetworkSpec,
    train_set: Dataset,
    val_set: Dataset,
    grid: Sequence[RegularizerConfig],
    config: TrainConfig | None = None,
    eval_set: Dataset | None = None,
    iterations: int = 1,
    retrain: bool = True,
    mae_bound: float = 7.0,
) -> list[SearchPoint]:
    """Evaluate every grid point; one :class:`SearchPoint` per entry, in order."""
    if not grid:
        raise ArgumentError("search grid is empty")
    config = config or TrainConfig()
    return [
        search_point(seed, train_set, val_set, reg, config, eval_set, iterations, retrain, mae_bound)
        for reg in grid
    ]


def pareto_front(points, axis: str = "params") -> list:
    """Points not dominated in (MAE, ``axis``), sorted by ``axis`` ascending.

    ``p`` dominates ``q`` when it is no worse on both and better on one;
    exact duplicates do not dominate each other.
    """
    if axis not in ("params", "macs"):
        raise ArgumentError(f"axis must be 'params' or 'macs', got {axis!r}")
    if not points:
        raise ArgumentError("no points")
    ordered = sorted(points, key=lambda p: (getattr(p, axis), p.mae))
    front, best = [], math.inf
    i = 0
    while i < len(ordered):
        x = getattr(ordered[i], axis)
        j = i
        while j < len(ordered) and getattr(ordered[j], axis) == x:
            j += 1
        group_min = ordered[i].mae
        if group_min < best:
            front.extend(p for p in ordered[i:j] if p.mae == group_min)
            best = group_min
        i = j
    return front


CSV_FIELDS = ["kind", "strength", "threshold", "expansion", "params", "macs", "mae", "degenerate", "channels"]


def write_points(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for p in points:
            c = p.config
            w.writerow([
                c.kind, f"{c.strength:g}", f"{c.threshold:g}", f"{c.expansion:g}",
                p.params, p.macs, f"{p.mae:.4f}", int(p.degenerate),
                "/".join(str(p.spec.layers[i].c_out) for i in p.spec.conv_indices()),
            ])
