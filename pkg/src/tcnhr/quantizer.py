"""Dilation flattening and full-integer int8 post-training quantization.

Integer inference folds every batch norm into the weighted layer before
it and fuses a following ReLU, so a quantized network is a chain of
``conv/linear (+ReLU)`` ops, average pools and a final head. Weights are
per-tensor symmetric int8, activations per-tensor asymmetric int8, biases
int32, and each op rescales its accumulator with a fixed-point multiplier
so the whole path is integer arithmetic. The head's accumulator is
dequantized directly into BPM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import ArgumentError, DimensionError, PreconditionError
from .ops import BN_EPS, _im2col

QMIN, QMAX = -128, 127
MIN_RANGE = 1e-3
INPUT = "input"


def round_half_away(x):
    x = np.asarray(x, np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# --------------------------------------------------------------------------
# dilation flattening
# --------------------------------------------------------------------------


def flatten_dilation(spec: M.NetworkSpec, weights: M.Weights):
    """Rewrite every dilated conv as an undilated one with ``d*(K-1)+1`` taps.

    Tap ``i`` of the original kernel lands at position ``d*i``; all other
    positions are zero, so the receptive field and the outputs are kept.
    """
    M.check_weights(spec, weights)
    layers, new_w = [], M.copy_weights(weights)
    for i, l in enumerate(spec.layers):
        if l.kind == M.CONV and l.d > 1:
            k2 = l.d * (l.k - 1) + 1
            w = np.zeros((l.c_out, l.c_in, k2), dtype=weights[i]["weight"].dtype)
            w[:, :, :: l.d] = weights[i]["weight"]
            new_w[i]["weight"] = w
            layers.append(M.LayerSpec(l.kind, l.c_in, l.c_out, k=k2, d=1, s=l.s))
        else:
            layers.append(l)
    return M.NetworkSpec(tuple(layers), spec.in_channels, spec.in_length), new_w


def is_flat(spec: M.NetworkSpec) -> bool:
    return all(l.d == 1 for l in spec.layers if l.kind == M.CONV)


# --------------------------------------------------------------------------
# folding
# --------------------------------------------------------------------------


@dataclass
class FusedOp:
    """One integer op: a weighted layer with its batch norm folded in."""

    kind: str  # conv | linear | head | pool
    layer: int  # index of the weighted (or pool) layer in the topology
    weight: np.ndarray | None = None  # float64, folded
    bias: np.ndarray | None = None
    relu: bool = False
    k: int = 1
    s: int = 1


def fold(spec: M.NetworkSpec, weights: M.Weights) -> list[FusedOp]:
    """Fold batch norms and ReLUs into the preceding weighted layers."""
    M.check_weights(spec, weights)
    ops: list[FusedOp] = []
    i, n = 0, len(spec.layers)
    while i < n:
        l = spec.layers[i]
        if l.kind == M.POOL:
            ops.append(FusedOp("pool", i, k=l.k, s=l.s))
            i += 1
            continue
        if l.kind not in (M.CONV, M.LINEAR, M.HEAD):
            raise ArgumentError(f"layer {i} ({l.kind}) does not follow a weighted layer; cannot fold")
        w = weights[i]["weight"].astype(np.float64)
        b = weights[i]["bias"].astype(np.float64)
        op = FusedOp("conv" if l.kind == M.CONV else ("head" if l.kind == M.HEAD else "linear"), i, k=l.k, s=l.s)
        j = i + 1
        if j < n and spec.layers[j].kind == M.BATCHNORM:
            bn = weights[j]
            g = bn["gamma"].astype(np.float64) / np.sqrt(bn["running_var"].astype(np.float64) + BN_EPS)
            w = w * g.reshape((-1,) + (1,) * (w.ndim - 1))
            b = (b - bn["running_mean"]) * g + bn["beta"]
            j += 1
        if j < n and spec.layers[j].kind == M.RELU:
            op.relu = True
            j += 1
        op.weight, op.bias = w, b
        ops.append(op)
        i = j
    return ops


def _float_op(op: FusedOp, h: np.ndarray) -> np.ndarray:
    if op.kind == "pool":
        t_out = (h.shape[-1] - op.k) // op.s + 1
        stop = op.s * (t_out - 1) + 1
        return sum(h[..., j : j + stop : op.s] for j in range(op.k)) / op.k
    if op.kind == "conv":
        c_out, c_in, k = op.weight.shape
        cols = _im2col(h, k, 1, op.s)
        y = np.matmul(op.weight.reshape(c_out, c_in * k), cols) + op.bias[:, None]
    else:
        if h.ndim == 3:
            h = h.reshape(len(h), -1)
        y = h @ op.weight.T + op.bias
    return np.maximum(y, 0.0) if op.relu else y


def _as_batch(spec: M.NetworkSpec, windows) -> np.ndarray:
    x = np.asarray(windows, np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (spec.in_channels, spec.in_length):
        raise DimensionError(f"windows of shape {np.shape(windows)} do not match ({spec.in_channels}, {spec.in_length})")
    return x


def folded_forward(ops: list[FusedOp], x: np.ndarray, taps: dict | None = None) -> np.ndarray:
    """Float64 forward through folded ops; records op outputs into ``taps``."""
    h = x
    for op in ops:
        h = _float_op(op, h)
        if taps is not None and op.kind != "pool":
            taps[op.layer] = h
    return h[:, 0]


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ArgumentError(f"quantization scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ArgumentError(f"zero point {self.zero_point} outside int8")

    def quantize(self, v) -> np.ndarray:
        q = round_half_away(np.asarray(v, np.float64) / self.scale) + self.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int8)

    def dequantize(self, q) -> np.ndarray:
        return (np.asarray(q, np.float64) - self.zero_point) * self.scale


def widen(lo: float, hi: float) -> tuple[float, float]:
    """Give a degenerate (lo == hi) range a width of ``MIN_RANGE``."""
    if hi - lo <= 0:
        mid = 0.5 * (lo + hi)
        return mid - MIN_RANGE / 2, mid + MIN_RANGE / 2
    return lo, hi


def activation_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric int8 parameters; the range is stretched to contain 0."""
    lo, hi = widen(lo, hi)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / (QMAX - QMIN)
    zp = int(round_half_away(QMIN - lo / scale))
    return QuantParams(scale, int(np.clip(zp, QMIN, QMAX)))


def weight_params(w: np.ndarray) -> QuantParams:
    """Symmetric int8 parameters (zero point 0) for a weight tensor."""
    m = float(np.max(np.abs(w))) if w.size else 0.0
    _, m = widen(-m, m)
    return QuantParams(m / QMAX, 0)


def calibrate(spec: M.NetworkSpec, weights: M.Weights, windows, ranges: dict | None = None) -> dict:
    """Min/max of every quantized activation over the calibration windows.

    Keys are ``'input'`` and the topology index of each weighted layer (its
    output after folding and ReLU). Passing an earlier result as ``ranges``
    extends it, so adding windows never narrows a range. Degenerate ranges
    are widened to ``MIN_RANGE``.
    """
    x = _as_batch(spec, windows)
    if len(x) == 0:
        raise ArgumentError("calibration needs at least one window")
    taps: dict = {}
    folded_forward(fold(spec, weights), x, taps)
    out = {INPUT: (float(x.min()), float(x.max()))}
    out.update({k: (float(v.min()), float(v.max())) for k, v in taps.items()})
    if ranges:
        for k, (lo, hi) in ranges.items():
            if k in out:
                out[k] = (min(lo, out[k][0]), max(hi, out[k][1]))
    return {k: widen(*v) for k, v in out.items()}


# --------------------------------------------------------------------------
# quantized model
# --------------------------------------------------------------------------


def fixed_point(m: float) -> tuple[int, int]:
    """Represent ``m > 0`` as ``mult * 2**-shift`` with a 31-bit ``mult``."""
    if not m > 0:
        raise ArgumentError(f"requantization multiplier must be positive, got {m}")
    mant, exp = math.frexp(m)
    mult = int(round(mant * (1 << 31)))
    if mult == 1 << 31:
        mult //= 2
        exp += 1
    return mult, 31 - exp


def requantize(acc: np.ndarray, mult: int, shift: int) -> np.ndarray:
    """``round(acc * mult / 2**shift)`` in int64, ties rounded up."""
    acc = acc.astype(np.int64)
    if shift > 62:
        return np.zeros_like(acc)
    prod = acc * np.int64(mult)
    if shift <= 0:
        return prod << np.int64(-shift)
    return (prod + (np.int64(1) << np.int64(shift - 1))) >> np.int64(shift)


@dataclass
class QuantOp:
    kind: str
    layer: int
    weight: np.ndarray | None = None  # int8
    bias: np.ndarray | None = None  # int32
    weight_qp: QuantParams | None = None
    out_qp: QuantParams | None = None  # None for pool and head
    relu: bool = False
    k: int = 1
    s: int = 1
    mult: int = 0
    shift: int = 0


@dataclass
class QuantizedModel:
    spec: M.NetworkSpec
    input_qp: QuantParams
    ops: list[QuantOp] = field(default_factory=list)

    def __post_init__(self):
        if not is_flat(self.spec):
            raise PreconditionError("quantized topology must have dilation 1 everywhere")


def _link(qm: QuantizedModel) -> None:
    """Derive the requantization multipliers from the stored scales."""
    in_qp = qm.input_qp
    for op in qm.ops:
        if op.kind == "pool":
            continue
        if op.kind != "head":
            op.mult, op.shift = fixed_point(in_qp.scale * op.weight_qp.scale / op.out_qp.scale)
            in_qp = op.out_qp


def build_quantized(spec, input_qp, ops) -> QuantizedModel:
    qm = QuantizedModel(spec, input_qp, ops)
    _link(qm)
    return qm


def quantize_model(spec: M.NetworkSpec, weights: M.Weights, ranges: dict) -> QuantizedModel:
    """int8 model from a flattened float model and its calibration ranges."""
    if not is_flat(spec):
        raise PreconditionError("model has dilated convolutions; run flatten_dilation first")
    folded = fold(spec, weights)
    missing = [k for k in [INPUT] + [op.layer for op in folded if op.kind not in ("pool", "head")] if k not in ranges]
    if missing:
        raise ArgumentError(f"calibration has no range for {missing}")
    input_qp = activation_params(*ranges[INPUT])
    in_scale = input_qp.scale
    ops: list[QuantOp] = []
    for op in folded:
        if op.kind == "pool":
            ops.append(QuantOp("pool", op.layer, k=op.k, s=op.s))
            continue
        wqp = weight_params(op.weight)
        wq = wqp.quantize(op.weight)
        bq = np.clip(round_half_away(op.bias / (in_scale * wqp.scale)), -(2**31), 2**31 - 1).astype(np.int32)
        out_qp = None if op.kind == "head" else activation_params(*ranges[op.layer])
        ops.append(QuantOp(op.kind, op.layer, wq, bq, wqp, out_qp, op.relu, op.k, op.s))
        if out_qp is not None:
            in_scale = out_qp.scale
    return build_quantized(spec, input_qp, ops)


def _int_matmul(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Integer products summed in float64 are exact while |sum| < 2**53, so
    # the BLAS call is order-independent and bit-reproducible.
    return np.rint(np.matmul(w.astype(np.float64), x.astype(np.float64))).astype(np.int64)


def infer_int8(qm: QuantizedModel, windows):
    """BPM estimate(s) through the integer-only path.

    ``windows`` is one ``(C, T)`` window (returns a float) or a batch.
    """
    single = np.ndim(windows) == 2
    x = _as_batch(qm.spec, windows)
    qp = qm.input_qp
    h = qp.quantize(x).astype(np.int64)
    for op in qm.ops:
        centered = h - qp.zero_point
        if op.kind == "pool":
            t_out = (h.shape[-1] - op.k) // op.s + 1
            stop = op.s * (t_out - 1) + 1
            acc = sum(centered[..., j : j + stop : op.s] for j in range(op.k))
            # round-half-up integer mean, same scale and zero point
            h = np.floor_divide(2 * acc + op.k, 2 * op.k) + qp.zero_point
            continue
        if op.kind == "conv":
            c_out, c_in, k = op.weight.shape
            cols = _im2col(centered, k, 1, op.s)
            acc = _int_matmul(op.weight.reshape(c_out, c_in * k), cols) + op.bias.astype(np.int64)[:, None]
        else:
            if centered.ndim == 3:
                centered = centered.reshape(len(centered), -1)
            acc = _int_matmul(centered, op.weight.T) + op.bias.astype(np.int64)
        if op.kind == "head":
            y = acc[:, 0].astype(np.float64) * (qp.scale * op.weight_qp.scale)
            return float(y[0]) if single else y
        out = requantize(acc, op.mult, op.shift) + op.out_qp.zero_point
        lo = op.out_qp.zero_point if op.relu else QMIN
        h = np.clip(out, lo, QMAX)
        qp = op.out_qp
    raise ArgumentError("quantized model has no regression head")


def quantize_pipeline(spec: M.NetworkSpec, weights: M.Weights, calib_windows):
    """Flatten, calibrate and quantize in one step."""
    flat_spec, flat_w = flatten_dilation(spec, weights)
    return quantize_model(flat_spec, flat_w, calibrate(flat_spec, flat_w, calib_windows))
