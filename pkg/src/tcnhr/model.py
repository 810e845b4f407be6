"""Declarative TCN topology, the seed network and resource accounting.

A network is a plain chain of :class:`LayerSpec` entries. Weights live
outside the topology as a list with one ``dict[str, np.ndarray]`` per layer
(empty for parameter-free layers). The first linear layer after the
convolutional part implicitly flattens ``(C, T)`` channel-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import ops
from .errors import ArgumentError, DimensionError
from .tensor import Tensor

CONV = "conv"
BATCHNORM = "batchnorm"
RELU = "relu"
POOL = "pool"
LINEAR = "linear"
HEAD = "regression-head"
KINDS = (CONV, BATCHNORM, RELU, POOL, LINEAR, HEAD)

PARAM_KEYS = {
    CONV: ("weight", "bias"),
    BATCHNORM: ("gamma", "beta"),
    LINEAR: ("weight", "bias"),
    HEAD: ("weight", "bias"),
}
BUFFER_KEYS = {BATCHNORM: ("running_mean", "running_var")}

TOPOLOGY_HEADER = "tcnhr-topology v1"

Weights = list[dict[str, np.ndarray]]


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    c_in: int
    c_out: int
    k: int = 1
    d: int = 1
    s: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")
        if min(self.c_in, self.c_out, self.k, self.d, self.s) < 1:
            raise ArgumentError(f"layer fields must be >= 1: {self}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    in_channels: int = 4
    in_length: int = 256
    # (C, T) entering each layer and the shape leaving the last one
    _shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "_shapes", _walk(self))

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> LayerSpec:
        return self.layers[i]

    def input_shape(self, i: int) -> tuple[int, int | None]:
        """(channels, time) entering layer ``i``; time is None once flattened."""
        return self._shapes[i]

    def output_shape(self, i: int) -> tuple[int, int | None]:
        return self._shapes[i + 1]

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == CONV]

    def weighted_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in (CONV, LINEAR, HEAD)]

    def block_out_channels(self) -> list[int]:
        """Output width of the last conv before every pooling layer."""
        out, last = [], None
        for l in self.layers:
            if l.kind == CONV:
                last = l.c_out
            elif l.kind == POOL and last is not None:
                out.append(last)
        return out

    def first_block(self) -> list[int]:
        """Layer indices of the first convolutional block (up to the first pool)."""
        for i, l in enumerate(self.layers):
            if l.kind == POOL:
                return list(range(i + 1))
        return self.conv_indices()[:1]


def _walk(spec: NetworkSpec) -> tuple:
    c, t = spec.in_channels, spec.in_length
    shapes = [(c, t)]
    if not spec.layers:
        raise DimensionError("network has no layers")
    for i, l in enumerate(spec.layers):
        width = c
        if l.kind == CONV:
            if t is None:
                raise DimensionError(f"layer {i}: conv after flatten")
            if l.c_in != c:
                raise DimensionError(f"layer {i}: conv c_in={l.c_in} but chain carries {c} channels")
            c, t = l.c_out, ops.conv_out_len(t, l.s)
        elif l.kind in (BATCHNORM, RELU):
            if l.c_in != width or l.c_out != width:
                raise DimensionError(f"layer {i}: {l.kind} width {l.c_in} != chain width {width}")
        elif l.kind == POOL:
            if t is None or l.c_in != c or l.c_out != c:
                raise DimensionError(f"layer {i}: pool expects {c} channels on a sequence")
            if l.k > t:
                raise DimensionError(f"layer {i}: pool window {l.k} larger than length {t}")
            t = ops.pool_out_len(t, l.k, l.s)
        else:
            features = c * t if t is not None else c
            if l.c_in != features:
                raise DimensionError(f"layer {i}: {l.kind} c_in={l.c_in} but chain carries {features}")
            c, t = l.c_out, None
        shapes.append((c, t))
    last = spec.layers[-1]
    if last.kind != HEAD or last.c_out != 1:
        raise DimensionError("final layer must be a single-output regression head")
    if any(l.kind == HEAD for l in spec.layers[:-1]):
        raise DimensionError("regression head must be the final layer")
    return tuple(shapes)


# --------------------------------------------------------------------------
# seed network
# --------------------------------------------------------------------------


def build_seed(
    channels: Sequence[int] = (32, 64, 128),
    hidden: Sequence[int] = (256, 128),
    dilations: Sequence[int] = (2, 4, 8),
    kernel: int = 3,
    strided_kernel: int = 5,
    in_channels: int = 4,
    in_length: int = 256,
) -> NetworkSpec:
    """Seed network: three conv blocks plus a three-layer classifier.

    Each block is two dilated convs and one stride-2 conv (each followed by
    batch norm and ReLU) and a 2x average pool. The classifier is
    ``linear -> linear -> single-neuron regression head``.
    """
    layers: list[LayerSpec] = []
    c = in_channels
    for width, dil in zip(channels, dilations):
        for k, d, s in ((kernel, dil, 1), (kernel, dil, 1), (strided_kernel, 1, 2)):
            layers += [
                LayerSpec(CONV, c, width, k=k, d=d, s=s),
                LayerSpec(BATCHNORM, width, width),
                LayerSpec(RELU, width, width),
            ]
            c = width
        layers.append(LayerSpec(POOL, c, c, k=2, s=2))
    t = in_length
    for l in layers:
        if l.kind == CONV:
            t = ops.conv_out_len(t, l.s)
        elif l.kind == POOL:
            t = ops.pool_out_len(t, l.k, l.s)
    feat = c * t
    for h in hidden:
        layers += [LayerSpec(LINEAR, feat, h), LayerSpec(BATCHNORM, h, h), LayerSpec(RELU, h, h)]
        feat = h
    layers.append(LayerSpec(HEAD, feat, 1))
    return NetworkSpec(tuple(layers), in_channels, in_length)


def with_channels(spec: NetworkSpec, widths: dict[int, int]) -> NetworkSpec:
    """Copy of ``spec`` with new output widths for the given conv layers.

    Widths propagate along the chain into batch norms, ReLUs, pools and
    the next conv's ``c_in`` (or the first linear layer's flattened input).
    """
    layers = []
    c, t = spec.in_channels, spec.in_length
    for i, l in enumerate(spec.layers):
        if l.kind == CONV:
            out = widths.get(i, l.c_out)
            layers.append(replace(l, c_in=c, c_out=out))
            c, t = out, ops.conv_out_len(t, l.s)
        elif l.kind in (BATCHNORM, RELU):
            layers.append(replace(l, c_in=c, c_out=c))
        elif l.kind == POOL:
            layers.append(replace(l, c_in=c, c_out=c))
            t = ops.pool_out_len(t, l.k, l.s)
        else:
            feat = c * t if t is not None else c
            layers.append(replace(l, c_in=feat))
            c, t = l.c_out, None
    return NetworkSpec(tuple(layers), spec.in_channels, spec.in_length)


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------


def param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    if layer.kind == CONV:
        return {"weight": (layer.c_out, layer.c_in, layer.k), "bias": (layer.c_out,)}
    if layer.kind == BATCHNORM:
        return {"gamma": (layer.c_out,), "beta": (layer.c_out,)}
    if layer.kind in (LINEAR, HEAD):
        return {"weight": (layer.c_out, layer.c_in), "bias": (layer.c_out,)}
    return {}


def init_weights(spec: NetworkSpec, seed: int = 0) -> Weights:
    """He-normal weights, zero biases, identity batch norms."""
    rng = np.random.default_rng(seed)
    weights: Weights = []
    for l in spec.layers:
        w: dict[str, np.ndarray] = {}
        if l.kind == CONV:
            std = math.sqrt(2.0 / (l.c_in * l.k))
            w["weight"] = (rng.standard_normal((l.c_out, l.c_in, l.k)) * std).astype(np.float32)
            w["bias"] = np.zeros(l.c_out, np.float32)
        elif l.kind in (LINEAR, HEAD):
            std = math.sqrt((1.0 if l.kind == HEAD else 2.0) / l.c_in)
            w["weight"] = (rng.standard_normal((l.c_out, l.c_in)) * std).astype(np.float32)
            w["bias"] = np.zeros(l.c_out, np.float32)
        elif l.kind == BATCHNORM:
            w["gamma"] = np.ones(l.c_out, np.float32)
            w["beta"] = np.zeros(l.c_out, np.float32)
            w["running_mean"] = np.zeros(l.c_out, np.float32)
            w["running_var"] = np.ones(l.c_out, np.float32)
        weights.append(w)
    return weights


def copy_weights(weights: Weights) -> Weights:
    return [{k: v.copy() for k, v in w.items()} for w in weights]


def check_weights(spec: NetworkSpec, weights: Weights) -> None:
    if len(weights) != len(spec.layers):
        raise DimensionError(f"{len(weights)} weight entries for {len(spec.layers)} layers")
    for i, (l, w) in enumerate(zip(spec.layers, weights)):
        expected = dict(param_shapes(l))
        for key in BUFFER_KEYS.get(l.kind, ()):
            expected[key] = (l.c_out,)
        for key, shape in expected.items():
            if key not in w:
                raise DimensionError(f"layer {i} ({l.kind}): missing {key!r}")
            if w[key].shape != shape:
                raise DimensionError(
                    f"layer {i} ({l.kind}): {key} has shape {w[key].shape}, spec needs {shape}"
                )


def iter_params(spec: NetworkSpec, weights: Weights):
    """Yield ``(layer_index, key, array)`` for every trainable parameter."""
    for i, (l, w) in enumerate(zip(spec.layers, weights)):
        for key in PARAM_KEYS.get(l.kind, ()):
            yield i, key, w[key]


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def forward_tensors(
    spec: NetworkSpec,
    weights: Weights,
    x: Tensor,
    training: bool = False,
    params: list[dict[str, Tensor]] | None = None,
    frozen: set[int] = frozenset(),
) -> Tensor:
    """Run the chain on a ``(B, C, T)`` batch and return a ``(B,)`` tensor.

    ``params`` optionally supplies leaf tensors (for gradient recording)
    in place of the arrays in ``weights``; buffers always come from
    ``weights``. Batch norms listed in ``frozen`` always run in infer mode.
    """
    h = x
    for i, l in enumerate(spec.layers):
        w = weights[i]
        p = params[i] if params is not None else w
        if l.kind == CONV:
            h = ops.conv1d_causal(h, p["weight"], p["bias"], dilation=l.d, stride=l.s)
        elif l.kind == BATCHNORM:
            h = ops.batchnorm(
                h, p["gamma"], p["beta"], w["running_mean"], w["running_var"],
                training and i not in frozen,
            )
        elif l.kind == RELU:
            h = ops.relu(h)
        elif l.kind == POOL:
            h = ops.avgpool1d(h, l.k, l.s)
        else:
            if h.ndim == 3:
                h = ops.flatten(h)
            h = ops.linear(h, p["weight"], p["bias"])
    return ops.squeeze_last(h)


def forward(spec: NetworkSpec, weights: Weights, x, mode: str = "infer"):
    """Heart-rate estimate(s) in BPM.

    ``x`` is one ``(C, T)`` window (returns a float) or a ``(B, C, T)``
    batch (returns a ``(B,)`` array). ``mode='train'`` uses batch
    statistics and updates the batch-norm running buffers.
    """
    if mode not in ("train", "infer"):
        raise ArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")
    check_weights(spec, weights)
    arr = np.asarray(x, dtype=np.float32)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (spec.in_channels, spec.in_length):
        raise DimensionError(
            f"input shape {np.shape(x)} does not match network input "
            f"({spec.in_channels}, {spec.in_length})"
        )
    y = forward_tensors(spec, weights, Tensor(arr), training=(mode == "train")).data
    return float(y[0]) if single else y


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------


def layer_params(layer: LayerSpec) -> int:
    if layer.kind == CONV:
        return layer.c_out * layer.c_in * layer.k + layer.c_out
    if layer.kind == BATCHNORM:
        return 2 * layer.c_out
    if layer.kind in (LINEAR, HEAD):
        return layer.c_in * layer.c_out + layer.c_out
    return 0


def layer_macs(spec: NetworkSpec, i: int) -> int:
    l = spec.layers[i]
    if l.kind == CONV:
        return l.c_out * l.c_in * l.k * spec.output_shape(i)[1]
    if l.kind in (LINEAR, HEAD):
        return l.c_in * l.c_out
    return 0


def count_params(spec: NetworkSpec) -> int:
    return sum(layer_params(l) for l in spec.layers)


def count_macs(spec: NetworkSpec) -> int:
    """Multiply-accumulates per window; batch norm, ReLU and pooling are free."""
    return sum(layer_macs(spec, i) for i in range(len(spec.layers)))


# --------------------------------------------------------------------------
# text topology descriptor
# --------------------------------------------------------------------------


def to_text(spec: NetworkSpec) -> str:
    lines = [TOPOLOGY_HEADER, f"input {spec.in_channels} {spec.in_length}"]
    for l in spec.layers:
        lines.append(f"{l.kind} {l.c_in} {l.c_out} k={l.k} d={l.d} s={l.s}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> NetworkSpec:
    rows = [r.strip() for r in text.splitlines() if r.strip() and not r.startswith("#")]
    if not rows or rows[0] != TOPOLOGY_HEADER:
        raise ArgumentError(f"topology must start with {TOPOLOGY_HEADER!r}")
    head = rows[1].split()
    if head[0] != "input" or len(head) != 3:
        raise ArgumentError(f"bad input line {rows[1]!r}")
    layers = []
    for row in rows[2:]:
        kind, c_in, c_out, *opts = row.split()
        kw = {}
        for opt in opts:
            key, _, val = opt.partition("=")
            if key not in ("k", "d", "s"):
                raise ArgumentError(f"unknown layer option {opt!r}")
            kw[key] = int(val)
        layers.append(LayerSpec(kind, int(c_in), int(c_out), **kw))
    return NetworkSpec(tuple(layers), int(head[1]), int(head[2]))
