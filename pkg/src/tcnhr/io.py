"""Binary container for checkpoints and recording sets.

Layout (little-endian throughout)::

    magic "TPPG" | version u16 | section count u16
    section table: count x (kind u16, offset u64, length u64)
    section payloads

Sections may appear in any order and readers skip kinds they do not
know. Floats are stored as raw IEEE bytes so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import ArgumentError, FormatError, TcnHrError, UnsupportedVersionError
from .pipeline import NormStats
from .quantizer import QuantizedModel, QuantOp, QuantParams, build_quantized
from .synth import Recording

MAGIC = b"TPPG"
VERSION = 1

TOPOLOGY = 1
WEIGHTS = 2
NORM = 3
QUANT = 4
DATASET = 5
META = 6

_HEADER = struct.Struct("<4sHH")
_ENTRY = struct.Struct("<HQQ")
_OP_KINDS = ("conv", "linear", "head", "pool")


# --------------------------------------------------------------------------
# section framing
# --------------------------------------------------------------------------


def pack(sections: list[tuple[int, bytes]]) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, len(sections))
    offset = len(head) + _ENTRY.size * len(sections)
    table, body = [], []
    for kind, payload in sections:
        table.append(_ENTRY.pack(kind, offset, len(payload)))
        body.append(payload)
        offset += len(payload)
    return head + b"".join(table) + b"".join(body)


def unpack(buf: bytes) -> dict[int, tuple[int, bytes]]:
    """Map section kind -> (file offset, payload). Validates the framing."""
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(buf)} bytes)", len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version} not supported (expected {VERSION})", 4)
    table_end = _HEADER.size + count * _ENTRY.size
    if table_end > len(buf):
        raise FormatError(f"section table of {count} entries runs past end of file", len(buf))
    out: dict[int, tuple[int, bytes]] = {}
    spans = []
    for n in range(count):
        at = _HEADER.size + n * _ENTRY.size
        kind, offset, length = _ENTRY.unpack_from(buf, at)
        if offset < table_end or offset + length > len(buf):
            raise FormatError(f"section {n} (kind {kind}) spans [{offset}, {offset + length}) outside file", at)
        spans.append((offset, offset + length, at))
        if kind in out:
            raise FormatError(f"duplicate section kind {kind}", at)
        out[kind] = (offset, buf[offset : offset + length])
    spans.sort()
    for (s0, e0, _), (s1, _, at) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError("overlapping sections", at)
    return out


class _Reader:
    """Cursor over one section payload; errors report absolute file offsets."""

    def __init__(self, payload: bytes, base: int):
        self.buf, self.base, self.pos = payload, base, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"section truncated (need {n} bytes)", self.base + self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def scalar(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def text(self) -> str:
        n = self.scalar("I")
        at = self.base + self.pos
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid utf-8 text: {e.reason}", at) from None

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} unexpected trailing bytes in section", self.base + self.pos)


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as e:
        raise ArgumentError(f"cannot read {path}: {e.strerror}") from None


def _write_file(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# checkpoint sections
# --------------------------------------------------------------------------


def _weights_payload(spec: M.NetworkSpec, weights: M.Weights) -> bytes:
    M.check_weights(spec, weights)
    parts = []
    for l, w in zip(spec.layers, weights):
        for key in M.PARAM_KEYS.get(l.kind, ()) + M.BUFFER_KEYS.get(l.kind, ()):
            parts.append(_f32(w[key]))
    return b"".join(parts)


def _read_weights(spec: M.NetworkSpec, r: _Reader) -> M.Weights:
    weights: M.Weights = []
    for l in spec.layers:
        shapes = M.param_shapes(l)
        w = {}
        for key in M.PARAM_KEYS.get(l.kind, ()) + M.BUFFER_KEYS.get(l.kind, ()):
            shape = shapes.get(key, (l.c_out,))  # buffers are per channel
            w[key] = r.array("<f4", int(np.prod(shape))).astype(np.float32).reshape(shape)
        weights.append(w)
    r.done()
    return weights


def _norm_payload(norm: NormStats) -> bytes:
    return struct.pack("<I", len(norm.mean)) + _f32(norm.mean) + _f32(norm.std)


def _read_norm(r: _Reader) -> NormStats:
    n = r.scalar("I")
    mean = r.array("<f4", n).astype(np.float32)
    std = r.array("<f4", n).astype(np.float32)
    r.done()
    return NormStats(mean, std)


def _qp(qp: QuantParams) -> bytes:
    return struct.pack("<di", qp.scale, qp.zero_point)


def _read_qp(r: _Reader) -> QuantParams:
    at = r.base + r.pos
    scale, zp = r.scalar("d"), r.scalar("i")
    try:
        return QuantParams(scale, zp)
    except ArgumentError as e:
        raise FormatError(str(e), at) from None


def _quant_payload(qm: QuantizedModel) -> bytes:
    parts = [_qp(qm.input_qp), struct.pack("<I", len(qm.ops))]
    for op in qm.ops:
        parts.append(struct.pack("<BIBHH", _OP_KINDS.index(op.kind), op.layer, int(op.relu), op.k, op.s))
        if op.kind == "pool":
            continue
        parts.append(_qp(op.weight_qp))
        parts.append(struct.pack("<B", op.out_qp is not None))
        if op.out_qp is not None:
            parts.append(_qp(op.out_qp))
        parts.append(struct.pack("<I", op.weight.size) + op.weight.astype(np.int8).tobytes())
        parts.append(struct.pack("<I", op.bias.size) + op.bias.astype("<i4").tobytes())
    return b"".join(parts)


def _read_quant(spec: M.NetworkSpec, r: _Reader) -> QuantizedModel:
    input_qp = _read_qp(r)
    ops = []
    for _ in range(r.scalar("I")):
        at = r.base + r.pos
        code, layer, relu, k, s = struct.unpack("<BIBHH", r.take(struct.calcsize("<BIBHH")))
        if code >= len(_OP_KINDS) or layer >= len(spec.layers):
            raise FormatError(f"bad quantized op record (kind {code}, layer {layer})", at)
        kind = _OP_KINDS[code]
        if kind == "pool":
            ops.append(QuantOp(kind, layer, k=k, s=s))
            continue
        wqp = _read_qp(r)
        out_qp = _read_qp(r) if r.scalar("B") else None
        shape = M.param_shapes(spec.layers[layer])["weight"]
        at = r.base + r.pos
        n = r.scalar("I")
        if n != int(np.prod(shape)):
            raise FormatError(f"layer {layer}: {n} int8 weights, topology needs {int(np.prod(shape))}", at)
        wq = r.array("i1", n).reshape(shape)
        at = r.base + r.pos
        nb = r.scalar("I")
        if nb != shape[0]:
            raise FormatError(f"layer {layer}: {nb} bias entries, expected {shape[0]}", at)
        bq = r.array("<i4", nb).astype(np.int32)
        ops.append(QuantOp(kind, layer, wq, bq, wqp, out_qp, bool(relu), k, s))
    r.done()
    try:
        return build_quantized(spec, input_qp, ops)
    except TcnHrError as e:
        raise FormatError(f"invalid quantized model: {e}", r.base) from None


@dataclass
class Checkpoint:
    spec: M.NetworkSpec
    weights: M.Weights | None = None
    norm: NormStats | None = None
    quantized: QuantizedModel | None = None
    meta: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    sections = [(TOPOLOGY, M.to_text(ckpt.spec).encode("utf-8"))]
    if ckpt.weights is not None:
        sections.append((WEIGHTS, _weights_payload(ckpt.spec, ckpt.weights)))
    if ckpt.norm is not None:
        sections.append((NORM, _norm_payload(ckpt.norm)))
    if ckpt.quantized is not None:
        if ckpt.quantized.spec != ckpt.spec:
            raise ArgumentError("quantized model topology differs from the checkpoint topology")
        sections.append((QUANT, _quant_payload(ckpt.quantized)))
    if ckpt.meta:
        sections.append((META, json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")))
    return pack(sections)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    secs = unpack(buf)
    if TOPOLOGY not in secs:
        raise FormatError("checkpoint has no topology section", _HEADER.size)
    at, payload = secs[TOPOLOGY]
    try:
        spec = M.from_text(payload.decode("utf-8"))
    except (UnicodeDecodeError, TcnHrError, ValueError) as e:
        raise FormatError(f"bad topology: {e}", at) from None
    ckpt = Checkpoint(spec)
    if WEIGHTS in secs:
        ckpt.weights = _read_weights(spec, _Reader(secs[WEIGHTS][1], secs[WEIGHTS][0]))
    if NORM in secs:
        ckpt.norm = _read_norm(_Reader(secs[NORM][1], secs[NORM][0]))
    if QUANT in secs:
        ckpt.quantized = _read_quant(spec, _Reader(secs[QUANT][1], secs[QUANT][0]))
    if META in secs:
        at, payload = secs[META]
        try:
            ckpt.meta = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as e:
            raise FormatError(f"bad metadata: {e}", at) from None
    return ckpt


def save_checkpoint(path, spec, weights=None, norm=None, quantized=None, meta=None) -> None:
    _write_file(path, encode_checkpoint(Checkpoint(spec, weights, norm, quantized, meta or {})))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(_read_file(path))


# --------------------------------------------------------------------------
# recording sets
# --------------------------------------------------------------------------


def encode_recordings(recordings) -> bytes:
    ids = [r.subject_id for r in recordings]
    if len(set(ids)) != len(ids):
        raise ArgumentError("subject ids must be unique")
    parts = [struct.pack("<I", len(recordings))]
    for r in recordings:
        parts.append(_text(r.subject_id))
        parts.append(struct.pack("<ddQQ", r.fs, r.hr_rate, r.ppg.size, r.hr.size))
        parts.append(_f32(r.ppg) + _f32(r.accel) + _f32(r.hr))
    return pack([(DATASET, b"".join(parts))])


def decode_recordings(buf: bytes) -> list[Recording]:
    secs = unpack(buf)
    if DATASET not in secs:
        raise FormatError("file has no dataset section", _HEADER.size)
    at, payload = secs[DATASET]
    r = _Reader(payload, at)
    out, seen = [], set()
    for _ in range(r.scalar("I")):
        start = r.base + r.pos
        sid = r.text()
        fs, hr_rate, n, m = r.scalar("d"), r.scalar("d"), r.scalar("Q"), r.scalar("Q")
        if sid in seen:
            raise FormatError(f"duplicate subject id {sid!r}", start)
        if 4 * (4 * n + m) > len(payload) - (r.pos):
            raise FormatError(f"subject {sid}: declared stream lengths exceed section", start)
        ppg = r.array("<f4", n).astype(np.float32)
        accel = r.array("<f4", 3 * n).astype(np.float32).reshape(3, n)
        hr = r.array("<f4", m).astype(np.float32)
        seen.add(sid)
        out.append(Recording(sid, ppg, accel, hr, fs, hr_rate))
    r.done()
    return out


def save_recordings(path, recordings) -> None:
    _write_file(path, encode_recordings(recordings))


def load_recording_set(path) -> list[Recording]:
    return decode_recordings(_read_file(path))
