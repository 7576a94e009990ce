"""Bit-exact lossy compressors for federated payloads.

Two codecs plus a raw-tensor framing, all sharing one little-endian wire
format so every uplink/downlink byte is exactly accountable:

    header  = magic(4 bytes) | kind(u8) | rank(u8) | dims(u32 each)
    FRQ1    = stochastically quantized vector: s(u32), l2_norm(f32),
              packed sign bits, packed level integers (ceil(log2(s+1)) bits
              each, LSB-first within each byte)
    FRI1    = range-quantized bytes: min(f32), scale(f32), one code byte
              per element
    FRT1    = raw float32 payload (4 bytes per element)

Quantized values reconstruct exactly from their payloads; serialization is
bijective bit-for-bit. Levels use stochastic rounding so the reconstructed
vector is an unbiased estimate of the input. Int8 code rounding is
half-away-from-zero (arguments are non-negative, so plain half-up), pinned
for cross-language identity.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, InputError
from .numcore import RngStream, Tensor

__all__ = [
    "QsgdPayload",
    "Int8Tensor",
    "qsgd_quantize",
    "qsgd_dequantize",
    "int8_quantize",
    "int8_dequantize",
    "serialize",
    "deserialize",
    "payload_bytes",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC_QSGD = b"FRQ1"
MAGIC_INT8 = b"FRI1"
MAGIC_RAW = b"FRT1"
MAGIC_CONTAINER = b"FRC1"

_KIND_QSGD = 1
_KIND_INT8 = 2
_KIND_RAW = 3
_KIND_CONTAINER = 5

DEFAULT_LEVELS = 127  # sign + level fit one byte per element


@dataclass(frozen=True)
class QsgdPayload:
    """Stochastic quantization of one tensor: shared norm, signs, levels."""

    shape: tuple[int, ...]
    s: int
    l2_norm: float  # float32-rounded, as serialized
    signs: np.ndarray  # bool, True = negative
    levels: np.ndarray  # uint32 in [0, s]

    def __post_init__(self):
        if self.s < 1:
            raise DomainError(f"level count must be >= 1, got {self.s}")
        if self.levels.size and int(self.levels.max()) > self.s:
            raise FormatError("level exceeds level count")

    @property
    def level_bits(self) -> int:
        return max(1, int(np.ceil(np.log2(self.s + 1))))


@dataclass(frozen=True)
class Int8Tensor:
    """Per-tensor range quantization: x ~ min + code * scale."""

    shape: tuple[int, ...]
    vmin: float  # float32-rounded
    scale: float  # float32-rounded, (max - min) / 255
    codes: np.ndarray  # uint8

    def __post_init__(self):
        if self.scale < 0:
            raise FormatError("negative scale")


# ---------------------------------------------------------------------------
# QSGD
# ---------------------------------------------------------------------------


def qsgd_quantize(v: Tensor, s: int, rng: RngStream) -> QsgdPayload:
    """Quantize to `s` levels with stochastic rounding.

    Per element: r = s * |v_i| / ||v||_2, level = floor(r) + Bernoulli(frac(r)).
    A zero vector encodes with l2_norm 0 and all levels 0. One uniform draw
    is consumed per element regardless of values, so payloads for a fixed
    shape consume the stream identically.
    """
    if s < 1:
        raise DomainError(f"level count must be >= 1, got {s}")
    x = v.data
    with np.errstate(over="ignore"):
        norm = float(np.float32(np.linalg.norm(x)))
    if not np.isfinite(norm):
        raise DomainError("tensor norm exceeds the float32 wire range")
    draws = rng.uniform01_array(x.size)
    if norm == 0.0:
        levels = np.zeros(x.size, dtype=np.uint32)
        signs = np.zeros(x.size, dtype=bool)
        return QsgdPayload(v.shape, s, 0.0, signs, levels)
    r = s * np.abs(x) / norm
    base = np.floor(r)
    levels = (base + (draws < (r - base))).astype(np.uint32)
    np.minimum(levels, np.uint32(s), out=levels)  # guard float roundoff at r == s
    return QsgdPayload(v.shape, s, norm, x < 0, levels)


def qsgd_dequantize(p: QsgdPayload) -> Tensor:
    """Reconstruct: element_i = l2_norm * sign_i * level_i / s."""
    if p.levels.size and int(p.levels.max()) > p.s:
        raise FormatError("corrupt payload: level exceeds level count")
    sign = np.where(p.signs, -1.0, 1.0)
    return Tensor(p.shape, p.l2_norm * sign * p.levels.astype(np.float64) / p.s)


# ---------------------------------------------------------------------------
# int8 dynamic range quantization
# ---------------------------------------------------------------------------


def int8_quantize(t: Tensor) -> Int8Tensor:
    """Map to 256 evenly spaced codes over the tensor's own [min, max] range.

    Constant tensors get scale 0 and all-zero codes, so they round-trip to
    float32(value) exactly. min/scale are float32 on the wire; reconstruction
    error is (max-min)/510 plus float32 rounding of the offset.
    """
    x = t.data
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise InputError("int8_quantize needs a non-empty finite tensor")
    # range computed in float64 before narrowing so scale can never go negative
    scale = float(np.float32((x.max() - x.min()) / 255.0))
    vmin = float(np.float32(x.min()))
    if scale == 0.0:
        codes = np.zeros(x.size, dtype=np.uint8)
        return Int8Tensor(t.shape, vmin, 0.0, codes)
    # round half away from zero; (x - vmin)/scale >= -eps so half-up suffices
    q = np.floor((x - vmin) / scale + 0.5)
    codes = np.clip(q, 0, 255).astype(np.uint8)
    return Int8Tensor(t.shape, vmin, scale, codes)


def int8_dequantize(q: Int8Tensor) -> Tensor:
    return Tensor(q.shape, q.codes.astype(np.float64) * q.scale + q.vmin)


def int8_roundtrip(t: Tensor) -> Tensor:
    """Convenience: what a receiver sees after the int8 wire trip."""
    return int8_dequantize(int8_quantize(t))


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------


def _header(magic: bytes, kind: int, shape: tuple[int, ...]) -> bytes:
    if len(shape) > 255:
        raise FormatError("rank exceeds wire format limit")
    return magic + struct.pack("<BB", kind, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def _pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack little-endian `bits`-wide integers, LSB-first within each byte."""
    n = values.size
    total = n * bits
    out = bytearray((total + 7) // 8)
    acc = 0
    acc_bits = 0
    pos = 0
    for v in values.tolist():
        acc |= int(v) << acc_bits
        acc_bits += bits
        while acc_bits >= 8:
            out[pos] = acc & 0xFF
            acc >>= 8
            acc_bits -= 8
            pos += 1
    if acc_bits:
        out[pos] = acc & 0xFF
    return bytes(out)


def _unpack_bits(buf: bytes, bits: int, n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.uint32)
    acc = 0
    acc_bits = 0
    pos = 0
    mask = (1 << bits) - 1
    for i in range(n):
        while acc_bits < bits:
            acc |= buf[pos] << acc_bits
            acc_bits += 8
            pos += 1
        out[i] = acc & mask
        acc >>= bits
        acc_bits -= bits
    return out


def serialize(obj: QsgdPayload | Int8Tensor | Tensor) -> bytes:
    if isinstance(obj, QsgdPayload):
        d = obj.levels.size
        body = struct.pack("<If", obj.s, obj.l2_norm)
        body += _pack_bits(obj.signs.astype(np.uint8), 1)
        body += _pack_bits(obj.levels, obj.level_bits)
        return _header(MAGIC_QSGD, _KIND_QSGD, obj.shape) + body
    if isinstance(obj, Int8Tensor):
        body = struct.pack("<ff", obj.vmin, obj.scale) + obj.codes.tobytes()
        return _header(MAGIC_INT8, _KIND_INT8, obj.shape) + body
    if isinstance(obj, Tensor):
        return _header(MAGIC_RAW, _KIND_RAW, obj.shape) + obj.data.astype("<f4").tobytes()
    raise InputError(f"cannot serialize {type(obj).__name__}")


def deserialize(buf: bytes) -> QsgdPayload | Int8Tensor | Tensor:
    if len(buf) < 6:
        raise FormatError("truncated header")
    magic, kind, rank = buf[:4], buf[4], buf[5]
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated dims")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if magic == MAGIC_QSGD and kind == _KIND_QSGD:
        s, norm = struct.unpack_from("<If", buf, off)
        off += 8
        bits = max(1, int(np.ceil(np.log2(s + 1))))
        sign_bytes = (n + 7) // 8
        level_bytes = (n * bits + 7) // 8
        if len(buf) != off + sign_bytes + level_bytes:
            raise FormatError("qsgd payload length mismatch")
        signs = _unpack_bits(buf[off : off + sign_bytes], 1, n).astype(bool)
        levels = _unpack_bits(buf[off + sign_bytes :], bits, n)
        if levels.size and int(levels.max()) > s:
            raise FormatError("corrupt payload: level exceeds level count")
        return QsgdPayload(tuple(shape), s, float(norm), signs, levels)
    if magic == MAGIC_INT8 and kind == _KIND_INT8:
        vmin, scale = struct.unpack_from("<ff", buf, off)
        off += 8
        if len(buf) != off + n:
            raise FormatError("int8 payload length mismatch")
        codes = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).copy()
        return Int8Tensor(tuple(shape), float(vmin), float(scale), codes)
    if magic == MAGIC_RAW and kind == _KIND_RAW:
        if len(buf) != off + 4 * n:
            raise FormatError("raw payload length mismatch")
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64)
        return Tensor(tuple(shape), data)
    raise FormatError(f"unknown magic/kind {magic!r}/{kind}")


def save_checkpoint(params, path) -> None:
    """Named-tensor container: FRC1 header, count, then (name, FRT1 blob) rows.

    Accepts anything with .items() yielding (str, Tensor). Values travel as
    float32 like every raw tensor on the wire.
    """
    rows = list(params.items())
    out = bytearray(_header(MAGIC_CONTAINER, _KIND_CONTAINER, ()))
    out += struct.pack("<I", len(rows))
    for name, tensor in rows:
        blob = serialize(tensor)
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<I", len(blob)) + blob
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(out)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 10 or buf[:4] != MAGIC_CONTAINER or buf[4] != _KIND_CONTAINER:
        raise FormatError(f"{path} is not a tensor container")
    (count,) = struct.unpack_from("<I", buf, 6)
    off = 10
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        (blob_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        obj = deserialize(buf[off : off + blob_len])
        if not isinstance(obj, Tensor):
            raise FormatError("container rows must be raw tensors")
        out[name] = obj
        off += blob_len
    if off != len(buf):
        raise FormatError("trailing bytes in container")
    return out


def payload_bytes(obj: QsgdPayload | Int8Tensor | Tensor) -> int:
    """Exact serialized size, computed arithmetically from the format."""
    if isinstance(obj, QsgdPayload):
        n = obj.levels.size
        return 6 + 4 * len(obj.shape) + 8 + (n + 7) // 8 + (n * obj.level_bits + 7) // 8
    if isinstance(obj, Int8Tensor):
        return 6 + 4 * len(obj.shape) + 8 + obj.codes.size
    if isinstance(obj, Tensor):
        return 6 + 4 * len(obj.shape) + 4 * obj.size
    raise InputError(f"no wire format for {type(obj).__name__}")
