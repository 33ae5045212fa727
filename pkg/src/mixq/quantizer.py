"""Blockwise absmax codecs: uniform, NormalFloat and FP4 lookup tables.

Weights are flattened row-major, cut into blocks of ``block_size`` elements,
normalized by each block's absolute maximum and encoded as the index of the
nearest codebook entry.  Decoding is a pure table lookup times the block scale.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


class CodebookKind(enum.IntEnum):
    UNIFORM = 0
    NORMAL_FLOAT = 1
    FP4 = 2

    @classmethod
    def parse(cls, value: "CodebookKind | str | int") -> "CodebookKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().lower().replace("_", "").replace("-", "")
            aliases = {
                "uniform": cls.UNIFORM,
                "int": cls.UNIFORM,
                "normalfloat": cls.NORMAL_FLOAT,
                "nf": cls.NORMAL_FLOAT,
                "nf4": cls.NORMAL_FLOAT,
                "fp4": cls.FP4,
            }
            if key not in aliases:
                raise ValueError(f"unknown codebook kind {value!r}")
            return aliases[key]
        return cls(int(value))


SUPPORTED_BITS = (4, 8)

# E2M1 magnitudes, normalized so the largest is 1.
_FP4_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]) / 6.0


@dataclass(frozen=True, eq=False)
class Codebook:
    bits: int
    values: np.ndarray
    kind: CodebookKind

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.shape != (2**self.bits,):
            raise ValueError(f"codebook needs {2**self.bits} values, got {values.shape}")
        steps = np.diff(values)
        if self.kind == CodebookKind.FP4:
            ok = np.all(steps >= 0)
        else:
            ok = np.all(steps > 0)
        if not ok:
            raise ValueError("codebook values must be increasing")

    @property
    def size(self) -> int:
        return 2**self.bits

    def nearest(self, x: np.ndarray) -> np.ndarray:
        """Index of the closest entry for every element of ``x``; ties go low."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1)
        out = np.empty(flat.shape, dtype=np.int64)
        # chunked so 8-bit tables over large inputs stay small in memory
        chunk = max(1, (1 << 20) // self.size)
        for start in range(0, flat.size, chunk):
            part = flat[start : start + chunk]
            dist = np.abs(part[:, None] - self.values[None, :])
            out[start : start + chunk] = np.argmin(dist, axis=1)
        return out.reshape(x.shape)

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.kind == other.kind
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.bits, int(self.kind)))


def _normal_float_values(bits: int) -> np.ndarray:
    n = 2**bits
    delta = 1.0 / (2.0 * (n + 1))
    probs = delta + np.arange(n) * (1.0 - 2.0 * delta) / (n - 1)
    values = norm.ppf(probs) / norm.ppf(1.0 - delta)
    # force exact antisymmetry and exact unit endpoints
    values = 0.5 * (values - values[::-1])
    values[0], values[-1] = -1.0, 1.0
    return values


def build_codebook(bits: int, kind: "CodebookKind | str" = CodebookKind.UNIFORM) -> Codebook:
    """Canonical lookup table over [-1, 1] for ``bits`` and ``kind``."""
    kind = CodebookKind.parse(kind)
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
    if kind == CodebookKind.UNIFORM:
        values = np.linspace(-1.0, 1.0, 2**bits)
    elif kind == CodebookKind.NORMAL_FLOAT:
        values = _normal_float_values(bits)
    else:
        if bits != 4:
            raise ValueError("FP4 codebook requires bits == 4")
        negative = -_FP4_MAGNITUDES[:0:-1]
        # 15 distinct values plus a second code for +0
        values = np.concatenate([negative, [0.0], _FP4_MAGNITUDES])
    return Codebook(bits=bits, values=values, kind=kind)


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    rows: int
    cols: int
    codes: np.ndarray
    block_size: int
    scales: np.ndarray
    codebook: Codebook

    def __post_init__(self):
        codes = np.asarray(self.codes)
        scales = np.asarray(self.scales, dtype=np.float64)
        if codes.dtype.kind not in "iu":
            raise TypeError("codes must be integers")
        codes = codes.astype(np.int64).reshape(-1)
        codes.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scales", scales)
        if self.rows < 1 or self.cols < 1 or self.block_size < 1:
            raise ValueError("rows, cols and block_size must be positive")
        if codes.size != self.rows * self.cols:
            raise ValueError("code count does not match shape")
        if scales.shape != (self.n_blocks,):
            raise ValueError(f"expected {self.n_blocks} scales, got {scales.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def bits(self) -> int:
        return self.codebook.bits

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.rows * self.cols / self.block_size)

    def __eq__(self, other):
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.block_size == other.block_size
            and self.codebook == other.codebook
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales, other.scales)
        )

    __hash__ = None

    def to_bytes(self) -> bytes:
        return dump_quantized(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedMatrix":
        return load_quantized(data)


def _as_matrix(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix has non-finite entries")
    return W


def _blocks(flat: np.ndarray, block_size: int) -> np.ndarray:
    pad = (-flat.size) % block_size
    if pad:
        flat = np.concatenate([flat, np.zeros(pad)])
    return flat.reshape(-1, block_size)


def quantize(W, codebook: Codebook, block_size: int = 64) -> QuantizedMatrix:
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    W = _as_matrix(W)
    rows, cols = W.shape
    n = W.size
    blocks = _blocks(W.reshape(-1), block_size)
    scales = np.max(np.abs(blocks), axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    normalized = blocks / safe[:, None]
    codes = codebook.nearest(normalized).reshape(-1)[:n]
    return QuantizedMatrix(rows, cols, codes, block_size, scales, codebook)


def dequantize(Q: QuantizedMatrix) -> np.ndarray:
    codes = Q.codes.astype(np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= Q.codebook.size):
        raise ValueError("code out of codebook range")
    per_element = np.repeat(Q.scales, Q.block_size)[: codes.size]
    return (per_element * Q.codebook.values[codes]).reshape(Q.rows, Q.cols)


def simulated_matmul(Q: QuantizedMatrix, X) -> np.ndarray:
    """Multiply the decoded weights by ``X`` in full precision."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != Q.cols:
        raise ValueError(f"shape mismatch: {Q.shape} @ {X.shape}")
    return dequantize(Q) @ X


_HEADER = struct.Struct("<IIBBI")


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack integer codes at ``bits`` each, LSB-first within bytes."""
    codes = np.asarray(codes, dtype=np.uint64).reshape(-1)
    shifts = np.arange(bits, dtype=np.uint64)
    bitplanes = ((codes[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bitplanes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    flat = np.unpackbits(raw, bitorder="little", count=count * bits)
    planes = flat.reshape(count, bits).astype(np.int64)
    return (planes << np.arange(bits)[None, :]).sum(axis=1)


def dump_quantized(Q: QuantizedMatrix) -> bytes:
    header = _HEADER.pack(Q.rows, Q.cols, Q.bits, int(Q.codebook.kind), Q.block_size)
    scales = Q.scales.astype("<f8").tobytes()
    return header + scales + pack_codes(Q.codes, Q.bits)


def load_quantized(data: bytes) -> QuantizedMatrix:
    if len(data) < _HEADER.size:
        raise ValueError("truncated header")
    rows, cols, bits, kind, block_size = _HEADER.unpack_from(data, 0)
    codebook = build_codebook(bits, CodebookKind(kind))
    n = rows * cols
    n_blocks = math.ceil(n / block_size)
    offset = _HEADER.size
    scales = np.frombuffer(data, dtype="<f8", count=n_blocks, offset=offset).astype(np.float64)
    offset += 8 * n_blocks
    code_bytes = math.ceil(n * bits / 8)
    if len(data) != offset + code_bytes:
        raise ValueError("payload length does not match header")
    codes = unpack_codes(data[offset:], bits, n)
    return QuantizedMatrix(rows, cols, codes, block_size, scales, codebook)
