"""Analytic byte count for a bit-width configuration.

Replaces measured peak GPU memory with an exact integer inventory: packed
codes, per-block f64 scales, the lookup tables in use, f64 adapter factors
and the two Adam moment buffers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .quantizer import CodebookKind
from .workbench import DEFAULT_KINDS


@dataclass(frozen=True)
class MemoryBreakdown:
    base_bytes: int
    scale_bytes: int
    codebook_bytes: int
    adapter_bytes: int
    optimizer_bytes: int

    @property
    def total(self) -> int:
        return (
            self.base_bytes
            + self.scale_bytes
            + self.codebook_bytes
            + self.adapter_bytes
            + self.optimizer_bytes
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        return out


def layer_shapes(model) -> list[tuple[int, int]]:
    """Accepts a model exposing ``weights`` or a plain list of (d_out, d_in)."""
    if hasattr(model, "weights"):
        return [tuple(W.shape) for W in model.weights]
    return [(int(a), int(b)) for a, b in model]


def memory(model, q, rank: int = 4, block_size: int = 64, kinds=None) -> MemoryBreakdown:
    shapes = layer_shapes(model)
    q = tuple(int(b) for b in q)
    if len(q) != len(shapes):
        raise ValueError(f"config length {len(q)} != layer count {len(shapes)}")
    kinds = {**DEFAULT_KINDS, **(kinds or {})}
    base = scales = adapters = 0
    tables = set()
    for (d_out, d_in), bits in zip(shapes, q):
        elems = d_out * d_in
        base += -(-elems * bits // 8)
        scales += math.ceil(elems / block_size) * 8
        r = min(rank, d_out, d_in)
        adapters += r * (d_out + d_in) * 8
        tables.add((bits, CodebookKind.parse(kinds[bits])))
    codebooks = sum(2**bits * 8 for bits, _ in tables)
    return MemoryBreakdown(base, scales, codebooks, adapters, 2 * adapters)


class CostModel:
    """Memory model bound to one architecture, with analytic normalization."""

    def __init__(self, model, rank: int = 4, block_size: int = 64, kinds=None):
        self.shapes = layer_shapes(model)
        self.rank = rank
        self.block_size = block_size
        self.kinds = {**DEFAULT_KINDS, **(kinds or {})}
        self.L = len(self.shapes)
        self.m_min = self.memory((4,) * self.L).total
        self.m_max = self.memory((8,) * self.L).total

    def memory(self, q) -> MemoryBreakdown:
        return memory(self.shapes, q, self.rank, self.block_size, self.kinds)

    def total(self, q) -> int:
        return self.memory(q).total

    def normalize(self, m: float) -> float:
        """Map bytes onto [0, 1] between the all-4-bit and all-8-bit totals."""
        span = self.m_max - self.m_min
        if span <= 0:
            return 0.0
        return (m - self.m_min) / span

    def m_norm(self, q) -> float:
        return self.normalize(self.total(q))
