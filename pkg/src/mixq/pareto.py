"""Two-objective Pareto machinery: minimize memory M, maximize performance P."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


def bit_string(config) -> str:
    return "".join(str(int(b)) for b in config)


def parse_bits(text: str) -> tuple[int, ...]:
    """``"4848"`` -> ``(4, 8, 4, 8)``."""
    text = text.strip()
    if not text or any(c not in "48" for c in text):
        raise ValueError(f"bit string must use only 4 and 8, got {text!r}")
    return tuple(int(c) for c in text)


@dataclass
class EvalRecord:
    config: tuple
    P: float
    M: int
    seed: int = 0
    iteration: int = 0
    breakdown: dict = field(default_factory=dict)
    failed: bool = False
    source: str = "trained"

    def __post_init__(self):
        self.config = tuple(int(b) for b in self.config)
        if not (np.isfinite(self.P) and np.isfinite(self.M)):
            raise ValueError("P and M must be finite")

    @property
    def bits(self) -> str:
        return bit_string(self.config)

    def to_dict(self) -> dict:
        return {
            "config": self.bits,
            "P": self.P,
            "M": int(self.M),
            "seed": self.seed,
            "iteration": self.iteration,
            "breakdown": dict(self.breakdown),
            "failed": self.failed,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(
            config=parse_bits(d["config"]),
            P=float(d["P"]),
            M=int(d["M"]),
            seed=int(d.get("seed", 0)),
            iteration=int(d.get("iteration", 0)),
            breakdown=dict(d.get("breakdown", {})),
            failed=bool(d.get("failed", False)),
            source=d.get("source", "trained"),
        )


def dominates(a: EvalRecord, b: EvalRecord) -> bool:
    return a.M <= b.M and a.P >= b.P and (a.M < b.M or a.P > b.P)


@dataclass
class ParetoFront:
    members: list
    generation: int = 0

    @property
    def configs(self) -> frozenset:
        return frozenset(m.config for m in self.members)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def merge_duplicates(records) -> list[EvalRecord]:
    """Collapse repeated configs to one record carrying the mean P."""
    groups: dict = {}
    for r in records:
        groups.setdefault(r.config, []).append(r)
    merged = []
    for config, rs in groups.items():
        if len(rs) == 1:
            merged.append(rs[0])
            continue
        first = rs[0]
        merged.append(
            EvalRecord(
                config,
                float(np.mean([r.P for r in rs])),
                first.M,
                first.seed,
                min(r.iteration for r in rs),
                first.breakdown,
                all(r.failed for r in rs),
                first.source,
            )
        )
    return merged


def frontier(records, generation: int = 0) -> ParetoFront:
    """Non-dominated records via one sort and a running-max sweep.

    Records sharing an identical (M, P) point are represented once, by the
    lexicographically smallest config.
    """
    records = merge_duplicates(records)
    if not records:
        raise ValueError("frontier of an empty record set")
    ordered = sorted(records, key=lambda r: (r.M, -r.P, r.config))
    members = []
    best = -np.inf
    for r in ordered:
        if r.P > best:
            members.append(r)
            best = r.P
    return ParetoFront(members, generation)


def objective(record: EvalRecord, lam: float, m_range) -> float:
    lo, hi = m_range
    m_norm = (record.M - lo) / (hi - lo) if hi > lo else 0.0
    return m_norm - lam * record.P


def select(front: ParetoFront, lam: float = 1.0, m_range=None) -> EvalRecord:
    """Minimize ``M_norm - lam * P`` over the frontier.

    ``m_range`` is the (all-4-bit, all-8-bit) byte pair used to normalize
    memory; without it the frontier's own span is used.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    members = list(front)
    if not members:
        raise ValueError("cannot select from an empty frontier")
    if m_range is None:
        m_range = (min(r.M for r in members), max(r.M for r in members))
    return min(members, key=lambda r: (objective(r, lam, m_range), r.M, r.config))


def stabilized(history, S: int = 5) -> bool:
    if S < 1:
        raise ValueError("S must be >= 1")
    if len(history) < S + 1:
        return False
    tail = [f.configs for f in history[-(S + 1) :]]
    return all(t == tail[0] for t in tail)


def frontier_csv(front: ParetoFront, lam: float, m_range) -> str:
    lo, hi = m_range
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "config", "P", "M_bytes", "M_norm", "objective"])
    for r in front:
        m_norm = (r.M - lo) / (hi - lo) if hi > lo else 0.0
        writer.writerow([r.iteration, r.bits, repr(r.P), r.M, repr(m_norm), repr(objective(r, lam, m_range))])
    return buf.getvalue()


def read_frontier_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
