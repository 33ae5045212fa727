"""The search loop: seed observations, then suggest, fine-tune, record, refit."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import surrogate
from .costmodel import CostModel
from .pareto import EvalRecord, ParetoFront, bit_string, frontier, objective, select, stabilized
from .workbench import DEFAULT_KINDS, AdapterInit, TrainHyper, assemble, train_adapters

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 4096


@dataclass(frozen=True)
class SearchPlan:
    init_count: int = 10
    max_iters: int = 40
    lam: float = 1.0
    rank: int = 4
    T: int = 1
    kinds: dict = field(default_factory=lambda: dict(DEFAULT_KINDS))
    S: int = 5
    seed: int = 0
    block_size: int = 64
    init: str = "loftq"
    hyper: TrainHyper = TrainHyper()
    refit: bool = False

    def __post_init__(self):
        if self.init_count < 1:
            raise ValueError("init_count must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.S < 1:
            raise ValueError("stabilization window must be >= 1")
        if self.T < 1 or self.rank < 0:
            raise ValueError("T must be >= 1 and rank >= 0")
        AdapterInit(self.init)


@dataclass
class SearchResult:
    records: list
    front: ParetoFront
    selected: EvalRecord
    audit: list
    stop_reason: str
    history: list
    m_range: tuple
    lam: float

    @property
    def iterations(self) -> int:
        return len(self.audit)

    def objective(self, record: EvalRecord) -> float:
        return objective(record, self.lam, self.m_range)

    def summary(self) -> dict:
        return {
            "selected": self.selected.bits,
            "P": self.selected.P,
            "M": self.selected.M,
            "objective": self.objective(self.selected),
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
            "records": len(self.records),
            "frontier": [r.bits for r in self.front],
        }


def config_seed(master_seed: int, config) -> int:
    """Training seed as a pure function of the master seed and the config."""
    code = int(bit_string(config).replace("4", "0").replace("8", "1"), 2)
    ss = np.random.SeedSequence([int(master_seed), len(config), code])
    return int(ss.generate_state(1)[0])


class TrainingEvaluator:
    """Assemble, fine-tune and score one configuration of a pruned model."""

    def __init__(self, pruned, task, plan: SearchPlan):
        self.pruned = pruned
        self.task = task
        self.plan = plan
        self.cost = CostModel(pruned, plan.rank, plan.block_size, plan.kinds)

    @property
    def L(self) -> int:
        return len(self.pruned.weights)

    def __call__(self, config, iteration: int = 0) -> EvalRecord:
        plan = self.plan
        seed = config_seed(plan.seed, config)
        breakdown = self.cost.memory(config)
        failed = False
        try:
            model = assemble(self.pruned, config, plan.rank, plan.init, plan.T, plan.kinds, plan.block_size, seed)
            P = train_adapters(model, self.task, replace(plan.hyper, seed=seed)).P
        except FloatingPointError as exc:
            log.warning("training failed for %s: %s", bit_string(config), exc)
            P, failed = 0.0, True
        return EvalRecord(config, P, breakdown.total, seed, iteration, breakdown.to_dict(), failed)


def _call(evaluator, config, iteration):
    return evaluator(config, iteration)


def _evaluate_batch(evaluator, configs, iteration, replay, workers):
    todo = [c for c in configs if c not in replay]
    fresh = {}
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {c: pool.submit(_call, evaluator, c, iteration) for c in todo}
            fresh = {c: f.result() for c, f in futures.items()}
    else:
        fresh = {c: evaluator(c, iteration) for c in todo}
    out = []
    for c in configs:
        if c in replay:
            out.append((replay[c], True))
        else:
            out.append((fresh[c], False))
    return out


def _initial_configs(L: int, count: int, rng: np.random.Generator) -> list[tuple]:
    if L <= 16:
        count = min(count, 2**L)
        codes = rng.choice(2**L, size=count, replace=False)
        return [tuple(8 if (int(c) >> (L - 1 - i)) & 1 else 4 for i in range(L)) for c in codes]
    seen, out = set(), []
    while len(out) < count:
        c = tuple(8 if b else 4 for b in rng.integers(0, 2, size=L))
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def run_search(
    pruned,
    task,
    plan: SearchPlan = SearchPlan(),
    evaluator=None,
    replay=None,
    on_record=None,
    workers: int = 1,
) -> SearchResult:
    """Bayesian search over per-layer bit-widths.

    ``evaluator(config, iteration) -> EvalRecord`` defaults to real
    fine-tuning.  ``replay`` maps configs to already-logged records that are
    reused instead of retrained; ``on_record(record, replayed)`` sees every
    record in order.
    """
    evaluator = evaluator or TrainingEvaluator(pruned, task, plan)
    cost = CostModel(pruned, plan.rank, plan.block_size, plan.kinds)
    L = cost.L
    replay = dict(replay or {})
    rng = np.random.default_rng(plan.seed)

    def emit(record, replayed):
        if on_record is not None:
            on_record(record, replayed)

    records = []
    for rec, replayed in _evaluate_batch(evaluator, _initial_configs(L, plan.init_count, rng), 0, replay, workers):
        records.append(rec)
        emit(rec, replayed)
    front = frontier(records, 0)
    history = [front]
    audit = []
    stop_reason = "init-only" if plan.max_iters == 0 else "max-iters"
    for it in range(1, plan.max_iters + 1):
        t0 = time.perf_counter()
        state = surrogate.fit(records, refit=plan.refit)
        candidates = surrogate.candidate_configs(L, rng, front.configs)
        try:
            q, ei = surrogate.suggest(state, candidates, plan.lam, cost, observed=records, return_score=True)
        except surrogate.SearchExhausted:
            stop_reason = "exhausted"
            break
        t1 = time.perf_counter()
        (rec, replayed), = _evaluate_batch(evaluator, [q], it, replay, 1)
        t2 = time.perf_counter()
        records.append(rec)
        emit(rec, replayed)
        front = frontier(records, it)
        history.append(front)
        audit.append(
            {
                "iteration": it,
                "suggested": bit_string(q),
                "ei": ei,
                "gp": state.hyperparams(),
                "P": rec.P,
                "M": rec.M,
                "suggest_seconds": t1 - t0,
                "evaluate_seconds": t2 - t1,
            }
        )
        if stabilized(history, plan.S):
            stop_reason = "stabilized"
            break
    if audit:
        audit[-1]["stop_reason"] = stop_reason
    m_range = (cost.m_min, cost.m_max)
    selected = select(front, plan.lam, m_range)
    return SearchResult(records, front, selected, audit, stop_reason, history, m_range, plan.lam)


def brute_force(pruned, task, plan: SearchPlan = SearchPlan(), evaluator=None, workers: int = 1) -> SearchResult:
    """Evaluate every configuration; the exact frontier and optimum."""
    cost = CostModel(pruned, plan.rank, plan.block_size, plan.kinds)
    L = cost.L
    if 2**L > BRUTE_FORCE_LIMIT:
        raise ValueError(f"2^{L} configurations exceed the brute-force limit of {BRUTE_FORCE_LIMIT}")
    evaluator = evaluator or TrainingEvaluator(pruned, task, plan)
    configs = surrogate.candidate_configs(L)
    records = [rec for rec, _ in _evaluate_batch(evaluator, configs, 0, {}, workers)]
    front = frontier(records, 0)
    m_range = (cost.m_min, cost.m_max)
    selected = select(front, plan.lam, m_range)
    return SearchResult(records, front, selected, [], "exhaustive", [front], m_range, plan.lam)
