"""Glue from a run configuration to a pruned base model and its task."""

from __future__ import annotations

from .config import RunConfig
from .nn import build_model
from .pruner import NeuronGraph, discover_groups, prune, rank_groups
from .workbench import TrainHyper, make_task, train_full


def task_from_config(cfg: RunConfig):
    t = cfg.raw["task"]
    return make_task(
        t["kind"],
        seed=cfg.seed,
        sizes=t["sizes"],
        n_features=cfg.widths[0],
        n_outputs=cfg.widths[-1],
        separation=t["separation"],
        noise=t["noise"],
    )


def prepare(widths, activation, task, rate, order="element1", seed=0, hyper=None):
    """Pretrain a seeded MLP on ``task``, rank its groups and prune to ``rate``.

    Returns ``(pruned, ranked_groups, base_model)``.
    """
    hyper = hyper or TrainHyper(seed=seed)
    base, _ = train_full(build_model(widths, activation, seed), task, hyper)
    groups = discover_groups(NeuronGraph.from_model(base))
    ranked = rank_groups(groups, base, (task.X_train, task.y_train, task.loss), order)
    return prune(base, ranked, rate), ranked, base


def prepare_from_config(cfg: RunConfig):
    task = task_from_config(cfg)
    m, tr = cfg.raw["model"], cfg.raw["train"]
    hyper = TrainHyper(epochs=m["pretrain_epochs"], lr=tr["lr"], batch_size=tr["batch_size"], seed=cfg.seed)
    pruned, ranked, base = prepare(
        cfg.widths, m["activation"], task, cfg.raw["prune"]["rate"], cfg.raw["prune"]["order"], cfg.seed, hyper
    )
    return pruned, ranked, base, task
