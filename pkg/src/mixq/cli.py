"""``mixq prune|tune|search|report`` command-line entry point."""

from __future__ import annotations

import json
import logging
import os
import shutil
import sys
import tempfile

import click

from .autoloop import TrainingEvaluator, run_search
from .config import SCHEMA_VERSION, ConfigError, RunConfig
from .costmodel import CostModel
from .pareto import EvalRecord, frontier, frontier_csv, objective, parse_bits, select
from .pipeline import prepare_from_config, task_from_config
from .pruner import PrunedModel

EXIT_SCHEMA = 2
EXIT_RATE = 3
EXIT_BITS = 4
EXIT_RESUME = 5
EXIT_LOG = 6

PRUNED_DIR = "pruned"
TUNE_LOG = "tune.jsonl"
SEARCH_LOG = "search.jsonl"

log = logging.getLogger("mixq")


def atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _load_config(path, seed, out) -> RunConfig:
    try:
        return RunConfig.load(path, seed=seed, output=out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_SCHEMA)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MIXQ_WORKERS", "1")))
    except ValueError:
        return 1


def _save_pruned(pruned: PrunedModel, target: str) -> None:
    parent = os.path.dirname(os.path.abspath(target))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".tmp-pruned-")
    try:
        pruned.save(tmp)
        if os.path.exists(target):
            shutil.rmtree(target)
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _pruned_for(cfg: RunConfig) -> PrunedModel:
    path = os.path.join(cfg.output, PRUNED_DIR)
    if os.path.exists(os.path.join(path, "manifest.json")):
        return PrunedModel.load(path)
    pruned, _, _, _ = prepare_from_config(cfg)
    _save_pruned(pruned, path)
    return pruned


def _log_line(cfg: RunConfig, cost: CostModel, record: EvalRecord, **extra) -> dict:
    line = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "L": cost.L,
        "master_seed": cfg.seed,
        "m_min": cost.m_min,
        "m_max": cost.m_max,
    }
    line.update(record.to_dict())
    line.update(extra)
    return line


def read_log(path) -> list[dict]:
    """Parse a JSON-lines run log; raises ValueError on any malformed line."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    out = []
    for n, ln in enumerate(lines, 1):
        try:
            entry = json.loads(ln)
            EvalRecord.from_dict(entry)
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"line {n}: {exc}") from exc
        out.append(entry)
    return out


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Mixed-precision LoRA workbench."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


@main.command("prune")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def cmd_prune(config_path, seed, out):
    """Pretrain, rank dependency groups and write the pruned model."""
    cfg = _load_config(config_path, seed, out)
    pruned, ranked, base, _ = prepare_from_config(cfg)
    click.echo(f"{'group':>6} {'size':>6} {'importance':>14}")
    for i, g in enumerate(ranked):
        click.echo(f"{i:>6} {g.n_params(base.widths):>6} {g.importance:>14.6e}")
    click.echo(
        f"widths {list(base.widths)} -> {list(pruned.widths)}; "
        f"removed fraction {pruned.achieved_rate:.4f} (target {pruned.target_rate})"
    )
    if not pruned.rate_reached:
        click.echo("prune rate unreachable under the one-unit-per-layer floor", err=True)
        sys.exit(EXIT_RATE)
    _save_pruned(pruned, os.path.join(cfg.output, PRUNED_DIR))


@main.command("tune")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--bits", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def cmd_tune(config_path, bits, seed, out):
    """Fine-tune one bit-width configuration and append it to the log."""
    cfg = _load_config(config_path, seed, out)
    try:
        q = parse_bits(bits)
    except ValueError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_BITS)
    if len(q) != cfg.L:
        click.echo(f"--bits has {len(q)} entries but the model has {cfg.L} layers", err=True)
        sys.exit(EXIT_BITS)
    pruned = _pruned_for(cfg)
    task = task_from_config(cfg)
    plan = cfg.plan()
    evaluator = TrainingEvaluator(pruned, task, plan)
    record = evaluator(q)
    path = os.path.join(cfg.output, TUNE_LOG)
    duplicate = False
    if os.path.exists(path):
        try:
            prior = read_log(path)
        except ValueError:
            prior = []
        duplicate = any(e["config"] == record.bits and e["seed"] == record.seed for e in prior)
    line = _log_line(cfg, evaluator.cost, record, duplicate=duplicate)
    with open(path, "a") as fh:
        fh.write(_dumps(line) + "\n")
    click.echo(f"config {record.bits}  P={record.P:.6f}  M={record.M} bytes" + ("  (duplicate)" if duplicate else ""))
    for key, value in record.breakdown.items():
        click.echo(f"  {key:>16}: {value}")


def _resume_records(path, cfg: RunConfig, L: int) -> dict:
    with open(path) as fh:
        lines = fh.read().splitlines(keepends=True)
    entries = []
    for n, raw in enumerate(lines):
        try:
            entries.append(json.loads(raw))
        except ValueError:
            if n == len(lines) - 1:
                # torn final write from an interrupted run
                with open(path, "w") as fh:
                    fh.writelines(lines[:-1])
                break
            raise
    replay = {}
    for e in entries:
        if e.get("L") != L or e.get("master_seed") != cfg.seed or e.get("config_hash") != cfg.config_hash():
            raise ValueError("existing log was produced by a different configuration")
        rec = EvalRecord.from_dict(e)
        replay[rec.config] = rec
    return replay


@main.command("search")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--lambda", "lam", type=float, default=None, help="Override plan.lambda.")
@click.option("--resume", is_flag=True, help="Replay records from an existing log.")
def cmd_search(config_path, seed, out, lam, resume):
    """Run the surrogate-guided search and write log, frontier and summary."""
    cfg = _load_config(config_path, seed, out)
    if lam is not None:
        cfg.raw["plan"]["lambda"] = lam
    pruned = _pruned_for(cfg)
    task = task_from_config(cfg)
    plan = cfg.plan()
    cost = CostModel(pruned, plan.rank, plan.block_size, plan.kinds)
    path = os.path.join(cfg.output, SEARCH_LOG)
    replay = {}
    if resume and os.path.exists(path):
        try:
            replay = _resume_records(path, cfg, cost.L)
        except (ValueError, KeyError, TypeError) as exc:
            click.echo(f"cannot resume: {exc}", err=True)
            sys.exit(EXIT_RESUME)
    os.makedirs(cfg.output, exist_ok=True)
    mode = "a" if replay else "w"
    with open(path, mode) as fh:

        def on_record(record, replayed):
            if not replayed:
                fh.write(_dumps(_log_line(cfg, cost, record)) + "\n")
                fh.flush()

        result = run_search(pruned, task, plan, replay=replay, on_record=on_record, workers=_workers())
    m_range = result.m_range
    atomic_write(os.path.join(cfg.output, "frontier.csv"), frontier_csv(result.front, plan.lam, m_range))
    summary = result.summary()
    summary.update(config_hash=cfg.config_hash(), lam=plan.lam, seed=cfg.seed)
    atomic_write(os.path.join(cfg.output, "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    # wall-clock timings are kept apart so the logs above stay reproducible
    atomic_write(os.path.join(cfg.output, "timings.json"), json.dumps(result.audit, indent=2) + "\n")
    click.echo(
        f"selected {summary['selected']}  P={summary['P']:.6f}  M={summary['M']}  "
        f"stop={summary['stop_reason']}  iterations={summary['iterations']}"
    )


def report_rows(entries, lam: float):
    records = [EvalRecord.from_dict(e) for e in entries]
    m_range = (entries[0]["m_min"], entries[0]["m_max"])
    front = frontier(records)
    chosen = select(front, lam, m_range)
    front_configs = front.configs
    rows = []
    for r in records:
        lo, hi = m_range
        m_norm = (r.M - lo) / (hi - lo) if hi > lo else 0.0
        rows.append(
            {
                "config": r.bits,
                "P": r.P,
                "M_bytes": r.M,
                "M_norm": m_norm,
                "objective": objective(r, lam, m_range),
                "frontier": int(r.config in front_configs),
                "selected": int(r.config == chosen.config),
            }
        )
    return rows, chosen


@main.command("report")
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--lambda", "lam", type=float, default=1.0)
@click.option("--out", type=click.Path(), default=None)
def cmd_report(log_path, lam, out):
    """Scatter data with frontier flags and the lambda-selected config."""
    try:
        entries = read_log(log_path)
        if not entries:
            raise ValueError("log is empty")
        rows, chosen = report_rows(entries, lam)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        click.echo(f"bad log: {exc}", err=True)
        sys.exit(EXIT_LOG)
    out = out or os.path.dirname(os.path.abspath(log_path))
    header = ["config", "P", "M_bytes", "M_norm", "objective", "frontier", "selected"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(row[h]) if isinstance(row[h], float) else str(row[h]) for h in header))
    atomic_write(os.path.join(out, "report.csv"), "\n".join(lines) + "\n")
    n_front = sum(r["frontier"] for r in rows)
    text = (
        f"records: {len(rows)}\n"
        f"frontier: {n_front}\n"
        f"lambda: {lam}\n"
        f"selected: {chosen.bits} P={chosen.P:.6f} M={chosen.M}\n"
    )
    atomic_write(os.path.join(out, "report.txt"), text)
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
