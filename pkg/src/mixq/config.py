"""Run configuration: one JSON document, validated before any compute."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

from .autoloop import SearchPlan
from .pruner import ImportanceOrder
from .quantizer import CodebookKind
from .workbench import TaskKind, TrainHyper

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output": "runs/default",
    "model": {"widths": [16, 32, 32, 32, 16], "activation": "relu", "pretrain_epochs": 50},
    "task": {"kind": "blobs", "sizes": [512, 256, 256], "separation": 4.0, "noise": 0.05},
    "prune": {"rate": 0.2, "order": "element1"},
    "plan": {
        "init_count": 10,
        "max_iters": 40,
        "lambda": 1.0,
        "rank": 4,
        "T": 1,
        "S": 5,
        "init": "loftq",
        "refit": False,
    },
    "codec": {"block_size": 64, "kinds": {"4": "normalfloat", "8": "uniform"}},
    "train": {"epochs": 50, "lr": 3e-3, "batch_size": 32, "train_biases": False},
}


class ConfigError(ValueError):
    pass


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown key {where!r}")
        expected = defaults[key]
        if isinstance(expected, dict):
            out[key] = _merge(expected, value, where)
        elif isinstance(expected, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where} must be a boolean")
            out[key] = value
        elif isinstance(expected, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where} must be a number")
            if isinstance(expected, int) and not isinstance(expected, bool) and not float(value).is_integer():
                raise ConfigError(f"{where} must be an integer")
            out[key] = type(expected)(value)
        elif isinstance(expected, list):
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{where} must be a nonempty list")
            out[key] = value
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{where} must be a string")
            out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict, seed=None, output=None) -> "RunConfig":
        merged = _merge(DEFAULTS, data)
        if merged["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {merged['schema_version']}")
        if seed is not None:
            merged["seed"] = int(seed)
        if output is not None:
            merged["output"] = str(output)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, seed=None, output=None) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, seed=seed, output=output)

    def validate(self):
        m, t, p, c, tr = (self.raw[k] for k in ("model", "task", "prune", "codec", "train"))
        try:
            widths = [int(w) for w in m["widths"]]
            if len(widths) < 3 or min(widths) < 1:
                raise ConfigError("model.widths needs >= 3 positive entries")
            if m["activation"] not in ("relu", "tanh"):
                raise ConfigError("model.activation must be relu or tanh")
            TaskKind(t["kind"])
            if len(t["sizes"]) != 3 or min(int(s) for s in t["sizes"]) < 1:
                raise ConfigError("task.sizes must be three positive integers")
            if not 0.0 <= p["rate"] < 1.0:
                raise ConfigError("prune.rate must lie in [0, 1)")
            ImportanceOrder(p["order"])
            if set(c["kinds"]) != {"4", "8"}:
                raise ConfigError("codec.kinds must map exactly '4' and '8'")
            for bits, kind in c["kinds"].items():
                if CodebookKind.parse(kind) == CodebookKind.FP4 and bits != "4":
                    raise ConfigError("fp4 is only available at 4 bits")
            if c["block_size"] < 1 or tr["epochs"] < 1 or tr["batch_size"] < 1:
                raise ConfigError("block_size, epochs and batch_size must be positive")
            self.plan()
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output(self) -> str:
        return self.raw["output"]

    @property
    def widths(self) -> list[int]:
        return [int(w) for w in self.raw["model"]["widths"]]

    @property
    def L(self) -> int:
        return len(self.widths) - 1

    def kinds(self) -> dict:
        return {int(k): CodebookKind.parse(v) for k, v in self.raw["codec"]["kinds"].items()}

    def hyper(self, seed=None) -> TrainHyper:
        tr = self.raw["train"]
        return TrainHyper(
            epochs=tr["epochs"],
            lr=tr["lr"],
            batch_size=tr["batch_size"],
            train_biases=tr["train_biases"],
            seed=self.seed if seed is None else seed,
        )

    def plan(self) -> SearchPlan:
        p = self.raw["plan"]
        return SearchPlan(
            init_count=p["init_count"],
            max_iters=p["max_iters"],
            lam=p["lambda"],
            rank=p["rank"],
            T=p["T"],
            kinds=self.kinds(),
            S=p["S"],
            seed=self.seed,
            block_size=self.raw["codec"]["block_size"],
            init=p["init"],
            hyper=self.hyper(),
            refit=p["refit"],
        )

    def config_hash(self) -> str:
        """Digest of everything that affects results (the output path excluded)."""
        body = {k: v for k, v in self.raw.items() if k != "output"}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]
