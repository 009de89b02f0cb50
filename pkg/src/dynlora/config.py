"""Declarative run configuration: strict JSON parsing with field-path errors."""

from __future__ import annotations

import copy
import dataclasses
import itertools
import json
import os
from dataclasses import dataclass
from typing import Any

from .data import PERTURB_KINDS
from .errors import ConfigError, ContractError
from .rank_adapt import RankSchedule
from .trainer import STRATEGIES, TrainConfig

SWEEP_KEYS = ("r_base", "lambda_adjust", "lambda1", "lambda2", "refresh_every")
SCHEDULE_SWEEP_KEYS = ("r_base", "lambda_adjust", "refresh_every")
DEFAULT_SWEEP_CAP = 64

_NUM = (int, float)

# field -> (accepted types, default); None default with "required" marks required keys
_TRAIN_FIELDS = {
    "epochs": (int, 50),
    "batch_size": (int, 16),
    "learning_rate": (_NUM, 0.05),
    "momentum": (_NUM, 0.9),
    "lambda1": (_NUM, 1e-4),
    "lambda2": (_NUM, 1e-4),
    "rank": (int, 4),
    "bottleneck_width": ((int, type(None)), None),
}
_SCHEDULE_FIELDS = {
    "r_base": (int, 4),
    "lambda_adjust": (_NUM, 0.5),
    "r_max_per_layer": (list, []),
    "refresh_every": (int, 1),
    "hysteresis": (int, 1),
    "allocate_alpha": (bool, True),
}
_MODEL_FIELDS = {"hidden": (list, [16, 16])}
_PRETRAIN_FIELDS = {"epochs": (int, 20), "n": (int, 1000), "seed_offset": (int, 5000)}
_DATA_FIELDS = {
    "mixture": {"n": (int, 400), "d": (int, 8), "n_classes": (int, 3), "difficulty": (_NUM, 0.3),
                "seed": ((int, type(None)), None)},
    "layer_concentrated": {"n": (int, 600), "n_classes": (int, 3), "perturbed_layer": (int, 0),
                           "perturb_rank": (int, 2), "magnitude": (_NUM, 1.0), "perturbation": (str, "random"),
                           "seed": ((int, type(None)), None)},
    "csv": {"path": (str, "required"), "n_classes": (int, "required"), "seed": ((int, type(None)), None)},
}
_SWEEP_FIELDS = {"grid": (dict, "required"), "max_points": (int, DEFAULT_SWEEP_CAP), "strategy": (str, "lora_dynamic")}
_TOP_FIELDS = ("model", "data", "train", "schedule", "strategy", "strategies", "seed", "seeds", "output",
               "pretrain", "sweep", "jobs")


def _type_ok(v: Any, types) -> bool:
    if isinstance(v, bool) and types is not bool and not (isinstance(types, tuple) and bool in types):
        return False
    return isinstance(v, types)


def _section(doc: Any, fields: dict, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("expected a JSON object", path)
    for k in doc:
        if k not in fields:
            raise ConfigError(f"unknown key; expected one of {', '.join(fields)}", f"{path}.{k}")
    out = {}
    for k, (types, default) in fields.items():
        where = f"{path}.{k}"
        if k not in doc:
            if isinstance(default, str) and default == "required":
                raise ConfigError("required key is missing", where)
            out[k] = copy.deepcopy(default)
            continue
        v = doc[k]
        if not _type_ok(v, types):
            raise ConfigError(f"wrong type {type(v).__name__}", where)
        out[k] = float(v) if types is _NUM else v
    return out


def _int_list(v: list, path: str, min_len: int = 0) -> list[int]:
    if len(v) < min_len or not all(_type_ok(x, int) and x >= 1 for x in v):
        raise ConfigError(f"expected a list of positive integers (at least {min_len})", path)
    return list(v)


@dataclass
class RunConfig:
    """Fully resolved configuration. ``to_dict`` round-trips through ``parse_config``."""

    model: dict
    data: dict
    train: dict
    schedule: dict | None
    strategy: str
    strategies: list[str]
    seed: int
    seeds: list[int]
    output: str
    pretrain: dict | None
    sweep: dict | None
    jobs: int

    def to_dict(self) -> dict:
        return copy.deepcopy(dataclasses.asdict(self))

    def data_seed(self, seed: int) -> int:
        s = self.data.get("seed")
        return seed if s is None else s

    def schedule_obj(self) -> RankSchedule:
        return RankSchedule(**(self.schedule or {}))

    def train_config(self, strategy: str | None = None, seed: int | None = None,
                     overrides: dict | None = None) -> TrainConfig:
        tag = strategy or self.strategy
        fields = dict(self.train)
        sched = dict(self.schedule or _defaults(_SCHEDULE_FIELDS))
        for k, v in (overrides or {}).items():
            (sched if k in SCHEDULE_SWEEP_KEYS else fields)[k] = v
        try:
            return TrainConfig(**fields, strategy=tag, seed=self.seed if seed is None else seed,
                               schedule=RankSchedule(**sched) if tag == "lora_dynamic" else None)
        except ContractError as exc:
            raise ConfigError(str(exc), "train") from None

    def sweep_points(self) -> list[dict]:
        grid = self.sweep["grid"]
        keys = [k for k in SWEEP_KEYS if k in grid]
        return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _defaults(fields: dict) -> dict:
    return {k: copy.deepcopy(d) for k, (_, d) in fields.items()}


def parse_config(doc: Any) -> RunConfig:
    """Validate a decoded JSON document and resolve every default."""
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", "$")
    for k in doc:
        if k not in _TOP_FIELDS:
            raise ConfigError(f"unknown key; expected one of {', '.join(_TOP_FIELDS)}", k)

    model = _section(doc.get("model", {}), _MODEL_FIELDS, "model")
    model["hidden"] = _int_list(model["hidden"], "model.hidden", min_len=1)

    data_doc = doc.get("data", {"kind": "mixture"})
    if not isinstance(data_doc, dict):
        raise ConfigError("expected a JSON object", "data")
    kind = data_doc.get("kind", "mixture")
    if kind not in _DATA_FIELDS:
        raise ConfigError(f"unknown data kind {kind!r}; expected one of {', '.join(_DATA_FIELDS)}", "data.kind")
    data = _section({k: v for k, v in data_doc.items() if k != "kind"}, _DATA_FIELDS[kind], "data")
    data = {"kind": kind, **data}
    if kind == "layer_concentrated" and data["perturbation"] not in PERTURB_KINDS:
        raise ConfigError(f"expected one of {', '.join(PERTURB_KINDS)}", "data.perturbation")
    for k in ("n", "d", "n_classes", "perturb_rank"):
        if k in data and data[k] < 1:
            raise ConfigError("must be positive", f"data.{k}")
    if "difficulty" in data and not 0.0 <= data["difficulty"] <= 1.0:
        raise ConfigError("must lie in [0, 1]", "data.difficulty")

    train = _section(doc.get("train", {}), _TRAIN_FIELDS, "train")
    schedule = None
    if doc.get("schedule") is not None:
        schedule = _section(doc["schedule"], _SCHEDULE_FIELDS, "schedule")
        schedule["r_max_per_layer"] = _int_list(schedule["r_max_per_layer"], "schedule.r_max_per_layer")

    strategy = doc.get("strategy", "lora_dynamic")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}", "strategy")
    strategies = doc.get("strategies", list(STRATEGIES))
    if not isinstance(strategies, list):
        raise ConfigError("expected a list", "strategies")
    for i, t in enumerate(strategies):
        if t not in STRATEGIES:
            raise ConfigError(f"unknown strategy {t!r}; expected one of {', '.join(STRATEGIES)}", f"strategies[{i}]")
    if len(set(strategies)) != len(strategies):
        raise ConfigError("duplicate strategy", "strategies")

    seed = doc.get("seed", 0)
    if not _type_ok(seed, int):
        raise ConfigError("expected an integer", "seed")
    seeds = doc.get("seeds", [seed])
    if not isinstance(seeds, list) or not seeds or not all(_type_ok(s, int) for s in seeds):
        raise ConfigError("expected a non-empty list of integers", "seeds")
    output = doc.get("output", "runs")
    if not isinstance(output, str):
        raise ConfigError("expected a string", "output")
    jobs = doc.get("jobs", 1)
    if not _type_ok(jobs, int) or jobs < 1:
        raise ConfigError("expected a positive integer", "jobs")

    pretrain = None
    if doc.get("pretrain") is not None:
        if kind != "mixture":
            raise ConfigError("pretraining is only defined for mixture data", "pretrain")
        pretrain = _section(doc["pretrain"], _PRETRAIN_FIELDS, "pretrain")

    sweep = None
    if doc.get("sweep") is not None:
        sweep = _section(doc["sweep"], _SWEEP_FIELDS, "sweep")
        grid = sweep["grid"]
        if not grid:
            raise ConfigError("grid must not be empty", "sweep.grid")
        for k, vals in grid.items():
            if k not in SWEEP_KEYS:
                raise ConfigError(f"unknown grid key; expected one of {', '.join(SWEEP_KEYS)}", f"sweep.grid.{k}")
            if not isinstance(vals, list) or not vals or not all(_type_ok(v, _NUM) for v in vals):
                raise ConfigError("expected a non-empty list of numbers", f"sweep.grid.{k}")
            if k in ("r_base", "refresh_every") and not all(_type_ok(v, int) and v >= 1 for v in vals):
                raise ConfigError("expected positive integers", f"sweep.grid.{k}")
        if sweep["strategy"] not in STRATEGIES:
            raise ConfigError(f"unknown strategy {sweep['strategy']!r}", "sweep.strategy")
        if sweep["strategy"] != "lora_dynamic" and any(k in SCHEDULE_SWEEP_KEYS for k in grid):
            raise ConfigError("rank-schedule grid keys need strategy lora_dynamic", "sweep.strategy")

    cfg = RunConfig(model=model, data=data, train=train, schedule=schedule, strategy=strategy,
                    strategies=strategies, seed=seed, seeds=seeds, output=output, pretrain=pretrain,
                    sweep=sweep, jobs=jobs)
    # surface TrainConfig / RankSchedule contract failures as config errors before compute
    if schedule is not None:
        try:
            RankSchedule(**schedule)
        except ContractError as exc:
            raise ConfigError(str(exc), "schedule") from None
    cfg.train_config()
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError("config file not found", str(path))
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", str(path)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(doc)
