"""Strategy installation and the multi-strategy comparison harness."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, DynLoraError
from .lora import init_adapter
from .network import BottleneckAdapter, Model, init_model
from .rank_adapt import RankSchedule
from .trainer import STRATEGIES, RunRecord, TrainConfig, train

__all__ = ["BottleneckAdapter", "ComparisonRow", "ComparisonTable", "RunFailure", "apply_strategy",
           "compare", "compare_suite", "default_bottleneck_width", "run_one"]

COLUMNS = ("strategy", "acc", "auc", "f1", "recall", "param_ratio", "train_seconds")


class RunFailure(DynLoraError):
    def __init__(self, tag: str, seed: int, cause: BaseException):
        self.tag, self.seed, self.cause = tag, seed, cause
        super().__init__(f"run strategy={tag} seed={seed} failed: {cause!r}")


def default_bottleneck_width(d: int) -> int:
    return max(1, math.ceil(d / 4))


def _adapter_seed(seed: int, layer: int) -> int:
    return int(np.random.SeedSequence([seed, 7, layer]).generate_state(1)[0])


def apply_strategy(model: Model, tag: str, cfg: TrainConfig) -> Model:
    """Return a copy of ``model`` with the strategy's structures installed."""
    if tag not in STRATEGIES:
        raise ConfigError(f"unknown strategy {tag!r}; expected one of {', '.join(STRATEGIES)}", "strategy")
    if cfg.schedule is not None and tag != "lora_dynamic":
        raise ConfigError(f"a rank schedule only applies to lora_dynamic, not {tag}", "schedule")
    if model.strategy != "base":
        raise ConfigError(f"model already has strategy {model.strategy!r} applied", "strategy")
    m = model.copy()
    m.strategy = tag
    if tag == "lora_static":
        m.adapters = [init_adapter(s.d_in, s.d_out, min(cfg.rank, s.d_in, s.d_out), _adapter_seed(cfg.seed, l))
                      for l, s in enumerate(m.layers)]
    elif tag == "lora_dynamic":
        sched = cfg.schedule or RankSchedule(r_base=cfg.rank)
        m.adapters = [init_adapter(s.d_in, s.d_out, min(sched.r_base, s.d_in, s.d_out), _adapter_seed(cfg.seed, l))
                      for l, s in enumerate(m.layers)]
        alpha0 = 1.0 / len(m.layers) if sched.allocate_alpha else 1.0
        for ad in m.adapters:
            ad.alpha = alpha0
    elif tag == "adapter":
        rng = np.random.default_rng(_adapter_seed(cfg.seed, 10_000))
        m.bottlenecks = []
        for s in m.layers:
            width = cfg.bottleneck_width or default_bottleneck_width(s.d_out)
            down = rng.normal(0.0, 1.0 / math.sqrt(s.d_out), size=(s.d_out, width))
            m.bottlenecks.append(BottleneckAdapter(down=down, up=np.zeros((width, s.d_out))))
    return m


def config_for(tag: str, cfg: TrainConfig, seed: int | None = None) -> TrainConfig:
    """Per-strategy copy of ``cfg``: the schedule is kept only for lora_dynamic."""
    sched = cfg.schedule
    if tag == "lora_dynamic":
        sched = dataclasses.replace(sched) if sched is not None else RankSchedule(r_base=cfg.rank)
    else:
        sched = None
    return dataclasses.replace(cfg, strategy=tag, schedule=sched, seed=cfg.seed if seed is None else seed)


def run_one(dataset: Dataset, base: Model, tag: str, cfg: TrainConfig, seed: int) -> RunRecord:
    run_cfg = config_for(tag, cfg, seed)
    try:
        model = apply_strategy(base, tag, run_cfg)
        return train(model, dataset, run_cfg)
    except Exception as exc:
        raise RunFailure(tag, seed, exc) from exc


@dataclass
class ComparisonRow:
    strategy: str
    acc: float
    auc: float
    f1: float
    recall: float
    param_ratio: float
    train_seconds: float
    sd: dict = field(default_factory=dict)
    n_runs: int = 0
    max_param_ratio: float = 0.0

    def csv_values(self) -> list:
        return [getattr(self, c) for c in COLUMNS]


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    runs: list[RunRecord]

    def sorted_rows(self) -> list[ComparisonRow]:
        return sorted(self.rows, key=lambda r: (-r.acc, r.strategy))

    def to_csv(self) -> str:
        lines = [",".join(COLUMNS)]
        for r in self.sorted_rows():
            lines.append(",".join([r.strategy] + [repr(float(v)) for v in r.csv_values()[1:]]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = f"{'strategy':<20}{'acc':>16}{'auc':>16}{'f1':>16}{'recall':>16}{'param_ratio':>13}{'train_s':>10}"
        out = [head, "-" * len(head)]
        for r in self.sorted_rows():
            cells = [f"{100 * getattr(r, k):7.2f}±{100 * r.sd.get(k, 0.0):5.2f}".rjust(16) for k in ("acc", "auc", "f1", "recall")]
            out.append(f"{r.strategy:<20}{''.join(cells)}{100 * r.param_ratio:12.3f}%{r.train_seconds:10.2f}")
        out.append("metrics in percent (mean±sd over seeds); F1, recall and AUC are macro-averaged, AUC one-vs-rest")
        return "\n".join(out) + "\n"


def aggregate(tags: Sequence[str], runs: Sequence[RunRecord]) -> ComparisonTable:
    rows = []
    for tag in tags:
        mine = [r for r in runs if r.strategy == tag]
        if not mine:
            continue
        vals = {
            "acc": [r.test["accuracy"] for r in mine],
            "auc": [r.test["auc"] for r in mine],
            "f1": [r.test["f1_macro"] for r in mine],
            "recall": [r.test["recall_macro"] for r in mine],
        }
        rows.append(ComparisonRow(
            strategy=tag,
            **{k: float(np.mean(v)) for k, v in vals.items()},
            param_ratio=float(np.mean([r.param_ratio for r in mine])),
            train_seconds=float(np.mean([r.wall_time for r in mine])),
            sd={k: float(np.std(v)) for k, v in vals.items()},
            n_runs=len(mine),
            max_param_ratio=float(max(r.max_param_ratio for r in mine)),
        ))
    return ComparisonTable(rows=rows, runs=list(runs))


def _check_tags(tags: Sequence[str], seeds: Sequence[int]) -> None:
    if not seeds:
        raise ConfigError("at least one seed is required", "seeds")
    for t in tags:
        if t not in STRATEGIES:
            raise ConfigError(f"unknown strategy {t!r}", "strategies")


def _map(fn, jobs: list[tuple], n_workers: int) -> list:
    if n_workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def compare(dataset: Dataset, tags: Sequence[str], cfg: TrainConfig, seeds: Sequence[int],
            dims: Sequence[int] | None = None, base: Model | None = None, jobs: int = 1) -> ComparisonTable:
    """Train every (tag, seed) pair on one dataset and aggregate test metrics.

    Without an explicit ``base`` each seed gets a fresh random base built from
    ``dims`` with that seed.
    """
    _check_tags(tags, seeds)
    if base is None and dims is None:
        raise ConfigError("compare needs either a base model or dims", "model.dims")
    work = []
    for seed in seeds:
        b = base if base is not None else init_model(list(dims), dataset.n_classes, seed)
        work.extend((dataset, b, tag, cfg, seed) for tag in tags)
    return aggregate(tags, _map(run_one, work, jobs))


def _suite_runs(make_task: Callable[[int], tuple[Dataset, Model]], tags: Sequence[str], cfg: TrainConfig, seed: int) -> list[RunRecord]:
    dataset, base = make_task(seed)
    return [run_one(dataset, base, tag, cfg, seed) for tag in tags]


def compare_suite(make_task: Callable[[int], tuple[Dataset, Model]], tags: Sequence[str], cfg: TrainConfig,
                  seeds: Sequence[int], jobs: int = 1) -> ComparisonTable:
    """Like :func:`compare` but each seed draws its own ``(dataset, base)``."""
    _check_tags(tags, seeds)
    per_seed = _map(_suite_runs, [(make_task, tags, cfg, s) for s in seeds], jobs)
    return aggregate(tags, [r for runs in per_seed for r in runs])


def pretrain_base(base: Model, source: Dataset, cfg: TrainConfig) -> Model:
    """Fully train ``base`` on a source task and return it as a fresh frozen base.

    The head is re-drawn afterwards (seeded by ``cfg.seed``) so the target
    task starts from pretrained body features only.
    """
    run_cfg = dataclasses.replace(cfg, strategy="full", schedule=None)
    model = apply_strategy(base, "full", run_cfg)
    train(model, source, run_cfg)
    fresh = init_model(model.dims, base.n_classes, cfg.seed)
    model.head = fresh.head
    model.strategy = "base"
    return model
