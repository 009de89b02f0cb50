"""Frozen reference configurations used by the behavioural checks and the CLI demos.

Each builder is a plain top-level function of the seed so it can be shipped to
worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import compare_suite, pretrain_base, run_one
from .data import Dataset, gen_layer_concentrated_task, gen_mixture_task
from .network import Model, init_model
from .rank_adapt import RankSchedule
from .trainer import RunRecord, TrainConfig


@dataclass(frozen=True)
class LossCurveRef:
    n: int = 200
    d: int = 8
    n_classes: int = 3
    difficulty: float = 0.0
    hidden: tuple = (16, 16, 16)
    epochs: int = 50


@dataclass(frozen=True)
class SuiteRef:
    n: int = 1000
    d: int = 8
    n_classes: int = 4
    difficulty: float = 0.5
    hidden: tuple = (16, 16)
    epochs: int = 40
    pretrain_epochs: int = 20
    pretrain_n: int = 1000
    tags: tuple = ("full", "feature_extraction", "lora_static", "lora_dynamic")
    seeds: tuple = tuple(range(10))


@dataclass(frozen=True)
class LayerTaskRef:
    dims: tuple = (8, 8, 8, 8)
    n_classes: int = 3
    perturb_rank: int = 2
    magnitude: float = 1.0
    kind: str = "random"
    n: int = 600
    epochs: int = 40
    seeds: tuple = tuple(range(10))

    def perturbed_layer(self, seed: int) -> int:
        return seed % (len(self.dims) - 1)


LOSS_CURVE = LossCurveRef()
SUITE = SuiteRef()
LAYER_TASK = LayerTaskRef()


def loss_curve_run(seed: int = 0, ref: LossCurveRef = LOSS_CURVE) -> RunRecord:
    """Dynamic LoRA on a well-separated mixture with default hyperparameters."""
    ds = gen_mixture_task(ref.n, ref.d, ref.n_classes, ref.difficulty, seed)
    base = init_model([ref.d, *ref.hidden], ref.n_classes, seed)
    cfg = TrainConfig(epochs=ref.epochs, schedule=RankSchedule(), seed=seed)
    return run_one(ds, base, "lora_dynamic", cfg, seed)


def suite_task(seed: int, ref: SuiteRef = SUITE) -> tuple[Dataset, Model]:
    """Target mixture plus a base body pretrained on a related source mixture."""
    base = init_model([ref.d, *ref.hidden], ref.n_classes, seed + 1000)
    source = gen_mixture_task(ref.pretrain_n, ref.d, ref.n_classes, ref.difficulty, seed + 5000)
    base = pretrain_base(base, source, TrainConfig(epochs=ref.pretrain_epochs, seed=seed + 5000))
    return gen_mixture_task(ref.n, ref.d, ref.n_classes, ref.difficulty, seed), base


def run_suite(ref: SuiteRef = SUITE, jobs: int = 1):
    cfg = TrainConfig(epochs=ref.epochs, schedule=RankSchedule())
    return compare_suite(suite_task, list(ref.tags), cfg, list(ref.seeds), jobs=jobs)


@dataclass
class LayerRecovery:
    seed: int
    perturbed_layer: int
    mean_alpha: list[float]
    recovered: bool
    record: RunRecord = field(repr=False)


def layer_task(seed: int, ref: LayerTaskRef = LAYER_TASK) -> tuple[Dataset, Model]:
    base = init_model(list(ref.dims), ref.n_classes, seed)
    ds = gen_layer_concentrated_task(base, ref.perturbed_layer(seed), ref.perturb_rank, ref.n, seed,
                                     magnitude=ref.magnitude, kind=ref.kind)
    return ds, base


def layer_recovery(seed: int, ref: LayerTaskRef = LAYER_TASK) -> LayerRecovery:
    """Train dynamic LoRA and check whether the late-run α peaks at the perturbed layer."""
    ds, base = layer_task(seed, ref)
    cfg = TrainConfig(epochs=ref.epochs, schedule=RankSchedule(), seed=seed)
    rec = run_one(ds, base, "lora_dynamic", cfg, seed)
    k = max(1, ref.epochs // 4)
    mean_alpha = np.mean(rec.alpha[-k:], axis=0)
    p = ref.perturbed_layer(seed)
    return LayerRecovery(seed, p, mean_alpha.tolist(), int(np.argmax(mean_alpha)) == p, rec)
