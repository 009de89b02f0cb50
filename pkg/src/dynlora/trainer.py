"""Mini-batch SGD loop with the epoch-boundary importance/rank schedule."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ContractError
from .importance import layer_importance, refresh_importance
from .lora import LoraAdapter
from .metrics import evaluate
from .network import LORA_STRATEGIES, ForwardPass, Model, effective_weight, forward, forward_pass
from .rank_adapt import RankSchedule, update_ranks

log = logging.getLogger(__name__)

STRATEGIES = ("full", "feature_extraction", "adapter", "bitfit", "lora_static", "lora_dynamic")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    rank: int = 4
    bottleneck_width: int | None = None
    schedule: RankSchedule | None = None
    strategy: str = "lora_dynamic"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("regularization coefficients must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")


@dataclass
class RunRecord:
    strategy: str
    seed: int
    loss_total: list[float] = field(default_factory=list)
    loss_task: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    alpha: list[list[float]] = field(default_factory=list)
    gamma: list[list[float]] = field(default_factory=list)
    rank: list[list[int]] = field(default_factory=list)
    initial_task_loss: float = float("nan")
    initial_val_acc: float = float("nan")
    change_log: list[dict] = field(default_factory=list)
    test: dict = field(default_factory=dict)
    param_counts: dict = field(default_factory=dict)
    param_ratio: float = 0.0
    weight_ratio: float = 0.0
    max_param_ratio: float = 0.0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def alpha_trace_rows(self) -> list[tuple[int, int, float, float, int]]:
        """(epoch, layer, gamma, alpha, rank) per adapted layer per epoch."""
        rows = []
        for e, (gs, als, rs) in enumerate(zip(self.gamma, self.alpha, self.rank)):
            for l, (g, a, r) in enumerate(zip(gs, als, rs)):
                rows.append((e, l, g, a, r))
        return rows


def trainable_set(model: Model, strategy: str) -> list[str]:
    """Names of the parameters the strategy updates. The head is always included."""
    names = list(model.parameters())
    if strategy == "full":
        pick = [n for n in names if n.startswith("layers.")]
    elif strategy == "feature_extraction":
        pick = []
    elif strategy == "adapter":
        pick = [n for n in names if n.startswith("bottleneck.")]
    elif strategy == "bitfit":
        pick = [n for n in names if n.startswith("layers.") and n.endswith(".bias")]
    elif strategy in LORA_STRATEGIES:
        pick = [n for n in names if n.startswith("lora.")]
    else:
        raise ContractError(f"unknown strategy {strategy!r}")
    return pick + ["head.weight", "head.bias"]


def parameter_counts(model: Model, strategy: str | None = None) -> dict:
    """Trainable-parameter accounting relative to the frozen body.

    ``param_ratio`` divides trainable body parameters (everything except the
    head) by all base body parameters, weights and biases. ``weight_ratio``
    leaves biases out of both sides.
    """
    strategy = strategy or model.strategy
    params = model.parameters()
    chosen = set(trainable_set(model, strategy))
    body_total = sum(params[n].size for n in params if n.startswith("layers."))
    weight_total = sum(params[n].size for n in params if n.startswith("layers.") and n.endswith(".weight"))
    body = [n for n in chosen if not n.startswith("head.")]
    body_trainable = sum(params[n].size for n in body)
    weight_trainable = sum(params[n].size for n in body if not n.endswith(".bias"))
    head = params["head.weight"].size + params["head.bias"].size
    return {
        "body_total": body_total,
        "body_trainable": body_trainable,
        "weight_total": weight_total,
        "weight_trainable": weight_trainable,
        "head": head,
        "param_ratio": body_trainable / body_total,
        "weight_ratio": weight_trainable / weight_total,
    }


def task_loss(logits: T.Operand, labels: Sequence[int]) -> T.Operand:
    """Mean softmax cross-entropy."""
    return T.softmax_cross_entropy(logits, labels)


Factors = Union[LoraAdapter, tuple]


def total_loss(task: T.Operand, adapters: Sequence[Factors], lambda1: float, lambda2: float) -> T.Operand:
    """``task + λ1·Σ‖A‖²_F + λ2·Σ‖B‖²_F``.

    ``adapters`` holds LoraAdapter objects or ``(a, b)`` pairs of tape nodes.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ContractError(f"regularization coefficients must be >= 0, got {lambda1}, {lambda2}")
    out = task
    for ad in adapters:
        a, b = (ad.a, ad.b) if isinstance(ad, LoraAdapter) else ad
        if lambda1:
            out = T.add(out, T.scale(T.frobenius_norm_sq(a), lambda1))
        if lambda2:
            out = T.add(out, T.scale(T.frobenius_norm_sq(b), lambda2))
    return out


@dataclass
class BatchObjective:
    nodes: dict[str, T.Node]
    forward: ForwardPass
    task: T.Node
    total: T.Node
    grads: dict[int, np.ndarray]

    def grad(self, name: str) -> np.ndarray:
        node = self.nodes[name]
        return self.grads.get(node.id, np.zeros(node.shape))


def batch_objective(model: Model, x: np.ndarray, y: Sequence[int], lambda1: float, lambda2: float,
                    names: Sequence[str] | None = None) -> BatchObjective:
    """Trace L_total on one batch with ``names`` (default: the trainable set) as leaves."""
    if names is None:
        names = trainable_set(model, model.strategy)
    tape = T.Tape()
    current = model.parameters()
    nodes = {n: tape.var(current[n], n) for n in names}
    fp = forward_pass(model, x, nodes)
    task = task_loss(fp.logits, y)
    slots = [l for l, ad in enumerate(model.adapters or []) if ad is not None] \
        if model.strategy in LORA_STRATEGIES else []
    factors = [(nodes.get(f"lora.{l}.a", model.adapters[l].a), nodes.get(f"lora.{l}.b", model.adapters[l].b))
               for l in slots]
    total = total_loss(task, factors, lambda1, lambda2)
    return BatchObjective(nodes, fp, task, total, T.backward(tape, total))


def _accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward(model, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def _ranks(model: Model) -> list[int]:
    return [ad.rank for ad in model.adapters if ad is not None] if model.adapters else []


def _alphas(model: Model) -> list[float]:
    return [ad.alpha for ad in model.adapters if ad is not None] if model.adapters else []


def train(model: Model, data: Dataset, cfg: TrainConfig) -> RunRecord:
    """Fit the strategy's trainable set in place and return the run record."""
    for name in ("train", "val", "test"):
        if getattr(data, name).size == 0:
            raise ContractError(f"{name} split is empty")
    strategy = model.strategy
    if strategy not in STRATEGIES:
        raise ContractError(f"model has no strategy applied (got {strategy!r})")
    is_lora = strategy in LORA_STRATEGIES
    dynamic = strategy == "lora_dynamic"
    sched = cfg.schedule
    if dynamic and sched is None:
        raise ContractError("lora_dynamic needs a rank schedule")
    if dynamic and not sched.r_max_per_layer:
        sched = dataclasses.replace(sched, r_max_per_layer=[min(s.d_in, s.d_out) for s in model.layers])
    slots = [l for l, ad in enumerate(model.adapters or []) if ad is not None] if is_lora else []

    t0 = time.perf_counter()
    x_tr, y_tr = data.split("train")
    x_val, y_val = data.split("val")
    rng = np.random.default_rng(cfg.seed)
    names = trainable_set(model, strategy)
    velocity: dict[str, np.ndarray] = {}
    rec = RunRecord(strategy=strategy, seed=cfg.seed)
    logits0, _ = forward(model, x_tr)
    rec.initial_task_loss = float(task_loss(logits0, y_tr)[0, 0])
    rec.initial_val_acc = _accuracy(model, x_val, y_val)
    counts = parameter_counts(model)
    rec.max_param_ratio = counts["param_ratio"]

    for epoch in range(cfg.epochs):
        perm = rng.permutation(x_tr.shape[0])
        sum_total = sum_task = 0.0
        grad_acc = {l: np.zeros_like(model.layers[l].weight) for l in slots}
        var_acc = np.zeros(model.n_layers)
        n_batches = 0
        for start in range(0, perm.size, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            current = model.parameters()
            obj = batch_objective(model, xb, yb, cfg.lambda1, cfg.lambda2, names)
            nodes, fp, task, total, grads = obj.nodes, obj.forward, obj.task, obj.total, obj.grads

            for n in names:
                g = grads.get(nodes[n].id)
                if g is None:
                    continue
                v = velocity.get(n)
                v = g if v is None else cfg.momentum * v + g
                velocity[n] = v
                model.set_parameter(n, current[n] - cfg.learning_rate * v)

            for l in slots:
                eff = fp.effective_weights[l]
                if isinstance(eff, T.Node) and eff.id in grads:
                    grad_acc[l] += grads[eff.id]
            for l, act in enumerate(fp.activations):
                var_acc[l] += T.batch_variance(act)
            sum_total += float(T.value(total)[0, 0]) * idx.size
            sum_task += float(T.value(task)[0, 0]) * idx.size
            n_batches += 1

        gamma: list[float] = []
        if is_lora:
            mean_grads = [grad_acc[l] / n_batches for l in slots]
            if dynamic and sched.due(epoch):
                if sched.allocate_alpha:
                    gamma = refresh_importance(model, mean_grads, epoch).gamma
                changes = update_ranks(model, sched, (var_acc / n_batches).tolist(), epoch, cfg.seed)
                for ch in changes:
                    velocity.pop(f"lora.{ch.layer}.a", None)
                    velocity.pop(f"lora.{ch.layer}.b", None)
                    rec.change_log.append({"epoch": epoch, **ch._asdict()})
                rec.max_param_ratio = max(rec.max_param_ratio, parameter_counts(model)["param_ratio"])
            if not gamma:
                gamma = [layer_importance(g, effective_weight(model, l)) for l, g in zip(slots, mean_grads)]

        n_tr = x_tr.shape[0]
        rec.loss_total.append(sum_total / n_tr)
        rec.loss_task.append(sum_task / n_tr)
        rec.train_acc.append(_accuracy(model, x_tr, y_tr))
        rec.val_acc.append(_accuracy(model, x_val, y_val))
        rec.gamma.append(gamma)
        rec.alpha.append(_alphas(model))
        rec.rank.append(_ranks(model))
        log.debug("epoch %d strategy %s task %.4f val %.3f", epoch, strategy, rec.loss_task[-1], rec.val_acc[-1])

    x_te, y_te = data.split("test")
    rec.test = evaluate(forward(model, x_te)[0], y_te).as_dict()
    counts = parameter_counts(model)
    rec.param_counts = counts
    rec.param_ratio = counts["param_ratio"]
    rec.weight_ratio = counts["weight_ratio"]
    rec.wall_time = time.perf_counter() - t0
    return rec

