"""Gradient-sensitivity layer importance and softmax allocation weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .network import Model, effective_weight


@dataclass
class ImportanceState:
    gamma: list[float]
    alpha: list[float]
    epoch_computed: int = -1


def layer_importance(grad_w: np.ndarray, w: np.ndarray) -> float:
    """Signed first-order sensitivity ``<dL/dW, W>`` (Frobenius inner product)."""
    if grad_w.shape != w.shape:
        raise ShapeError(f"gradient {grad_w.shape} and weight {w.shape} differ")
    return float(np.sum(grad_w * w))


def allocation_weights(gamma: Sequence[float]) -> np.ndarray:
    """Softmax over layer importances, max-shifted for stability."""
    g = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if g.size == 0:
        raise ContractError("gamma must be non-empty")
    if not np.all(np.isfinite(g)):
        raise ContractError(f"gamma contains non-finite values: {g.tolist()}")
    e = np.exp(g - g.max())
    return e / e.sum()


def refresh_importance(model: Model, grads: Sequence[np.ndarray], epoch: int = -1) -> ImportanceState:
    """Recompute gamma from epoch-mean effective-weight gradients and write alpha into the slots."""
    if model.adapters is None:
        raise ContractError("model has no adapter slots")
    slots = [l for l, ad in enumerate(model.adapters) if ad is not None]
    if len(grads) != len(slots):
        raise ContractError(f"{len(grads)} gradients for {len(slots)} adapted layers")
    gamma = [layer_importance(g, effective_weight(model, l)) for l, g in zip(slots, grads)]
    alpha = allocation_weights(gamma)
    for l, a in zip(slots, alpha):
        model.adapters[l].alpha = float(a)
    return ImportanceState(gamma=gamma, alpha=alpha.tolist(), epoch_computed=epoch)
