"""Input-variance driven per-layer rank targets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError
from .lora import delta, resize
from .network import Model


@dataclass
class RankSchedule:
    r_base: int = 4
    lambda_adjust: float = 0.5
    r_max_per_layer: list[int] = field(default_factory=list)
    refresh_every: int = 1
    hysteresis: int = 1
    # False pins alpha at 1.0 instead of softmax allocation.
    allocate_alpha: bool = True

    def __post_init__(self) -> None:
        if self.r_base < 1:
            raise ContractError(f"r_base must be >= 1, got {self.r_base}")
        if self.refresh_every < 1:
            raise ContractError(f"refresh_every must be >= 1, got {self.refresh_every}")
        if self.lambda_adjust < 0:
            raise ContractError(f"lambda_adjust must be >= 0, got {self.lambda_adjust}")
        if self.hysteresis < 1:
            raise ContractError(f"hysteresis must be >= 1, got {self.hysteresis}")

    def due(self, epoch: int) -> bool:
        """True at the end of 0-based ``epoch`` when a refresh is scheduled."""
        return (epoch + 1) % self.refresh_every == 0


class RankChange(NamedTuple):
    layer: int
    old_r: int
    new_r: int
    delta_change_norm: float


def target_rank(sched: RankSchedule, var: float, l: int) -> int:
    """``r_base·(1 + λ·var)`` rounded half-up and clamped to ``[1, r_max]``."""
    if var < 0 or math.isnan(var):
        raise ContractError(f"variance must be >= 0, got {var}")
    raw = sched.r_base * (1.0 + sched.lambda_adjust * var)
    r_max = sched.r_max_per_layer[l]
    if not math.isfinite(raw) or raw >= r_max:
        return r_max
    return max(1, min(r_max, math.floor(raw + 0.5)))


def resize_seed(seed: int, epoch: int, layer: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, layer]).generate_state(1)[0])


def update_ranks(model: Model, sched: RankSchedule, epoch_activation_vars: Sequence[float],
                 epoch: int, seed: int) -> list[RankChange]:
    """Resize every adapter whose target rank moved by at least ``hysteresis``."""
    if model.adapters is None:
        raise ContractError("model has no adapter slots")
    if len(epoch_activation_vars) != len(model.adapters):
        raise ContractError(f"{len(epoch_activation_vars)} variances for {len(model.adapters)} layers")
    changes = []
    for l, (ad, var) in enumerate(zip(model.adapters, epoch_activation_vars)):
        if ad is None:
            continue
        new_r = target_rank(sched, var, l)
        if abs(new_r - ad.rank) < sched.hysteresis:
            continue
        before = delta(ad)
        resized = resize(ad, new_r, resize_seed(seed, epoch, l))
        change = float(np.linalg.norm(before - delta(resized))) if new_r < ad.rank else 0.0
        model.adapters[l] = resized
        changes.append(RankChange(l, ad.rank, new_r, change))
    return changes
