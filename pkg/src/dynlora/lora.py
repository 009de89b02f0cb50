"""Low-rank adapter state: init, delta, merge and rank resizing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

INIT_STD = 0.02


@dataclass
class LoraAdapter:
    """Factors of ``ΔW = A·B`` for one layer plus its allocation weight.

    ``a`` is d_in×rank, ``b`` is rank×d_out. ``alpha`` scales the delta when
    the effective weight is formed; it is a constant as far as backprop goes.
    """

    a: np.ndarray
    b: np.ndarray
    alpha: float = 1.0
    r_base: int = 0

    def __post_init__(self) -> None:
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"factor shapes {self.a.shape} and {self.b.shape} do not chain")
        _check_rank(self.rank, self.d_in, self.d_out)
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.r_base == 0:
            self.r_base = self.rank

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def d_in(self) -> int:
        return self.a.shape[0]

    @property
    def d_out(self) -> int:
        return self.b.shape[1]

    @property
    def n_params(self) -> int:
        return self.a.size + self.b.size


def _check_rank(r: int, d_in: int, d_out: int) -> None:
    if not 1 <= r <= min(d_in, d_out):
        raise ContractError(f"rank {r} outside [1, {min(d_in, d_out)}] for a {d_in}×{d_out} layer")


def init_adapter(d_in: int, d_out: int, r: int, seed: int) -> LoraAdapter:
    """Gaussian A (std 0.02) and zero B, so the initial delta is exactly zero."""
    _check_rank(r, d_in, d_out)
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, INIT_STD, size=(d_in, r))
    return LoraAdapter(a=a, b=np.zeros((r, d_out)), alpha=1.0, r_base=r)


def delta(ad: LoraAdapter) -> np.ndarray:
    """Unscaled low-rank update ``A·B`` (d_in×d_out).

    Accumulated one rank-1 term at a time in index order, so appending zero
    rows to B (a grow resize) cannot change the rounding of the result.
    """
    out = np.zeros((ad.d_in, ad.d_out))
    for k in range(ad.rank):
        out += np.outer(ad.a[:, k], ad.b[k, :])
    return out


def merge(w: np.ndarray, ad: LoraAdapter) -> np.ndarray:
    """Fold ``alpha·A·B`` into ``w`` for adapter-free inference."""
    if w.shape != (ad.d_in, ad.d_out):
        raise ShapeError(f"cannot merge a {ad.d_in}×{ad.d_out} adapter into weight {w.shape}")
    return w + ad.alpha * delta(ad)


def resize(ad: LoraAdapter, new_r: int, seed: int) -> LoraAdapter:
    """Change the adapter rank.

    Growing appends fresh Gaussian columns to A and zero rows to B, which
    leaves the delta bit-for-bit unchanged. Shrinking drops trailing columns
    of A and trailing rows of B.
    """
    _check_rank(new_r, ad.d_in, ad.d_out)
    r = ad.rank
    if new_r == r:
        return ad
    if new_r > r:
        rng = np.random.default_rng(seed)
        extra = rng.normal(0.0, INIT_STD, size=(ad.d_in, new_r - r))
        a = np.concatenate([ad.a, extra], axis=1)
        b = np.concatenate([ad.b, np.zeros((new_r - r, ad.d_out))], axis=0)
    else:
        a = ad.a[:, :new_r].copy()
        b = ad.b[:new_r, :].copy()
    return LoraAdapter(a=a, b=b, alpha=ad.alpha, r_base=ad.r_base)
