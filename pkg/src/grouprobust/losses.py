"""Margin losses over logits for targeted, group, and defensive objectives.

Every loss returns a :class:`LossResult` holding the value, the (sub)gradient
with respect to the logits, and a success flag that is true exactly when the
loss sits at its minimum (zero, or ``SUCCESS_SENTINEL`` for the MDMUL loss).

Margin terms are evaluated as ``(Z_i - Z_t) + DELTA``: the difference is taken
first so that near-ties are resolved exactly rather than being swallowed by
rounding of ``Z_i + DELTA`` when logits are large.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

DELTA = 1e-15
# ln(0) for MDMUL; sorts below every real loss value
SUCCESS_SENTINEL = -math.inf
GRAD_FLOOR = 1e-30


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    success: bool

    @property
    def is_sentinel(self) -> bool:
        return self.value == SUCCESS_SENTINEL


def _logits(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 1 or len(Z) == 0:
        raise ValueError(f"logits must be a non-empty vector, got shape {Z.shape}")
    return Z


def _check_class(c: int, n: int, what: str = "class") -> int:
    c = int(c)
    if not 0 <= c < n:
        raise ValueError(f"{what} index {c} outside [0, {n})")
    return c


def target_mask(targets: Iterable[int], n: int) -> np.ndarray:
    """Boolean membership mask of a target set over ``n`` classes."""
    if isinstance(targets, np.ndarray):
        idx = targets.astype(np.int64, copy=False).ravel()
    else:
        idx = np.fromiter(targets, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("target set must be non-empty")
    lo, hi = int(idx.min()), int(idx.max())
    if lo < 0 or hi >= n:
        raise ValueError(f"target index {lo if lo < 0 else hi} outside [0, {n})")
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    return mask


def _split(targets, n: int):
    in_t = target_mask(targets, n)
    return in_t.nonzero()[0], (~in_t).nonzero()[0]


def md_loss(Z, t: int) -> LossResult:
    """Sum over i != t of ReLU(Z_i + DELTA - Z_t)."""
    Z = _logits(Z)
    t = _check_class(t, len(Z), "target")
    d = (Z - Z[t]) + DELTA
    d[t] = 0.0
    active = d > 0.0
    count = int(np.count_nonzero(active))
    grad = active.astype(np.float64)
    grad[t] = -float(count)
    return LossResult(float(d[active].sum()) if count else 0.0, grad, count == 0)


def mdmax_loss(Z, targets: Iterable[int]) -> LossResult:
    """Margin of the best-placed target class over every non-target class."""
    Z = _logits(Z)
    t_idx, others = _split(targets, len(Z))
    best = t_idx[int(np.argmax(Z[t_idx]))]  # lowest index on ties
    grad = np.zeros_like(Z)
    if len(others) == 0:
        return LossResult(0.0, grad, True)
    d = (Z[others] - Z[best]) + DELTA
    active = d > 0.0
    count = int(np.count_nonzero(active))
    grad[others[active]] = 1.0
    grad[best] = -float(count)
    return LossResult(float(d[active].sum()) if count else 0.0, grad, count == 0)


def mdmul_loss(Z, targets: Iterable[int]) -> LossResult:
    """Sum over targets of the log of each target's total margin deficit.

    Any target with zero deficit makes the value ``SUCCESS_SENTINEL``. The
    gradient floors each deficit at ``GRAD_FLOOR`` so it stays finite.
    """
    Z = _logits(Z)
    t_idx, others = _split(targets, len(Z))
    if len(others) == 0:
        raise ValueError("MDMUL needs at least one non-target class")
    D = (Z[others][None, :] - Z[t_idx][:, None]) + DELTA
    A = (D > 0.0).astype(np.float64)
    inner = (D * A).sum(axis=1)
    success = bool(inner.min() == 0.0)
    value = SUCCESS_SENTINEL if success else float(np.log(inner).sum())
    coef = 1.0 / np.maximum(inner, GRAD_FLOOR)
    grad = np.zeros_like(Z)
    grad[others] = coef @ A
    grad[t_idx] = -coef * A.sum(axis=1)
    return LossResult(value, grad, success)


def mdtrain_loss(Z, targets: Iterable[int], kappa: float) -> LossResult:
    """``kappa`` times the margin of each target class over the top non-target.

    ``success`` means no target class reaches the top non-target logit within
    DELTA, i.e. the group attack is prevented; it does not depend on kappa.
    """
    if not kappa >= 0:
        raise ValueError(f"kappa must be non-negative, got {kappa}")
    Z = _logits(Z)
    t_idx, others = _split(targets, len(Z))
    if len(others) == 0:
        raise ValueError("MDTRAIN needs at least one non-target class")
    top = others[int(np.argmax(Z[others]))]
    d = (Z[t_idx] - Z[top]) + DELTA
    active = d > 0.0
    count = int(np.count_nonzero(active))
    grad = np.zeros_like(Z)
    grad[t_idx[active]] = kappa
    grad[top] = -kappa * float(count)
    return LossResult(kappa * float(d[active].sum()) if count else 0.0, grad, count == 0)


def cross_entropy(Z, label: int) -> LossResult:
    Z = _logits(Z)
    label = _check_class(label, len(Z), "label")
    shifted = Z - Z.max()
    lse = math.log(float(np.exp(shifted).sum()))
    probs = np.exp(shifted - lse)
    grad = probs.copy()
    grad[label] -= 1.0
    value = lse - float(shifted[label])
    return LossResult(value, grad, int(np.argmax(Z)) == label)

