"""Fixed-step projected gradient descent and the attacks built on it.

All attacks minimize a margin loss from :mod:`grouprobust.losses` and stop as
soon as the loss reports success. The iterate returned is the one with the
lowest loss seen, so a successful iterate is never traded for a later one.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from grouprobust.losses import LossResult, md_loss, mdmax_loss, mdmul_loss

NORMS = ("linf", "l2")
GROUP_LOSSES = {"mdmax": mdmax_loss, "mdmul": mdmul_loss}
BOX_TOL = 1e-9


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class Budget:
    """Closeness predicate: an Lp ball of radius ``epsilon`` inside [0, 1]^d."""

    norm: str = "linf"
    epsilon: float = 0.1

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")

    def distance(self, x0, x) -> float:
        d = np.asarray(x, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
        if self.norm == "linf":
            return float(np.abs(d).max()) if d.size else 0.0
        return float(np.linalg.norm(d))

    def satisfied(self, x0, x, tol: float = BOX_TOL) -> bool:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != np.shape(x0):
            return False
        in_box = bool(np.all(x >= -tol) and np.all(x <= 1.0 + tol))
        return in_box and self.distance(x0, x) <= self.epsilon + tol

    def default_step(self) -> float:
        return self.epsilon / 4 if self.norm == "linf" else self.epsilon / 2

    def to_dict(self) -> dict:
        return {"norm": self.norm, "epsilon": self.epsilon}


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 20
    step_size: float | None = None  # None: budget default
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is not None and self.step_size < 0:
            raise ValueError("step_size must be non-negative")

    def step_for(self, budget: Budget) -> float:
        return budget.default_step() if self.step_size is None else self.step_size

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "step_size": self.step_size,
            "random_start": self.random_start,
            "seed": self.seed,
        }


@dataclass
class AttackOutcome:
    x_original: np.ndarray
    x_adversarial: np.ndarray
    predicted: int
    success: bool
    loss_trace: list[float] = field(default_factory=list)
    attack_queries: int = 1
    iterations: int = 0  # gradient steps taken across all launches
    target: int | None = None

    @property
    def pair(self):
        return self.x_original, self.x_adversarial


def project(x0, x, budget: Budget) -> np.ndarray:
    """Nearest-in-spirit point of ``x`` inside the budget ball around ``x0``
    and the unit box (coordinate clamp for L-inf, radial rescale for L2)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x0.shape != x.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x.shape}")
    eps = budget.epsilon
    if budget.norm == "linf":
        out = np.clip(x, x0 - eps, x0 + eps)
    else:
        delta = x - x0
        n = float(np.linalg.norm(delta))
        out = x0 + delta * (eps / n) if n > eps else x.copy()
    return np.clip(out, 0.0, 1.0)


def _direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    n = float(np.linalg.norm(g))
    return g / n if n > 0 else np.zeros_like(g)


def _instance_rng(cfg: AttackConfig, instance_id: int, target: int | None):
    # only random starts draw from it; skip the construction cost otherwise
    if not cfg.random_start:
        return None
    tag = [0, 0] if target is None else [1, int(target)]
    return np.random.default_rng([cfg.seed, int(instance_id), *tag])


def _random_start(x0, budget: Budget, rng) -> np.ndarray:
    if budget.norm == "linf":
        noise = rng.uniform(-budget.epsilon, budget.epsilon, size=x0.shape)
    else:
        v = rng.normal(size=x0.shape)
        v /= max(float(np.linalg.norm(v)), 1e-300)
        noise = v * budget.epsilon * rng.uniform() ** (1.0 / len(x0))
    return project(x0, x0 + noise, budget)


def pgd(
    model,
    x,
    loss: Callable[[np.ndarray], LossResult],
    budget: Budget,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> AttackOutcome:
    """Minimize ``loss(logits(x'))`` over the budget ball around ``x``."""
    x0 = np.asarray(x, dtype=np.float64)
    if np.any(x0 < 0) or np.any(x0 > 1):
        raise ValueError("attack input must lie in [0, 1]")
    step = cfg.step_for(budget)
    cur = x0.copy()
    if cfg.random_start and budget.epsilon > 0:
        cur = _random_start(x0, budget, rng if rng is not None else np.random.default_rng(cfg.seed))
    trace: list[float] = []
    best_x, best_val = None, None
    steps = 0
    for k in range(cfg.iterations + 1):
        res = loss(model.logits(cur))
        trace.append(res.value)
        if best_x is None or res.value < best_val:
            best_x, best_val = cur, res.value
        if res.success or k == cfg.iterations:
            break
        g = model.vjp_input(cur, res.grad)
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite input gradient at iteration {k} (loss {res.value})")
        cur = project(x0, cur - step * _direction(g, budget.norm), budget)
        steps += 1
    z = model.logits(best_x)
    return AttackOutcome(
        x_original=x0,
        x_adversarial=best_x,
        predicted=int(np.argmax(z)),
        success=bool(loss(z).success),
        loss_trace=trace,
        attack_queries=1,
        iterations=steps,
    )


def targeted_attack(model, x, t: int, budget: Budget, cfg: AttackConfig, instance_id: int = 0) -> AttackOutcome:
    out = pgd(model, x, functools.partial(md_loss, t=t), budget, cfg, _instance_rng(cfg, instance_id, t))
    out.target = int(t)
    return out


def best_guess(
    model,
    x,
    targets: Iterable[int],
    budget: Budget,
    cfg: AttackConfig,
    stop_on_success: bool = True,
    instance_id: int = 0,
    accept: Callable[[AttackOutcome], bool] | None = None,
    history: list | None = None,
) -> AttackOutcome:
    """One targeted attack per target in ascending order.

    With ``stop_on_success`` (the default) the search ends at the first hit;
    otherwise every target is attempted, giving the worst-case cost. A hit
    only counts if ``accept`` (when given) approves it. Every launched
    outcome is appended to ``history`` when a list is passed.
    """
    targets = sorted(set(int(t) for t in targets))
    if not targets:
        raise ValueError("target set must be non-empty")
    found = None
    last = None
    queries = steps = 0
    for t in targets:
        out = targeted_attack(model, x, t, budget, cfg, instance_id)
        queries += 1
        steps += out.iterations
        last = out
        if history is not None:
            history.append(out)
        if out.success and accept is not None and not accept(out):
            continue
        if out.success and found is None:
            found = out
            if stop_on_success:
                break
    chosen = found if found is not None else last
    return dataclasses.replace(chosen, attack_queries=queries, iterations=steps)


def average_guess(
    model,
    x,
    targets: Iterable[int],
    budget: Budget,
    cfg: AttackConfig,
    rng: np.random.Generator,
    instance_id: int = 0,
) -> AttackOutcome:
    """A single targeted attack toward a uniformly drawn member of ``targets``."""
    targets = sorted(set(int(t) for t in targets))
    if not targets:
        raise ValueError("target set must be non-empty")
    t = targets[int(rng.integers(len(targets)))]
    return targeted_attack(model, x, t, budget, cfg, instance_id)


def group_attack(
    model,
    x,
    targets: Iterable[int],
    loss_kind: str,
    budget: Budget,
    cfg: AttackConfig,
    instance_id: int = 0,
) -> AttackOutcome:
    """Single PGD run on a group loss; succeeds when any target wins."""
    try:
        fn = GROUP_LOSSES[loss_kind.lower()]
    except KeyError:
        raise ValueError(f"loss_kind must be one of {sorted(GROUP_LOSSES)}, got {loss_kind!r}") from None
    targets = tuple(sorted(set(int(t) for t in targets)))
    out = pgd(model, x, functools.partial(fn, targets=targets), budget, cfg, _instance_rng(cfg, instance_id, None))
    if out.success:
        out.target = out.predicted
    return out


def one_iteration(model, x, t: int, budget: Budget, cfg: AttackConfig) -> np.ndarray:
    """A single projected step on the MD loss toward ``t``."""
    x0 = np.asarray(x, dtype=np.float64)
    res = md_loss(model.logits(x0), t)
    g = model.vjp_input(x0, res.grad)
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return project(x0, x0 - cfg.step_for(budget) * _direction(g, budget.norm), budget)

