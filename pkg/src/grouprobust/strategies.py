"""Attempt-efficient campaigns for covering K distinct target classes.

A campaign holds a few attacker instances and a target set. It repeatedly
launches one targeted attack on an ``(instance, target)`` pair, chosen in the
order given by a pairwise estimate of success, until K distinct targets are
impersonated or no admissible pair remains. Estimates come from

* a prior: per (source class, target) success rates on a validation split,
* the MD loss of the unperturbed instance,
* the MD loss after a single attack step,
* ``(1 - prior) * MD`` combinations of the above,

and are compared against a seeded uniformly random order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from grouprobust.attack import AttackConfig, Budget, one_iteration, targeted_attack
from grouprobust.experiment import matching_reaches
from grouprobust.losses import SUCCESS_SENTINEL, md_loss

LOWER_BETTER = "lower_better"
HIGHER_BETTER = "higher_better"

STRATEGIES = ("random", "prior", "md_static", "md_one_iter", "prior_md_static", "prior_md_one_iter")


@dataclass
class PairwiseEstimateMatrix:
    rows: list[int]  # instance positions, or source classes for a prior
    cols: list[int]  # target classes
    scores: np.ndarray
    orientation: str
    row_kind: str = "instance"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.rows), len(self.cols)):
            raise ValueError(f"score shape {self.scores.shape} does not match {len(self.rows)}x{len(self.cols)}")
        if self.orientation not in (LOWER_BETTER, HIGHER_BETTER):
            raise ValueError(f"unknown orientation {self.orientation!r}")

    def cell(self, row: int, col: int) -> float:
        return float(self.scores[self.rows.index(row), self.cols.index(col)])

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "cols": list(self.cols),
            "orientation": self.orientation,
            "row_kind": self.row_kind,
            "scores": [[None if v == SUCCESS_SENTINEL else float(v) for v in r] for r in self.scores],
        }


@dataclass
class CampaignResult:
    strategy: str
    attempts: int
    achieved: list[tuple[int, int]]
    covered_targets: list[int]
    success: bool
    matching_success: bool
    sequence: list[tuple[int, int, bool]] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "strategy": self.strategy,
            "attempts": self.attempts,
            "achieved": [list(p) for p in self.achieved],
            "covered_targets": list(self.covered_targets),
            "success": self.success,
            "matching_success": self.matching_success,
            "sequence": [[i, t, ok] for i, t, ok in self.sequence],
        }


def _attack_succeeds(model, x, t, budget, cfg, gt, source, instance_id) -> bool:
    out = targeted_attack(model, x, t, budget, cfg, instance_id=instance_id)
    if not out.success:
        return False
    return gt is None or gt.classify(out.x_adversarial) == source


def estimate_prior(
    model,
    validation,
    sources: Iterable[int],
    targets: Iterable[int],
    budget: Budget,
    cfg: AttackConfig,
    gt=None,
    per_class: int | None = None,
) -> PairwiseEstimateMatrix:
    """Per (source class, target) fraction of validation instances whose
    targeted attack succeeds (and, given ``gt``, keeps its true label)."""
    sources = sorted(set(int(s) for s in sources))
    targets = sorted(set(int(t) for t in targets))
    scores = np.zeros((len(sources), len(targets)))
    for a, s in enumerate(sources):
        idx = np.flatnonzero(validation.labels == s)
        if len(idx) == 0:
            raise ValueError(f"validation split has no instances of class {s}")
        if per_class is not None:
            idx = idx[:per_class]
        for b, t in enumerate(targets):
            wins = sum(_attack_succeeds(model, validation.instances[i], t, budget, cfg, gt, s, int(i)) for i in idx)
            scores[a, b] = wins / len(idx)
    return PairwiseEstimateMatrix(sources, targets, scores, HIGHER_BETTER, row_kind="class")


def _rows(xs) -> np.ndarray:
    return np.asarray(getattr(xs, "instances", xs), dtype=np.float64)


def estimate_md_static(model, xs, targets: Iterable[int]) -> PairwiseEstimateMatrix:
    """MD loss of each clean instance toward each target (one forward pass
    per instance)."""
    xs = _rows(xs)
    targets = sorted(set(int(t) for t in targets))
    scores = np.zeros((len(xs), len(targets)))
    for i, x in enumerate(xs):
        z = model.logits(x)
        scores[i] = [md_loss(z, t).value for t in targets]
    return PairwiseEstimateMatrix(list(range(len(xs))), targets, scores, LOWER_BETTER)


def estimate_md_one_iter(model, xs, targets: Iterable[int], budget: Budget, cfg: AttackConfig) -> PairwiseEstimateMatrix:
    """MD loss toward each target after one attack step toward it."""
    xs = _rows(xs)
    targets = sorted(set(int(t) for t in targets))
    scores = np.zeros((len(xs), len(targets)))
    for i, x in enumerate(xs):
        for j, t in enumerate(targets):
            scores[i, j] = md_loss(model.logits(one_iteration(model, x, t, budget, cfg)), t).value
    return PairwiseEstimateMatrix(list(range(len(xs))), targets, scores, LOWER_BETTER)


def combine(prior: PairwiseEstimateMatrix, md: PairwiseEstimateMatrix, row_classes: Sequence[int]) -> PairwiseEstimateMatrix:
    """``(1 - prior[class of x, t]) * md[x, t]``; lower is better."""
    if prior.orientation != HIGHER_BETTER or md.orientation != LOWER_BETTER:
        raise ValueError("combine expects a prior (higher better) and an MD matrix (lower better)")
    if len(row_classes) != len(md.rows):
        raise ValueError("need one class per MD row")
    out = np.empty_like(md.scores)
    for a, r in enumerate(md.rows):
        s = int(row_classes[a])
        if s not in prior.rows:
            raise ValueError(f"prior has no row for class {s}")
        for b, t in enumerate(md.cols):
            v = md.scores[a, b]
            out[a, b] = SUCCESS_SENTINEL if v == SUCCESS_SENTINEL else (1.0 - prior.cell(s, t)) * v
    return PairwiseEstimateMatrix(list(md.rows), list(md.cols), out, LOWER_BETTER)


def attempt_order(
    estimate: PairwiseEstimateMatrix | None,
    n_instances: int,
    targets: Sequence[int],
    row_classes: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, int]]:
    """Static preference order over (instance, target) pairs.

    ``None`` gives a seeded random permutation. Lower-is-better scores sort
    ascending with ties to the lowest instance then target. A class-level
    prior sorts class pairs by descending rate and tries every instance of a
    class pair before moving on.
    """
    targets = list(targets)
    pairs = [(i, t) for i in range(n_instances) for t in targets]
    if estimate is None:
        if rng is None:
            raise ValueError("random order needs an rng")
        return [pairs[k] for k in rng.permutation(len(pairs))]
    if estimate.row_kind == "class":
        if row_classes is None:
            raise ValueError("a class-level estimate needs the class of each instance")
        first = {}
        for i, s in enumerate(row_classes):
            first.setdefault(int(s), i)
        return sorted(pairs, key=lambda p: (-estimate.cell(int(row_classes[p[0]]), p[1]),
                                            first[int(row_classes[p[0]])], p[1], p[0]))
    sign = 1.0 if estimate.orientation == LOWER_BETTER else -1.0
    return sorted(pairs, key=lambda p: (sign * estimate.cell(p[0], p[1]), p[0], p[1]))


def execute_campaign(
    order: Sequence[tuple[int, int]],
    attempt: Callable[[int, int], bool],
    k: int,
    allow_reuse: bool = True,
    managers: Iterable[int] | None = None,
    strategy: str = "custom",
) -> CampaignResult:
    """Walk ``order``, always taking the first untried admissible pair.

    A pair is inadmissible once its target is covered or (without reuse) its
    instance has already impersonated someone. With managers, once K-1
    targets are covered and none is a manager, only managers are pursued.
    """
    managers = set(managers) if managers else None
    n_targets = len({t for _, t in order})
    if k > n_targets:
        raise ValueError(f"K={k} exceeds the number of targets {n_targets}")
    tried: set[tuple[int, int]] = set()
    covered: set[int] = set()
    committed: set[int] = set()
    achieved: list[tuple[int, int]] = []
    sequence = []

    def done():
        return len(covered) >= k and (managers is None or bool(covered & managers))

    def admissible(i, t):
        if (i, t) in tried or t in covered:
            return False
        if not allow_reuse and i in committed:
            return False
        if managers is not None and not (covered & managers) and len(covered) >= k - 1:
            return t in managers
        return True

    while not done():
        pick = next((p for p in order if admissible(*p)), None)
        if pick is None:
            break
        tried.add(pick)
        ok = bool(attempt(*pick))
        sequence.append((pick[0], pick[1], ok))
        if ok:
            achieved.append(pick)
            covered.add(pick[1])
            committed.add(pick[0])
    matched = matching_reaches(achieved, k, managers) if not allow_reuse else done()
    return CampaignResult(strategy, len(tried), achieved, sorted(covered), done(), matched, sequence)


def bernoulli_attempts(p: np.ndarray, rng: np.random.Generator, targets: Sequence[int]) -> Callable[[int, int], bool]:
    """Simulated attacker: pair (i, t) succeeds with probability ``p[i, col]``.

    The whole success pattern is drawn up front so strategies compared on the
    same draw see identical outcomes.
    """
    hits = rng.random(p.shape) < p
    col = {t: j for j, t in enumerate(targets)}
    return lambda i, t: bool(hits[i, col[t]])


def build_estimate(
    strategy: str,
    model,
    xs,
    row_classes: Sequence[int],
    targets: Sequence[int],
    budget: Budget,
    cfg: AttackConfig,
    prior: PairwiseEstimateMatrix | None = None,
) -> PairwiseEstimateMatrix | None:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy == "random":
        return None
    if strategy.startswith("prior") and prior is None:
        raise ValueError(f"strategy {strategy!r} needs a prior matrix")
    if strategy == "prior":
        return prior
    if strategy.endswith("md_static"):
        md = estimate_md_static(model, xs, targets)
    else:
        md = estimate_md_one_iter(model, xs, targets, budget, cfg)
    return combine(prior, md, row_classes) if strategy.startswith("prior_") else md


def run_campaign(
    model,
    samples,
    targets: Sequence[int],
    k: int,
    strategy: str,
    budget: Budget,
    cfg: AttackConfig,
    gt=None,
    allow_reuse: bool = True,
    managers: Iterable[int] | None = None,
    prior: PairwiseEstimateMatrix | None = None,
    rng: np.random.Generator | None = None,
    cache: dict | None = None,
) -> CampaignResult:
    """Campaign against ``model`` over the instances of a SampleSet.

    Attempts are deterministic targeted attacks, so outcomes may be shared
    across strategies through ``cache`` (keyed by ``(instance, target)``).
    """
    targets = sorted(set(int(t) for t in targets))
    if k > len(targets):
        raise ValueError(f"K={k} exceeds |T|={len(targets)}")
    xs = _rows(samples)
    if len(xs) == 0:
        raise ValueError("campaign needs at least one instance")
    row_classes = list(getattr(samples, "sources", range(len(xs))))
    ids = list(getattr(samples, "indices", range(len(xs))))
    cache = {} if cache is None else cache

    def attempt(i, t):
        if (i, t) not in cache:
            cache[(i, t)] = _attack_succeeds(model, xs[i], t, budget, cfg, gt, row_classes[i], ids[i])
        return cache[(i, t)]

    est = build_estimate(strategy, model, xs, row_classes, targets, budget, cfg, prior)
    order = attempt_order(est, len(xs), targets, row_classes, rng)
    return execute_campaign(order, attempt, k, allow_reuse, managers, strategy)
