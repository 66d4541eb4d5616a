"""The impersonation-relation experiment and the metrics derived from it.

A :class:`GoalFamily` describes, intensionally, which sets of achieved
``(source class, predicted class)`` pairs count as an adversary win. One run
of :func:`run_experiment` samples instances, lets an adversary perturb them,
and returns 1 only if every returned pair is admissible (instance drawn from
the sample, within budget, ground-truth label unchanged) and the achieved
relation satisfies the goal. Advantage is the mean of these bits; group-based
robustness is its complement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from grouprobust.attack import AttackConfig, AttackOutcome, Budget, average_guess, best_guess, group_attack, targeted_attack
from grouprobust.data import GroundTruth, LabeledDataset


class GoalKind(str, Enum):
    UNTARGETED = "untargeted"
    TARGETED = "targeted"
    SOURCE_TO_TARGETS = "source_to_targets"
    SURJECTIVE_K = "surjective_k"


class GoalError(ValueError):
    pass


class GoalFamily:
    """Adversary goal space; use the classmethod constructors."""

    def __init__(
        self,
        kind: GoalKind,
        class_count: int,
        sources: Iterable[int],
        target_map: dict[int, tuple[int, ...]] | None = None,
        targets: Iterable[int] | None = None,
        k: int = 1,
        allow_reuse: bool = True,
        managers: Iterable[int] | None = None,
        random_target: bool = False,
        name: str | None = None,
    ):
        self.kind = GoalKind(kind)
        self.class_count = int(class_count)
        self.sources = tuple(sorted(set(int(s) for s in sources)))
        self.target_map = {int(s): tuple(sorted(set(int(t) for t in ts))) for s, ts in (target_map or {}).items()}
        self.targets = tuple(sorted(set(int(t) for t in targets))) if targets is not None else None
        self.k = int(k)
        self.allow_reuse = bool(allow_reuse)
        self.managers = tuple(sorted(set(int(m) for m in managers))) if managers else None
        self.random_target = bool(random_target)
        self.name = name or self.kind.value
        self._validate()

    def _validate(self):
        n = self.class_count
        if n < 2:
            raise GoalError("class_count must be >= 2")
        every = set(self.sources) | set(self.targets or ())
        for ts in self.target_map.values():
            every |= set(ts)
        for c in every:
            if not 0 <= c < n:
                raise GoalError(f"class index {c} outside [0, {n})")
        if not self.sources:
            raise GoalError("source set must be non-empty")
        if self.kind in (GoalKind.TARGETED, GoalKind.SOURCE_TO_TARGETS) and not self.random_target:
            for s in self.sources:
                ts = self.target_map.get(s)
                if not ts:
                    raise GoalError(f"source {s} has no target classes")
                if s in ts:
                    raise GoalError(f"source {s} lists itself as a target")
        if self.kind is GoalKind.SURJECTIVE_K:
            if not self.targets:
                raise GoalError("surjective goal needs a non-empty target set")
            if set(self.sources) & set(self.targets):
                raise GoalError("source and target sets must be disjoint")
            if not 1 <= self.k <= len(self.targets):
                raise GoalError(f"K={self.k} must lie in [1, |T|={len(self.targets)}]")
            if self.managers and not set(self.managers) <= set(self.targets):
                raise GoalError("managers must be a subset of the target set")

    @classmethod
    def untargeted(cls, class_count: int, name: str | None = None) -> "GoalFamily":
        return cls(GoalKind.UNTARGETED, class_count, range(class_count), name=name or "untargeted")

    @classmethod
    def targeted(cls, class_count: int, target: int | None = None, target_map=None, name=None) -> "GoalFamily":
        """Fixed target ``target``, a per-source map, or (neither given) a
        target drawn uniformly among the wrong classes on every run."""
        if target is not None:
            sources = [s for s in range(class_count) if s != target]
            return cls(GoalKind.TARGETED, class_count, sources, {s: (target,) for s in sources}, name=name)
        if target_map is not None:
            tm = {int(s): (int(t),) for s, t in dict(target_map).items()}
            return cls(GoalKind.TARGETED, class_count, tm.keys(), tm, name=name)
        return cls(GoalKind.TARGETED, class_count, range(class_count), random_target=True, name=name or "targeted-random")

    @classmethod
    def source_to_targets(cls, class_count: int, sources, targets=None, target_map=None, name=None) -> "GoalFamily":
        sources = sorted(set(int(s) for s in sources))
        if target_map is None:
            if targets is None:
                raise GoalError("give either a target set or a per-source target map")
            targets = tuple(targets)
            if set(sources) & set(targets):
                raise GoalError("source and target sets must be disjoint")
            target_map = {s: targets for s in sources}
        return cls(GoalKind.SOURCE_TO_TARGETS, class_count, sources, target_map, name=name)

    @classmethod
    def surjective(cls, class_count: int, sources, targets, k: int, allow_reuse=True, managers=None, name=None):
        return cls(GoalKind.SURJECTIVE_K, class_count, sources, targets=targets, k=k,
                   allow_reuse=allow_reuse, managers=managers, name=name)

    @property
    def per_instance(self) -> bool:
        return self.kind is not GoalKind.SURJECTIVE_K

    def targets_for(self, s: int) -> tuple[int, ...]:
        """Candidate target classes for an instance of source class ``s``."""
        if self.kind is GoalKind.UNTARGETED or (self.kind is GoalKind.TARGETED and self.random_target):
            return tuple(c for c in range(self.class_count) if c != s)
        if self.kind is GoalKind.SURJECTIVE_K:
            return self.targets
        return self.target_map.get(s, ())

    def all_targets(self) -> tuple[int, ...]:
        out = set()
        for s in self.sources:
            out |= set(self.targets_for(s))
        return tuple(sorted(out))

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "name": self.name, "class_count": self.class_count, "sources": list(self.sources)}
        if self.kind is GoalKind.SURJECTIVE_K:
            d.update(targets=list(self.targets), k=self.k, allow_reuse=self.allow_reuse,
                     managers=list(self.managers) if self.managers else None)
        elif self.random_target:
            d["random_target"] = True
        elif self.kind is not GoalKind.UNTARGETED:
            d["target_map"] = {str(s): list(ts) for s, ts in self.target_map.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GoalFamily":
        kind = GoalKind(d["kind"])
        n = d["class_count"]
        name = d.get("name")
        if kind is GoalKind.UNTARGETED:
            return cls.untargeted(n, name=name)
        if kind is GoalKind.SURJECTIVE_K:
            return cls.surjective(n, d["sources"], d["targets"], d["k"], d.get("allow_reuse", True),
                                  d.get("managers"), name=name)
        if kind is GoalKind.TARGETED:
            if d.get("random_target"):
                return cls.targeted(n, name=name)
            if "target" in d:
                return cls.targeted(n, target=d["target"], name=name)
            return cls.targeted(n, target_map={int(s): ts[0] if isinstance(ts, list) else ts
                                               for s, ts in d["target_map"].items()}, name=name)
        if "target_map" in d:
            return cls.source_to_targets(n, d["sources"], target_map={int(s): ts for s, ts in d["target_map"].items()},
                                         name=name)
        return cls.source_to_targets(n, d["sources"], targets=d["targets"], name=name)

    def __repr__(self):
        return f"GoalFamily({self.to_dict()})"


class AchievedPair(NamedTuple):
    source: int
    predicted: int
    instance: int  # position in the SampleSet


@dataclass
class SampleSet:
    instances: np.ndarray
    sources: list  # ground-truth class per instance (None where undefined)
    indices: list[int]  # positions in the dataset
    assigned_targets: list | None = None  # per-instance target for random-target goals

    def __len__(self):
        return len(self.indices)

    def locate(self, x) -> int | None:
        x = np.asarray(x)
        for j, xi in enumerate(self.instances):
            if xi.shape == x.shape and np.array_equal(xi, x):
                return j
        return None


def generate(data: LabeledDataset, gt: GroundTruth, family: GoalFamily, rng: np.random.Generator) -> SampleSet:
    """Uniform draw from the source-class instances (one per source class
    for surjective goals)."""
    if family.per_instance:
        pool = data.indices_of(family.sources)
        if len(pool) == 0:
            raise GoalError("no dataset instances belong to the source classes")
        picks = [int(pool[rng.integers(len(pool))])]
    else:
        picks = []
        for s in family.sources:
            pool = np.flatnonzero(data.labels == s)
            if len(pool) == 0:
                raise GoalError(f"source class {s} has no instances")
            picks.append(int(pool[rng.integers(len(pool))]))
    xs = data.instances[picks]
    sources = [gt.classify(x) for x in xs]
    assigned = None
    if family.random_target:
        assigned = []
        for s in sources:
            wrong = [c for c in range(family.class_count) if c != s]
            assigned.append(wrong[int(rng.integers(len(wrong)))])
    return SampleSet(xs, sources, picks, assigned)


def candidate_targets(family: GoalFamily, samples: SampleSet, j: int) -> tuple[int, ...]:
    if samples.assigned_targets is not None:
        return (samples.assigned_targets[j],)
    s = samples.sources[j]
    return () if s is None else family.targets_for(s)


# --- bipartite matching over (instance, target) successes ---------------------

def max_matching(edges: Iterable[tuple[int, int]], exclude_left=(), exclude_right=()) -> int:
    """Maximum cardinality matching by repeated augmenting-path search."""
    adj: dict[int, list[int]] = {}
    for u, v in edges:
        if u in exclude_left or v in exclude_right:
            continue
        adj.setdefault(u, [])
        if v not in adj[u]:
            adj[u].append(v)
    match_right: dict[int, int] = {}

    def augment(u, seen):
        for v in adj[u]:
            if v in seen:
                continue
            seen.add(v)
            if v not in match_right or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    return sum(1 for u in sorted(adj) if augment(u, set()))


def matching_reaches(edges, k: int, managers=None) -> bool:
    """Is there a matching of size >= k (containing a manager target, if
    ``managers`` is given)?"""
    edges = list(set(edges))
    if not managers:
        return max_matching(edges) >= k
    for u, v in edges:
        if v in managers and 1 + max_matching(edges, exclude_left={u}, exclude_right={v}) >= k:
            return True
    return False


def goal_membership(family: GoalFamily, achieved: Iterable[AchievedPair], assigned_targets=None) -> bool:
    pairs = [p for p in achieved if p.source is not None]
    if not pairs:
        return False
    kind = family.kind
    if kind is GoalKind.UNTARGETED:
        return any(p.predicted != p.source for p in pairs)
    if kind is GoalKind.TARGETED:
        for p in pairs:
            if family.random_target:
                want = None if assigned_targets is None else assigned_targets[p.instance]
            else:
                want = family.target_map.get(p.source, (None,))[0]
            if want is not None and p.predicted == want:
                return True
        return False
    if kind is GoalKind.SOURCE_TO_TARGETS:
        return any(p.source in family.target_map and p.predicted in family.target_map[p.source] for p in pairs)
    hits = {(p.instance, p.predicted) for p in pairs if p.source in family.sources and p.predicted in family.targets}
    managers = set(family.managers) if family.managers else None
    if family.allow_reuse:
        covered = {t for _, t in hits}
        return len(covered) >= family.k and (managers is None or bool(covered & managers))
    return matching_reaches(hits, family.k, managers)


# --- the experiment ---------------------------------------------------------

Adversary = Callable[[SampleSet, np.random.Generator], Sequence]


@dataclass
class ExperimentResult:
    result: int
    samples: SampleSet
    outcomes: list[dict] = field(default_factory=list)
    achieved: list[AchievedPair] = field(default_factory=list)
    diagnostic: str | None = None

    def to_record(self, trial: int | None = None) -> dict:
        rec = {
            "samples": list(self.samples.indices),
            "sources": list(self.samples.sources),
            "outcomes": self.outcomes,
            "result": self.result,
        }
        if self.samples.assigned_targets is not None:
            rec["assigned_targets"] = list(self.samples.assigned_targets)
        if self.diagnostic:
            rec["diagnostic"] = self.diagnostic
        if trial is not None:
            rec = {"trial": trial, **rec}
        return rec


def _as_pair(item):
    if isinstance(item, AttackOutcome):
        return item.x_original, item.x_adversarial, item
    x, xa = item
    return x, xa, None


def run_experiment(
    model,
    gt: GroundTruth,
    data: LabeledDataset,
    family: GoalFamily,
    budget: Budget,
    adversary: Adversary,
    rng: np.random.Generator,
) -> ExperimentResult:
    samples = generate(data, gt, family, rng)
    returned = adversary(samples, rng)
    records, achieved, problems = [], [], []
    for item in returned:
        x, xa, out = _as_pair(item)
        j = samples.locate(x)
        rec: dict = {"instance": j}
        if out is not None:
            rec.update(target=out.target, attack_success=bool(out.success),
                       queries=out.attack_queries, iterations=out.iterations)
        if j is None:
            rec["in_sample"] = False
            problems.append("adversary returned an instance outside the sample")
            records.append(rec)
            continue
        pi_ok = budget.satisfied(x, xa)
        fx = samples.sources[j]
        fxa = gt.classify(xa)
        stable = fx is not None and fxa == fx
        predicted = int(np.argmax(model.logits(xa)))
        rec.update(in_sample=True, source=fx, predicted=predicted, pi_ok=pi_ok, gt_stable=stable,
                   pre_misclassified=bool(fx is not None and int(np.argmax(model.logits(x))) != fx))
        records.append(rec)
        if not pi_ok:
            problems.append(f"instance {j}: perturbation exceeds the budget")
            continue
        if not stable:
            problems.append(f"instance {j}: ground-truth label changed ({fx} -> {fxa})")
        achieved.append(AchievedPair(fx, predicted, j))
    member = goal_membership(family, achieved, samples.assigned_targets)
    bit = int(member and not problems)
    return ExperimentResult(bit, samples, records, achieved, "; ".join(problems) or None)


@dataclass
class AdvantageEstimate:
    successes: int
    trials: int
    records: list[dict] = field(default_factory=list)

    @property
    def advantage(self) -> float:
        return self.successes / self.trials

    @property
    def robustness(self) -> float:
        return 1.0 - self.advantage

    @property
    def stderr(self) -> float:
        a = self.advantage
        return math.sqrt(a * (1.0 - a) / self.trials)

    @property
    def bits(self) -> list[int]:
        return [r["result"] for r in self.records]


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial])


def estimate_advantage(model, gt, data, family, budget, adversary: Adversary, trials: int, seed: int) -> AdvantageEstimate:
    """Mean of ``trials`` experiment runs, each with its own derived RNG."""
    if trials < 1:
        raise ValueError("need at least one trial")
    records = []
    wins = 0
    for i in range(trials):
        res = run_experiment(model, gt, data, family, budget, adversary, trial_rng(seed, i))
        wins += res.result
        records.append(res.to_record(i))
    return AdvantageEstimate(wins, trials, records)


# --- adversaries ----------------------------------------------------------------

def _stable(gt: GroundTruth, samples: SampleSet, j: int) -> Callable[[AttackOutcome], bool]:
    return lambda out: gt.classify(out.x_adversarial) == samples.sources[j]


def best_guess_adversary(model, gt, family, budget, cfg: AttackConfig, stop_on_success: bool = True) -> Adversary:
    """Targeted attacks toward each candidate target in turn; returns every
    attempt whose perturbation keeps the ground-truth label."""

    def run(samples: SampleSet, rng):
        kept = []
        for j, x in enumerate(samples.instances):
            ts = candidate_targets(family, samples, j)
            if not ts:
                continue
            keep = _stable(gt, samples, j)
            hist: list[AttackOutcome] = []
            best_guess(model, x, ts, budget, cfg, stop_on_success=stop_on_success,
                       instance_id=samples.indices[j], accept=keep, history=hist)
            kept.extend(o for o in hist if keep(o))
        return kept

    return run


def average_guess_adversary(model, gt, family, budget, cfg: AttackConfig) -> Adversary:
    def run(samples: SampleSet, rng):
        kept = []
        for j, x in enumerate(samples.instances):
            ts = candidate_targets(family, samples, j)
            if not ts:
                continue
            out = average_guess(model, x, ts, budget, cfg, rng, instance_id=samples.indices[j])
            if _stable(gt, samples, j)(out):
                kept.append(out)
        return kept

    return run


def group_adversary(model, gt, family, budget, cfg: AttackConfig, loss_kind: str = "mdmax") -> Adversary:
    def run(samples: SampleSet, rng):
        kept = []
        for j, x in enumerate(samples.instances):
            ts = candidate_targets(family, samples, j)
            if not ts:
                continue
            out = group_attack(model, x, ts, loss_kind, budget, cfg, instance_id=samples.indices[j])
            if _stable(gt, samples, j)(out):
                kept.append(out)
        return kept

    return run


def exhaustive_adversary(model, gt, family, budget, cfg: AttackConfig) -> Adversary:
    """Every (instance, target) targeted attack; keeps label-stable successes."""

    def run(samples: SampleSet, rng):
        kept = []
        for j, x in enumerate(samples.instances):
            keep = _stable(gt, samples, j)
            for t in candidate_targets(family, samples, j):
                out = targeted_attack(model, x, t, budget, cfg, instance_id=samples.indices[j])
                if out.success and keep(out):
                    kept.append(out)
        return kept

    return run


def identity_adversary(samples: SampleSet, rng):
    return [(x, x.copy()) for x in samples.instances]


# --- metrics --------------------------------------------------------------------------

@dataclass
class MetricReport:
    benign_accuracy: float
    untargeted_robustness: float
    targeted_robustness: float
    group_based_robustness: dict[str, float]
    estimates: dict[str, AdvantageEstimate] = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {
            "benign_accuracy": self.benign_accuracy,
            "untargeted_robustness": self.untargeted_robustness,
            "targeted_robustness": self.targeted_robustness,
        }
        for name, v in self.group_based_robustness.items():
            row[f"gbr:{name}"] = v
        return row


def default_adversary(model, gt, family: GoalFamily, budget, cfg) -> Adversary:
    if family.per_instance:
        return best_guess_adversary(model, gt, family, budget, cfg)
    return exhaustive_adversary(model, gt, family, budget, cfg)


def metric_suite(model, gt, data, budget, cfg: AttackConfig, families: Sequence[GoalFamily], trials: int, seed: int) -> MetricReport:
    """Benign accuracy plus untargeted, random-target, and group-based
    robustness, all measured with best-guess adversaries on shared seeds."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    acc = float(np.mean(np.argmax(model.logits(data.instances), axis=1) == data.labels))
    n = data.class_count
    untargeted = GoalFamily.untargeted(n)
    targeted = GoalFamily.targeted(n)
    est = {
        "untargeted": estimate_advantage(model, gt, data, untargeted, budget,
                                         best_guess_adversary(model, gt, untargeted, budget, cfg), trials, seed),
        "targeted": estimate_advantage(model, gt, data, targeted, budget,
                                       best_guess_adversary(model, gt, targeted, budget, cfg), trials, seed),
    }
    gbr = {}
    for fam in families:
        e = estimate_advantage(model, gt, data, fam, budget, default_adversary(model, gt, fam, budget, cfg), trials, seed)
        est[f"gbr:{fam.name}"] = e
        gbr[fam.name] = e.robustness
    return MetricReport(acc, est["untargeted"].robustness, est["targeted"].robustness, gbr, est)


class UndefinedCorrelation(ValueError):
    pass


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length vectors with at least two entries")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a zero-variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))
