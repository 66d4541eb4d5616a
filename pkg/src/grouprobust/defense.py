"""Group-aware adversarial training.

Each batch has two partitions: clean instances of every class, trained with
cross-entropy, and instances of the source classes S, perturbed toward their
target classes with an MDMUL group attack and trained with the MDTRAIN loss so
that no target class overtakes the best non-target class. ``kappa`` weights
the second term. A standard untargeted adversarial-training baseline and a
linear search over ``kappa`` round out the module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from grouprobust.attack import AttackConfig, Budget, group_attack
from grouprobust.classifier import Mlp, batch_loss_grad, sgd_batch_step
from grouprobust.data import GroundTruth, LabeledDataset
from grouprobust.experiment import GoalFamily, best_guess_adversary, estimate_advantage
from grouprobust.losses import cross_entropy, mdtrain_loss

DEFAULT_KAPPAS = (0.1, 0.3, 1.0, 3.0, 10.0)
DEFAULT_SLACK = 0.02


class DefenseError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseConfig:
    sources: tuple[int, ...]
    targets: tuple[int, ...] | None = None
    target_map: dict | None = None  # source class -> tuple of targets
    kappa: float = 1.0
    attack_budget: Budget = Budget("linf", 0.1)
    attack_cfg: AttackConfig = AttackConfig(iterations=5)
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.kappa >= 0:
            raise DefenseError(f"kappa must be non-negative, got {self.kappa}")
        if self.batch_size < 2:
            raise DefenseError("batch_size must be at least 2 (one slot per partition)")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise DefenseError("epochs must be >= 0 and learning_rate > 0")
        if not self.sources:
            raise DefenseError("source set S is empty")
        if (self.targets is None) == (self.target_map is None):
            raise DefenseError("give exactly one of targets or target_map")
        for s in self.sources:
            ts = self.targets_for(s)
            if not ts:
                raise DefenseError(f"source {s} has no targets")
            if self.targets is not None and s in ts:
                raise DefenseError(f"S and T overlap at class {s}")
            if s in ts:
                raise DefenseError(f"source {s} lists itself as a target")

    def targets_for(self, s: int) -> tuple[int, ...]:
        if self.targets is not None:
            return tuple(self.targets)
        return tuple(self.target_map.get(s, self.target_map.get(str(s), ())))

    def all_targets(self) -> tuple[int, ...]:
        return tuple(sorted({t for s in self.sources for t in self.targets_for(s)}))

    def with_kappa(self, kappa: float) -> "DefenseConfig":
        from dataclasses import replace
        return replace(self, kappa=kappa)

    def to_dict(self) -> dict:
        return {
            "sources": list(self.sources),
            "targets": None if self.targets is None else list(self.targets),
            "target_map": None if self.target_map is None else {str(k): list(v) for k, v in self.target_map.items()},
            "kappa": self.kappa,
            "attack_budget": self.attack_budget.to_dict(),
            "attack_cfg": self.attack_cfg.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }


def partition_batches(train: LabeledDataset, sources, batch_size: int, seed: int, epoch: int = 0):
    """Index pairs ``(benign, source)`` covering one epoch.

    The benign partition draws from the whole training set and the source
    partition from the S-class instances; each population is shuffled and
    cut into the same number of batches, so within-batch sizes follow the
    population ratio and every instance appears once per population.
    """
    if batch_size < 2:
        raise DefenseError("batch_size must be at least 2")
    src = train.indices_of(sources)
    if len(src) == 0:
        raise DefenseError(f"training set has no instances of source classes {sorted(sources)}")
    n = len(train)
    nb = min(math.ceil((n + len(src)) / batch_size), len(src))
    rng = np.random.default_rng([seed, epoch])
    a = np.array_split(rng.permutation(n), nb)
    b = np.array_split(rng.permutation(src), nb)
    return list(zip(a, b))


@dataclass
class StepLoss:
    total: float
    benign: float
    adversarial: float  # already kappa-weighted


def perturb_sources(model: Mlp, X: np.ndarray, labels, cfg: DefenseConfig, ids=None) -> np.ndarray:
    """MDMUL group attack on each row toward its class's targets (model is only read)."""
    out = np.empty_like(X)
    for i, (x, y) in enumerate(zip(X, labels)):
        iid = i if ids is None else int(ids[i])
        out[i] = group_attack(model, x, cfg.targets_for(int(y)), "mdmul", cfg.attack_budget, cfg.attack_cfg,
                              instance_id=iid).x_adversarial
    return out


def _mdtrain_for(cfg: DefenseConfig):
    return lambda z, y: mdtrain_loss(z, cfg.targets_for(y), cfg.kappa)


def combined_loss(model: Mlp, X1, y1, X2, y2, cfg: DefenseConfig):
    """Loss components and summed parameter gradients on fixed inputs."""
    benign, dz1 = batch_loss_grad(model, X1, y1, cross_entropy)
    gw, gb = model.vjp_params(X1, dz1)
    adv = 0.0
    if cfg.kappa > 0 and len(X2):
        adv, dz2 = batch_loss_grad(model, X2, y2, _mdtrain_for(cfg))
        gw2, gb2 = model.vjp_params(X2, dz2)
        gw = [a + b for a, b in zip(gw, gw2)]
        gb = [a + b for a, b in zip(gb, gb2)]
    return StepLoss(benign + adv, benign, adv), gw, gb


def defense_step(model: Mlp, train: LabeledDataset, batch, cfg: DefenseConfig) -> StepLoss:
    """One SGD update on mean CE(partition 1) + mean MDTRAIN(adversarial partition 2)."""
    i1, i2 = batch
    X1, y1 = train.instances[i1], train.labels[i1]
    if cfg.kappa == 0:
        # the adversarial term is identically zero; take the plain benign step
        value = sgd_batch_step(model, X1, y1, cross_entropy, cfg.learning_rate)
        return StepLoss(value, value, 0.0)
    X2, y2 = train.instances[i2], train.labels[i2]
    X2 = perturb_sources(model, X2, y2, cfg, ids=i2)
    parts, gw, gb = combined_loss(model, X1, y1, X2, y2, cfg)
    model.sgd_update(gw, gb, cfg.learning_rate)
    return parts


def train_defense(model: Mlp, train: LabeledDataset, cfg: DefenseConfig) -> list[StepLoss]:
    """Run ``cfg.epochs`` epochs of defense steps in place; returns the per-step losses."""
    log = []
    for epoch in range(cfg.epochs):
        for batch in partition_batches(train, cfg.sources, cfg.batch_size, cfg.seed, epoch):
            log.append(defense_step(model, train, batch, cfg))
    return log


def train_adversarial_baseline(model: Mlp, train: LabeledDataset, cfg: DefenseConfig) -> list[float]:
    """Untargeted PGD adversarial training on every instance, same schedule
    length and attack settings as the defense."""
    n_classes = model.class_count
    log = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            X = np.empty((len(idx), train.dim))
            for r, i in enumerate(idx):
                y = int(train.labels[i])
                others = [c for c in range(n_classes) if c != y]
                X[r] = group_attack(model, train.instances[i], others, "mdmax", cfg.attack_budget, cfg.attack_cfg,
                                    instance_id=int(i)).x_adversarial
            log.append(sgd_batch_step(model, X, train.labels[idx], cross_entropy, cfg.learning_rate))
    return log


@dataclass
class DefenseReport:
    average_accuracy: float
    accuracy_on_T: float
    group_based_robustness: float
    baseline_average_accuracy: float
    baseline_accuracy_on_T: float
    baseline_group_based_robustness: float
    trials: int
    records: dict = field(default_factory=dict)

    @property
    def deltas(self) -> dict:
        return {
            "average_accuracy": self.average_accuracy - self.baseline_average_accuracy,
            "accuracy_on_T": self.accuracy_on_T - self.baseline_accuracy_on_T,
            "group_based_robustness": self.group_based_robustness - self.baseline_group_based_robustness,
        }

    def as_row(self) -> dict:
        row = {
            "average_accuracy": self.average_accuracy,
            "accuracy_on_T": self.accuracy_on_T,
            "group_based_robustness": self.group_based_robustness,
            "baseline_average_accuracy": self.baseline_average_accuracy,
            "baseline_accuracy_on_T": self.baseline_accuracy_on_T,
            "baseline_group_based_robustness": self.baseline_group_based_robustness,
        }
        row.update({f"delta_{k}": v for k, v in self.deltas.items()})
        return row


def accuracy_on(model: Mlp, data: LabeledDataset, classes) -> float:
    idx = data.indices_of(classes)
    if len(idx) == 0:
        raise DefenseError(f"accuracy on classes {sorted(classes)} is undefined: no test instances")
    return float(np.mean(model.predict(data.instances[idx]) == data.labels[idx]))


def defense_metrics(model, gt: GroundTruth, data: LabeledDataset, family: GoalFamily, budget: Budget,
                    attack_cfg: AttackConfig, trials: int, seed: int):
    avg = float(np.mean(model.predict(data.instances) == data.labels))
    on_t = accuracy_on(model, data, family.all_targets())
    est = estimate_advantage(model, gt, data, family, budget,
                             best_guess_adversary(model, gt, family, budget, attack_cfg), trials, seed)
    return avg, on_t, est


def evaluate_defense(model, baseline, gt: GroundTruth, test: LabeledDataset, family: GoalFamily, budget: Budget,
                     attack_cfg: AttackConfig, trials: int, seed: int) -> DefenseReport:
    """Three metrics for ``model`` and ``baseline`` under identical attacks and seeds."""
    a, t, e = defense_metrics(model, gt, test, family, budget, attack_cfg, trials, seed)
    ba, bt, be = defense_metrics(baseline, gt, test, family, budget, attack_cfg, trials, seed)
    return DefenseReport(a, t, e.robustness, ba, bt, be.robustness, trials,
                         {"defended": e.records, "baseline": be.records})


@dataclass
class KappaCandidate:
    kappa: float
    average_accuracy: float
    accuracy_on_T: float
    group_based_robustness: float
    admissible: bool


def search_kappa(
    start: Mlp,
    train: LabeledDataset,
    validation: LabeledDataset,
    gt: GroundTruth,
    family: GoalFamily,
    cfg: DefenseConfig,
    reference: tuple[float, float],
    candidates: Sequence[float] = DEFAULT_KAPPAS,
    slack: float = DEFAULT_SLACK,
    trials: int = 100,
    seed: int = 0,
) -> tuple[float, list[KappaCandidate]]:
    """Linear search over ``candidates``.

    Each candidate fine-tunes a copy of ``start`` with ``cfg`` and is scored on
    ``validation``. Among candidates whose average accuracy and accuracy on T
    both stay within ``slack`` of ``reference`` (those two accuracies for the
    comparison model), the one with the highest robustness wins; ties go to
    the smaller kappa.
    """
    if not candidates:
        raise DefenseError("no kappa candidates")
    ref_avg, ref_t = reference
    table = []
    for kappa in sorted(candidates):
        m = start.copy()
        train_defense(m, train, cfg.with_kappa(kappa))
        a, t, est = defense_metrics(m, gt, validation, family, cfg.attack_budget, cfg.attack_cfg, trials, seed)
        ok = a >= ref_avg - slack - 1e-12 and t >= ref_t - slack - 1e-12
        table.append(KappaCandidate(kappa, a, t, est.robustness, ok))
    good = [c for c in table if c.admissible]
    if not good:
        lines = "; ".join(f"kappa={c.kappa}: acc={c.average_accuracy:.4f} acc_T={c.accuracy_on_T:.4f} "
                          f"gbr={c.group_based_robustness:.4f}" for c in table)
        raise DefenseError(f"no kappa keeps accuracy within {slack} of ({ref_avg:.4f}, {ref_t:.4f}): {lines}")
    best = max(good, key=lambda c: (c.group_based_robustness, -c.kappa))
    return best.kappa, table
