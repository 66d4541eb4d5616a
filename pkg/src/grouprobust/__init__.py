"""Group-based robustness toolkit: goal-family experiments, group attack
losses, campaign strategies for multi-attacker impersonation, and a
group-aware adversarial-training defense over small MLP classifiers."""

from grouprobust.attack import (
    AttackConfig,
    AttackOutcome,
    Budget,
    average_guess,
    best_guess,
    group_attack,
    one_iteration,
    pgd,
    project,
    targeted_attack,
)
from grouprobust.classifier import Mlp, TrainConfig
from grouprobust.data import GroundTruth, LabeledDataset
from grouprobust.experiment import GoalFamily, GoalKind
from grouprobust.losses import (
    SUCCESS_SENTINEL,
    LossResult,
    cross_entropy,
    md_loss,
    mdmax_loss,
    mdmul_loss,
    mdtrain_loss,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackOutcome",
    "Budget",
    "GoalFamily",
    "GoalKind",
    "GroundTruth",
    "LabeledDataset",
    "LossResult",
    "Mlp",
    "SUCCESS_SENTINEL",
    "TrainConfig",
    "average_guess",
    "best_guess",
    "cross_entropy",
    "group_attack",
    "md_loss",
    "mdmax_loss",
    "mdmul_loss",
    "mdtrain_loss",
    "one_iteration",
    "pgd",
    "project",
    "targeted_attack",
]
