import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from grouprobust import data as D
from grouprobust.attack import Budget
from grouprobust.experiment import (
    AchievedPair,
    GoalError,
    GoalFamily,
    GoalKind,
    UndefinedCorrelation,
    best_guess_adversary,
    estimate_advantage,
    generate,
    goal_membership,
    identity_adversary,
    max_matching,
    metric_suite,
    pearson,
    run_experiment,
    trial_rng,
)

from conftest import linear_model


def brute_injective(edges, k, managers=None):
    """Is there an assignment of k distinct targets to k distinct instances
    using only achieved edges (one target being a manager, if required)?"""
    edges = set(edges)
    insts = sorted({u for u, _ in edges})
    targets = sorted({v for _, v in edges})
    for chosen in itertools.combinations(targets, k):
        if managers and not set(chosen) & set(managers):
            continue
        for owners in itertools.permutations(insts, k):
            if all((u, v) in edges for u, v in zip(owners, chosen)):
                return True
    return False


def pairs(*triples):
    return [AchievedPair(*t) for t in triples]


def test_family_validation():
    with pytest.raises(GoalError):
        GoalFamily.source_to_targets(5, [0, 1], targets=[1, 2])
    with pytest.raises(GoalError):
        GoalFamily.surjective(5, [0, 1], [2, 3], k=3)
    with pytest.raises(GoalError):
        GoalFamily.surjective(5, [0], [2, 3], k=1, managers=[4])
    with pytest.raises(GoalError):
        GoalFamily.source_to_targets(5, [0], target_map={0: (0, 1)})
    with pytest.raises(GoalError):
        GoalFamily.untargeted(1)


def test_family_roundtrip():
    fams = [GoalFamily.untargeted(6), GoalFamily.targeted(6, target=2), GoalFamily.targeted(6),
            GoalFamily.targeted(6, target_map={0: 3, 1: 4}),
            GoalFamily.source_to_targets(6, [0, 1], target_map={0: (2, 3), 1: (0,)}),
            GoalFamily.surjective(6, [0, 1], [3, 4, 5], 2, allow_reuse=False, managers=[5])]
    for f in fams:
        g = GoalFamily.from_dict(f.to_dict())
        assert g.to_dict() == f.to_dict()


def test_membership_empty_is_false():
    for f in (GoalFamily.untargeted(4), GoalFamily.targeted(4, target=1),
              GoalFamily.source_to_targets(4, [0], targets=[1]), GoalFamily.surjective(4, [0], [1, 2], 1)):
        assert not goal_membership(f, [])


def test_membership_per_kind():
    assert goal_membership(GoalFamily.untargeted(4), pairs((0, 2, 0)))
    assert not goal_membership(GoalFamily.untargeted(4), pairs((0, 0, 0)))
    assert goal_membership(GoalFamily.targeted(4, target=3), pairs((1, 3, 0)))
    assert not goal_membership(GoalFamily.targeted(4, target=3), pairs((1, 2, 0)))
    fam = GoalFamily.source_to_targets(5, [0, 1], targets=[3, 4])
    assert goal_membership(fam, pairs((1, 4, 0)))
    assert not goal_membership(fam, pairs((2, 4, 0)))
    rand = GoalFamily.targeted(4)
    assert goal_membership(rand, pairs((0, 2, 0)), assigned_targets=[2])
    assert not goal_membership(rand, pairs((0, 2, 0)), assigned_targets=[3])


def test_surjective_reuse_split():
    reuse = GoalFamily.surjective(6, [0, 1], [3, 4, 5], 2)
    single = GoalFamily.surjective(6, [0, 1], [3, 4, 5], 2, allow_reuse=False)
    got = pairs((0, 3, 0), (0, 4, 0))
    assert goal_membership(reuse, got)
    assert not goal_membership(single, got)
    assert goal_membership(single, pairs((0, 3, 0), (1, 4, 1)))


def test_surjective_managers():
    fam = GoalFamily.surjective(6, [0, 1], [3, 4, 5], 2, managers=[5])
    assert not goal_membership(fam, pairs((0, 3, 0), (1, 4, 1)))
    assert goal_membership(fam, pairs((0, 3, 0), (1, 5, 1)))
    strict = GoalFamily.surjective(6, [0, 1], [3, 4, 5], 2, allow_reuse=False, managers=[5])
    # the only manager edge uses the instance that also holds the only other target
    assert not goal_membership(strict, pairs((0, 3, 0), (0, 5, 0)))


def test_no_reuse_matches_brute_force(rng):
    for _ in range(2000):
        n_i, n_t = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        mask = rng.random((n_i, n_t)) < rng.random()
        edges = [(i, 10 + t) for i in range(n_i) for t in range(n_t) if mask[i, t]]
        k = int(rng.integers(1, n_t + 1))
        managers = None
        if rng.random() < 0.4:
            managers = [10 + int(m) for m in rng.choice(n_t, size=int(rng.integers(1, n_t + 1)), replace=False)]
        fam = GoalFamily.surjective(20, [0], [10 + t for t in range(n_t)], k,
                                    allow_reuse=False, managers=managers)
        got = [AchievedPair(0, v, u) for u, v in edges]
        assert goal_membership(fam, got) == brute_injective(edges, k, managers)


def test_max_matching_small_cases():
    assert max_matching([]) == 0
    assert max_matching([(0, "a"), (1, "a")]) == 1
    assert max_matching([(0, "a"), (0, "b"), (1, "a")]) == 2
    assert max_matching([(0, "a"), (1, "a"), (1, "b"), (2, "b"), (2, "c")]) == 3


def test_generate_single_instance_pool():
    data = D.LabeledDataset([[0.1, 0.1], [0.9, 0.9], [0.8, 0.9]], [0, 1, 1], 2)
    gt = D.GroundTruth(centroids=[[0.1, 0.1], [0.9, 0.9]])
    fam = GoalFamily.source_to_targets(2, [0], targets=[1])
    for seed in range(5):
        assert generate(data, gt, fam, np.random.default_rng(seed)).indices == [0]


def test_generate_is_seeded_and_surjective_draws_one_per_source(toy):
    fam = GoalFamily.surjective(10, [0, 1, 2], [5, 6], 1)
    a = generate(toy.test, toy.gt, fam, trial_rng(3, 1))
    b = generate(toy.test, toy.gt, fam, trial_rng(3, 1))
    assert a.indices == b.indices
    assert sorted(toy.test.labels[a.indices].tolist()) == [0, 1, 2]


def test_generate_is_uniform(toy):
    fam = GoalFamily.source_to_targets(10, [0], targets=[1])
    pool = toy.test.indices_of([0]).tolist()
    rng = np.random.default_rng(0)
    counts = {i: 0 for i in pool}
    for _ in range(10000):
        counts[generate(toy.test, toy.gt, fam, rng).indices[0]] += 1
    assert chisquare(list(counts.values())).pvalue > 0.01


def test_generate_empty_source():
    data = D.LabeledDataset([[0.1, 0.1]], [0], 3)
    gt = D.GroundTruth(centroids=[[0.1, 0.1], [0.5, 0.5], [0.9, 0.9]])
    with pytest.raises(GoalError):
        generate(data, gt, GoalFamily.surjective(3, [0, 1], [2], 1), np.random.default_rng(0))


@pytest.fixture(scope="module")
def tiny():
    # two classes on a line; the model is correct only on class 0 below 0.3
    data = D.LabeledDataset([[0.1], [0.2], [0.7], [0.8]], [0, 0, 1, 1], 2)
    gt = D.GroundTruth(centroids=[[0.0], [1.0]])
    model = linear_model([[-1.0], [1.0]], [0.3, -0.3])
    return data, gt, model


def test_identity_adversary(tiny):
    data, gt, model = tiny
    fam = GoalFamily.untargeted(2)
    ok = D.LabeledDataset([[0.1]], [0], 2)
    assert run_experiment(model, gt, ok, fam, Budget("linf", 0.1), identity_adversary, np.random.default_rng(0)).result == 0
    bad = D.LabeledDataset([[0.4]], [0], 2)
    res = run_experiment(model, gt, bad, fam, Budget("linf", 0.1), identity_adversary, np.random.default_rng(0))
    assert res.result == 1 and res.outcomes[0]["pre_misclassified"]


def test_budget_violation_returns_zero(tiny):
    data, gt, model = tiny
    far = lambda samples, rng: [(x, np.minimum(x + 0.35, 1.0)) for x in samples.instances]
    res = run_experiment(model, gt, data.subset([0]), GoalFamily.untargeted(2), Budget("linf", 0.1), far,
                         np.random.default_rng(0))
    assert res.result == 0 and "budget" in res.diagnostic


def test_foreign_instance_returns_zero(tiny):
    data, gt, model = tiny
    stranger = lambda samples, rng: [(np.array([0.45]), np.array([0.45]))]
    res = run_experiment(model, gt, data.subset([0]), GoalFamily.untargeted(2), Budget("linf", 0.1), stranger,
                         np.random.default_rng(0))
    assert res.result == 0 and not res.outcomes[0]["in_sample"]


def test_label_change_returns_zero(tiny):
    data, gt, model = tiny
    cross = lambda samples, rng: [(x, np.array([0.55])) for x in samples.instances]
    one = D.LabeledDataset([[0.45]], [0], 2)
    res = run_experiment(model, gt, one, GoalFamily.untargeted(2), Budget("linf", 0.2), cross,
                         np.random.default_rng(0))
    assert res.result == 0 and not res.outcomes[0]["gt_stable"]


def test_estimate_extremes(tiny):
    data, gt, model = tiny
    never = lambda samples, rng: []
    always = lambda samples, rng: [(x, x) for x in samples.instances]
    fam = GoalFamily.source_to_targets(2, [1], targets=[0])
    est = estimate_advantage(model, gt, data, fam, Budget("linf", 0.0), never, 20, seed=0)
    assert est.advantage == 0.0 and est.robustness == 1.0
    flipped = linear_model([[1.0], [-1.0]])
    est = estimate_advantage(flipped, gt, data, fam, Budget("linf", 0.0), always, 20, seed=0)
    assert est.advantage == 1.0 and est.robustness == 0.0
    with pytest.raises(ValueError):
        estimate_advantage(model, gt, data, fam, Budget(), never, 0, seed=0)


def test_bernoulli_adversary_estimate(tiny):
    data, gt, _ = tiny
    flipped = linear_model([[1.0], [-1.0]])
    coin = lambda samples, rng: [(x, x) for x in samples.instances] if rng.random() < 0.3 else []
    fam = GoalFamily.source_to_targets(2, [1], targets=[0])
    est = estimate_advantage(flipped, gt, data, fam, Budget("linf", 0.0), coin, 10000, seed=1)
    assert abs(est.advantage - 0.3) <= 3 * math.sqrt(0.3 * 0.7 / 10000)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 3000), st.data())
def test_advantage_plus_robustness_is_one(n, data):
    k = data.draw(st.integers(0, n))
    from grouprobust.experiment import AdvantageEstimate
    e = AdvantageEstimate(k, n)
    assert e.advantage + e.robustness == 1.0


def test_trials_use_derived_rngs(toy):
    fam = GoalFamily.source_to_targets(10, range(6), targets=(6, 7, 8, 9))
    adv = best_guess_adversary(toy.model, toy.gt, fam, toy.budget, toy.cfg)
    full = estimate_advantage(toy.model, toy.gt, toy.test, fam, toy.budget, adv, 12, seed=8)
    tail = [run_experiment(toy.model, toy.gt, toy.test, fam, toy.budget, adv, trial_rng(8, i)).result
            for i in range(6, 12)]
    assert full.bits[6:] == tail


def test_gbr_all_wrong_classes_equals_ur(toy):
    n = 10
    everything = GoalFamily.source_to_targets(n, range(n), target_map={s: [c for c in range(n) if c != s]
                                                                       for s in range(n)}, name="all")
    rep = metric_suite(toy.model, toy.gt, toy.test, toy.budget, toy.cfg, [everything], trials=40, seed=2)
    assert rep.group_based_robustness["all"] == rep.untargeted_robustness


def test_metric_suite_epsilon_zero(toy):
    b = Budget("linf", 0.0)
    rep = metric_suite(toy.model, toy.gt, toy.test, b, toy.cfg, [], trials=30, seed=0)
    # with no budget the untargeted adversary wins exactly on misclassified draws
    picks = [generate(toy.test, toy.gt, GoalFamily.untargeted(10), trial_rng(0, i)).indices[0] for i in range(30)]
    acc = np.mean([toy.model.predict(toy.test.instances[j]) == toy.test.labels[j] for j in picks])
    assert rep.untargeted_robustness == acc
    assert rep.targeted_robustness == 1.0


def test_pearson_values():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    with pytest.raises(UndefinedCorrelation):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [2])


def test_monotone_in_target_set(toy):
    chain = [(6,), (6, 7), (6, 7, 8), (6, 7, 8, 9)]
    prev = -1.0
    for T in chain:
        fam = GoalFamily.source_to_targets(10, range(6), targets=T)
        adv = best_guess_adversary(toy.model, toy.gt, fam, toy.budget, toy.cfg)
        est = estimate_advantage(toy.model, toy.gt, toy.test, fam, toy.budget, adv, 60, seed=4)
        assert est.advantage >= prev
        prev = est.advantage


def test_goal_kind_values():
    assert GoalFamily.surjective(4, [0], [1, 2], 2).kind is GoalKind.SURJECTIVE_K
    assert GoalFamily.targeted(4).random_target
