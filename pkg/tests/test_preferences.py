import numpy as np
import pytest

from pbcrl.envs import ChainHazard, TabularPolicy, Trajectory
from pbcrl.preferences import (
    BudgetExceededError,
    ClassCollapseError,
    PreferenceDataset,
    PreferenceRecord,
    build_offline_dataset,
    default_behavior_policies,
    inject_label_noise,
    label_pair,
    load_dataset,
    oracle_label_pair,
    oracle_label_safety,
    pair_online_batch,
    save_dataset,
)


def traj_with_cost(total, T=10, seed=0):
    costs = np.zeros(T)
    costs[:total] = 1.0
    return Trajectory(np.zeros((T, 2)), np.zeros(T, dtype=np.int64), np.zeros(T), costs, seed)


@pytest.mark.parametrize("c1,c2,expected", [(3, 5, (1.0, 0.0)), (4, 4, (0.5, 0.5)), (7, 2, (0.0, 1.0))])
def test_oracle_pair_labels(c1, c2, expected):
    assert oracle_label_pair(traj_with_cost(c1), traj_with_cost(c2), 2.0) == expected


def test_oracle_pair_rejects_mismatched_horizons():
    with pytest.raises(ValueError):
        oracle_label_pair(traj_with_cost(1, T=5), traj_with_cost(1, T=6))


@pytest.mark.parametrize("cost,d,expected", [(0, 0.0, 1), (0, 3.0, 1), (3, 3.0, 1), (4, 3.0, 0)])
def test_oracle_safety_labels(cost, d, expected):
    assert oracle_label_safety(traj_with_cost(cost), d) == expected


def test_oracle_safety_rejects_negative_threshold():
    with pytest.raises(ValueError):
        oracle_label_safety(traj_with_cost(0), -1.0)


def test_oracle_uses_undiscounted_cost():
    # late violations still count fully towards the safety label
    costs = np.zeros(50)
    costs[-3:] = 1.0
    tr = Trajectory(np.zeros((50, 1)), np.zeros(50, dtype=np.int64), np.zeros(50), costs, 0)
    assert oracle_label_safety(tr, 2.0) == 0


@pytest.mark.parametrize("mu", [(1.0, 1.0), (0.3, 0.7), (0.5, 0.0)])
def test_record_rejects_bad_preference_labels(mu):
    with pytest.raises(ValueError):
        PreferenceRecord(traj_with_cost(0), traj_with_cost(1), mu[0], mu[1], 1, 1)


def test_record_rejects_bad_safety_labels():
    with pytest.raises(ValueError):
        PreferenceRecord(traj_with_cost(0), traj_with_cost(1), 1.0, 0.0, 2, 1)


def test_zero_noise_returns_record_unchanged():
    rec = label_pair(traj_with_cost(1), traj_with_cost(3), 2.0)
    assert inject_label_noise(rec, 0.0, np.random.default_rng(0)) is rec


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_noise_rate_out_of_range(rate):
    rec = label_pair(traj_with_cost(1), traj_with_cost(3), 2.0)
    with pytest.raises(ValueError):
        inject_label_noise(rec, rate, np.random.default_rng(0))


@pytest.mark.parametrize("rate", [0.1, 0.95])
def test_noise_flip_fraction_within_3_sigma(rate):
    rng = np.random.default_rng(1)
    rec = label_pair(traj_with_cost(1), traj_with_cost(3), 2.0)
    n = 10_000
    noisy = [inject_label_noise(rec, rate, rng) for _ in range(n)]
    sigma = np.sqrt(n * rate * (1 - rate))
    swapped = sum(r.mu_a != rec.mu_a for r in noisy)
    flipped_a = sum(r.eps_a != rec.eps_a for r in noisy)
    flipped_b = sum(r.eps_b != rec.eps_b for r in noisy)
    for count in (swapped, flipped_a, flipped_b):
        assert abs(count - n * rate) <= 3 * sigma
    assert all(r.mu_a + r.mu_b == 1.0 for r in noisy)


def test_dataset_budget_boundary():
    ds = PreferenceDataset(budget=3)
    recs = [label_pair(traj_with_cost(i), traj_with_cost(i + 1), 2.0) for i in range(4)]
    ds.extend(recs[:3])
    assert ds.queries == len(ds) == 3 and ds.remaining == 0
    with pytest.raises(BudgetExceededError):
        ds.extend(recs[3:])
    assert ds.queries == 3


def test_empty_offline_dataset():
    ds = build_offline_dataset(ChainHazard(), None, 0, 2.0, seed=0)
    assert len(ds) == 0 and ds.queries == 0


def test_offline_request_beyond_budget_is_rejected():
    env = ChainHazard()
    ds = build_offline_dataset(env, None, 900, env.threshold, seed=0, budget=1000)
    with pytest.raises(BudgetExceededError):
        build_offline_dataset(env, None, 200, env.threshold, seed=1, dataset=ds)
    assert ds.queries == 900


def test_default_chain_dataset_has_both_classes_and_consistent_labels():
    env = ChainHazard()
    ds = build_offline_dataset(env, default_behavior_policies(env), 500, env.threshold, seed=0)
    assert set(ds.safety_labels().tolist()) == {0, 1}
    for r in ds.records:
        ca, cb = r.traj_a.episode_cost, r.traj_b.episode_cost
        assert r.mu_a == (1.0 if ca < cb else 0.0 if ca > cb else 0.5)
        assert r.eps_a == int(ca <= env.threshold) and r.eps_b == int(cb <= env.threshold)
        assert r.source == "offline"


def test_dataset_building_is_seed_deterministic():
    env = ChainHazard()
    a = build_offline_dataset(env, None, 50, env.threshold, seed=3)
    b = build_offline_dataset(env, None, 50, env.threshold, seed=3)
    assert [r.traj_a.seed for r in a.records] == [r.traj_a.seed for r in b.records]
    assert [r.mu_a for r in a.records] == [r.mu_a for r in b.records]


def test_class_collapse_is_reported():
    env = ChainHazard(p_slip=0.0)
    stay = TabularPolicy(np.tile([0.0, 1.0, 0.0], (env.n_states, 1)))
    with pytest.raises(ClassCollapseError):
        build_offline_dataset(env, [stay], 10, env.threshold, seed=0, max_attempts=2)


def test_online_pairs_are_consecutive_rollouts():
    trajs = [traj_with_cost(c, seed=i) for i, c in enumerate([0, 4, 5, 1, 2])]
    recs = pair_online_batch(trajs, 2.0, iteration=25)
    assert len(recs) == 2
    assert recs[0].traj_a.seed == 0 and recs[0].traj_b.seed == 1
    assert (recs[1].mu_a, recs[1].mu_b) == (0.0, 1.0)
    assert all(r.source == "online" and r.iteration == 25 for r in recs)


def test_dataset_save_load_roundtrip(tmp_path):
    env = ChainHazard()
    ds = build_offline_dataset(env, None, 20, env.threshold, seed=0, budget=30)
    save_dataset(ds, tmp_path / "d", env, seed=0)
    back = load_dataset(tmp_path / "d")
    assert back.budget == 30 and back.queries == 20
    for r, s in zip(ds.records, back.records):
        assert (r.mu_a, r.mu_b, r.eps_a, r.eps_b) == (s.mu_a, s.mu_b, s.eps_a, s.eps_b)
        np.testing.assert_array_equal(r.traj_a.costs, s.traj_a.costs)
    assert (tmp_path / "d" / "manifest.json").exists()
