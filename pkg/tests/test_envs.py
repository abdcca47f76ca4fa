import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbcrl.envs import (
    LEFT,
    RIGHT,
    STAY,
    ChainHazard,
    GaussianPolicy,
    PointHazard,
    TabularPolicy,
    Trajectory,
    UniformPolicy,
    cumulative_cost,
    dump_trajectories,
    enumerate_trajectories,
    exact_expected_cost,
    load_trajectories,
    make_env,
    rollout,
    rollout_batch,
    sample_tabular,
    trajectory_hash,
)
from pbcrl.metrics import heavy_tail_stats

GAUSS_TAIL_2SD = 0.0228  # P(Z >= 2) for a standard normal


def deterministic(action, n_states=8):
    table = np.zeros((n_states, 3))
    table[:, action] = 1.0
    return TabularPolicy(table)


def test_chain_reset_starts_at_zero():
    env = ChainHazard()
    s = env.reset(0)
    assert s.pos == 0 and s.t == 0
    assert env.observe(s).tolist() == [1.0] + [0.0] * 7


def test_point_reset_is_deterministic():
    env = PointHazard()
    a, b = env.reset(5), env.reset(5)
    np.testing.assert_array_equal(a.pos, b.pos)
    np.testing.assert_array_equal(a.goal, b.goal)


def test_chain_cost_is_one_exactly_in_hazard_block():
    env = ChainHazard()
    for pos in range(env.n_states):
        s = env.reset(0)
        s.pos = pos
        _, _, cost, _ = env.step(s, STAY)
        assert cost == (1.0 if 5 <= pos <= 6 else 0.0)


def test_point_cost_inside_hazard_circle():
    env = PointHazard(hazards=((0.0, 0.0, 0.3),))
    s = env.reset(0)
    s.pos = np.array([0.1, 0.1])
    assert env.step(s, np.zeros(2))[2] == 1.0
    s = env.reset(0)
    s.pos = np.array([0.5, 0.5])
    assert env.step(s, np.zeros(2))[2] == 0.0


def test_chain_rejects_invalid_actions():
    env = ChainHazard()
    with pytest.raises(ValueError):
        env.step(env.reset(0), 3)
    with pytest.raises(ValueError):
        env.step(env.reset(0), 1.5)


def test_point_rejects_actions_outside_box():
    env = PointHazard()
    with pytest.raises(ValueError):
        env.step(env.reset(0), np.array([1.5, 0.0]))


@pytest.mark.parametrize("kwargs", [
    {"hazard_start": 0},
    {"hazard_len": 0},
    {"p_stick": 1.0},
    {"hazard_start": 7, "hazard_len": 2},
    {"gamma": 1.0},
    {"threshold": -1.0},
])
def test_chain_invariants_rejected(kwargs):
    with pytest.raises(ValueError):
        ChainHazard(**kwargs)


def test_point_hazard_must_lie_in_arena():
    with pytest.raises(ValueError):
        PointHazard(hazards=((0.9, 0.0, 0.3),))


def test_make_env_unknown_name():
    with pytest.raises(ValueError):
        make_env("maze")


def test_stay_at_start_policy_has_zero_cost():
    env = ChainHazard(p_slip=0.0)
    for tr in rollout_batch(env, deterministic(STAY), range(20)):
        assert tr.episode_cost == 0.0
    assert exact_expected_cost(env, deterministic(LEFT).table, env.gamma, env.horizon) == 0.0


def test_two_state_chain_geometric_series():
    # safe start, then hold in the hazard forever: sum_{t>=1} 0.5^t = 1
    env = ChainHazard(n_states=2, hazard_start=1, hazard_len=1, p_slip=0.0, gamma=0.5, horizon=60)
    value = exact_expected_cost(env, deterministic(RIGHT, 2).table, 0.5, 60)
    assert value == pytest.approx(1.0, abs=1e-15)


def test_trajectory_lengths_and_seed_determinism():
    env = ChainHazard()
    pol = UniformPolicy(3)
    a, b = rollout(env, pol, 11), rollout(env, pol, 11)
    assert len(a) == env.horizon
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.costs, b.costs)
    batch = rollout_batch(env, pol, [3, 11, 4])
    np.testing.assert_array_equal(batch[1].costs, a.costs)


def test_trajectory_rejects_ragged_arrays():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), np.zeros(2), np.zeros(3), np.zeros(3), 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=40), st.floats(0.01, 1.0))
def test_cumulative_cost_matches_direct_sum(costs, gamma):
    expected = sum(c * gamma**t for t, c in enumerate(costs))
    assert cumulative_cost(np.array(costs), gamma) == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert cumulative_cost(np.array(costs), 1.0) == sum(costs)


def test_uniform_policy_cost_distribution_is_heavy_tailed():
    env = ChainHazard(p_stick=0.85)
    costs = np.array([t.episode_cost for t in rollout_batch(env, UniformPolicy(3), range(10_000))])
    stats = heavy_tail_stats(costs)
    assert stats["skewness"] > 0
    assert stats["tail_2sd"] > GAUSS_TAIL_2SD


def test_transition_tensor_rows_are_distributions():
    P = ChainHazard().transition_tensor()
    np.testing.assert_allclose(P.sum(axis=2), 1.0)
    assert P[5, RIGHT, 5] == pytest.approx(0.85)


def test_step_frequencies_match_transition_tensor():
    env = ChainHazard()
    P = env.transition_tensor()
    rng = np.random.default_rng(0)
    n = 4000
    for s in (0, 3, 5, 7):
        for a in (LEFT, RIGHT):
            counts = np.zeros(env.n_states)
            for k in range(n):
                st_ = env.reset(int(rng.integers(1 << 30)))
                st_.pos = s
                counts[env.step(st_, a)[0].pos] += 1
            se = np.sqrt(P[s, a] * (1 - P[s, a]) / n)
            assert np.all(np.abs(counts / n - P[s, a]) <= 4 * se + 1e-12)


@pytest.mark.parametrize("policy_seed", [0, 1])
def test_step_rollouts_match_dp_within_3_se(policy_seed):
    env = ChainHazard()
    # right-leaning draws so the hazard is actually visited and the standard error is non-zero
    table = np.random.default_rng(policy_seed).dirichlet([1.0, 1.0, 3.0], size=env.n_states)
    exact = exact_expected_cost(env, table, env.gamma, env.horizon)
    trajs = rollout_batch(env, TabularPolicy(table), range(10_000))
    c = np.array([t.discounted_cost(env.gamma) for t in trajs])
    assert abs(c.mean() - exact) <= 3 * c.std(ddof=1) / np.sqrt(len(c))


def test_vectorised_simulator_matches_step_rollouts_in_mean():
    env = ChainHazard()
    table = np.tile([0.2, 0.2, 0.6], (env.n_states, 1))
    costs, _ = env.simulate_costs(table, 20_000, np.random.default_rng(0))
    steps = np.array([t.episode_cost for t in rollout_batch(env, TabularPolicy(table), range(5000))])
    a = costs.sum(axis=1)
    se = np.sqrt(a.var(ddof=1) / len(a) + steps.var(ddof=1) / len(steps))
    assert abs(a.mean() - steps.mean()) <= 3 * se


def test_enumeration_probabilities_sum_to_one():
    env = ChainHazard(n_states=3, hazard_start=1, hazard_len=1, horizon=4)
    mdp = env.to_tabular()
    table = np.random.default_rng(0).dirichlet(np.ones(3), size=3)
    states, actions, prob = enumerate_trajectories(mdp, table, 4)
    assert prob.sum() == pytest.approx(1.0, abs=1e-12)
    exact = exact_expected_cost(mdp, table, 0.9, 4)
    assert prob @ (mdp.cost[states, actions] @ 0.9 ** np.arange(4)) == pytest.approx(exact, abs=1e-12)


def test_sample_tabular_shapes():
    mdp = ChainHazard().to_tabular()
    states, actions = sample_tabular(mdp, np.full((8, 3), 1 / 3), 5, 7, np.random.default_rng(0))
    assert states.shape == actions.shape == (7, 5)
    assert np.all(states[:, 0] == 0)


def test_gaussian_rollout_stores_raw_actions_and_clips():
    env = PointHazard(horizon=10)
    pol = GaussianPolicy(lambda obs: np.full((len(obs), 2), 3.0), log_std=0.0)
    tr = rollout(env, pol, 0)
    assert tr.raw_actions.shape == (10, 2)
    assert np.all(np.abs(tr.actions) <= 1.0)
    assert np.any(np.abs(tr.raw_actions) > 1.0)


def test_point_goal_relocates_on_arrival():
    env = PointHazard(hazards=((0.8, 0.8, 0.1),))
    s = env.reset(0)
    s.goal = s.pos + np.array([0.01, 0.0])
    nxt, reward, _, _ = env.step(s, np.zeros(2))
    assert reward >= env.goal_bonus - 0.02
    assert not np.array_equal(nxt.goal, s.goal)


def test_trajectory_dump_roundtrip(tmp_path):
    env = ChainHazard()
    trajs = rollout_batch(env, UniformPolicy(3), range(3))
    dump_trajectories(trajs, tmp_path / "t.jsonl")
    back = load_trajectories(tmp_path / "t.jsonl")
    assert [trajectory_hash(t) for t in back] == [trajectory_hash(t) for t in trajs]
    assert back[0].actions.dtype.kind == "i"
