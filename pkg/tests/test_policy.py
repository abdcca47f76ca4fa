import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import REL_TOL, central_diff, rel_error
from pbcrl.config import config_from_dict
from pbcrl.envs import ChainHazard, PointHazard, rollout_batch
from pbcrl.nn import load_checkpoint
from pbcrl.policy import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    PolicyConfig,
    build_batch,
    clipped_surrogate,
    exact_cost_gradient,
    gae_advantages,
    lagrangian_advantage,
    make_agent,
    multiplier_update,
    ppo_update,
    reinforce_cost_gradient,
)
from pbcrl.training import run_pbcrl

SMALL = {
    "preferences": {"budget": 300, "offline_pairs": 240, "online_budget": 60},
    "cost_model": {"epochs": 3},
    "policy": {"iterations": 6, "finetune_interval": 3, "online_pairs": 4, "rollouts_per_iter": 4},
    "evaluation": {"n_eval": 20},
}


def small_config(**policy):
    raw = {k: dict(v) for k, v in SMALL.items()}
    raw["policy"].update(policy)
    return config_from_dict(raw)


# -- advantages -------------------------------------------------------------------------


def test_gae_zero_inputs_give_zero_advantages():
    adv, target = gae_advantages(np.zeros(5), np.zeros(6), 0.99, 0.95)
    assert not np.any(adv) and not np.any(target)


def test_gae_lambda_zero_is_one_step_td():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=7), rng.normal(size=8)
    adv, target = gae_advantages(r, v, 0.9, 0.0)
    np.testing.assert_allclose(adv, r + 0.9 * v[1:] - v[:-1], rtol=1e-14)
    np.testing.assert_allclose(target, adv + v[:-1], rtol=1e-14)


def test_gae_lambda_one_undiscounted_is_reward_to_go():
    r = np.array([1.0, -2.0, 0.5, 3.0])
    adv, _ = gae_advantages(r, np.zeros(5), 1.0, 1.0)
    np.testing.assert_allclose(adv, [2.5, 1.5, 3.5, 3.0], rtol=1e-15)


def test_gae_rejects_length_mismatch():
    with pytest.raises(ValueError):
        gae_advantages(np.zeros(4), np.zeros(4), 0.99, 0.95)


@pytest.mark.parametrize("ar,ac,lam,expected", [(0.7, 5.0, 0.0, 0.7), (2.0, 1.0, 0.5, 1.5), (0.0, 3.0, 2.0, -6.0)])
def test_lagrangian_advantage_examples(ar, ac, lam, expected):
    assert lagrangian_advantage(ar, ac, lam) == expected


def test_lagrangian_advantage_rejects_negative_multiplier():
    with pytest.raises(ValueError):
        lagrangian_advantage(1.0, 1.0, -0.1)


def test_clip_rule_examples():
    value, d_ratio = clipped_surrogate([1.5, 1.5, 0.5, 1.1], [2.0, -2.0, -2.0, 2.0], 0.2)
    np.testing.assert_allclose(value, [1.2 * 2.0, 1.5 * -2.0, 0.8 * -2.0, 1.1 * 2.0], rtol=1e-15)
    # the clipped branch carries no gradient
    np.testing.assert_array_equal(d_ratio, [0.0, -2.0, 0.0, 2.0])


@pytest.mark.parametrize("lam,mean,lr,expected", [(0.5, -1.0, 1.0, 0.0), (1.0, 2.0, 0.1, 1.2), (0.3, 0.0, 0.1, 0.3)])
def test_multiplier_examples(lam, mean, lr, expected):
    assert multiplier_update(lam, mean, lr) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(-100, 100), st.floats(1e-6, 1.0))
def test_multiplier_stays_non_negative(lam, mean, lr):
    assert multiplier_update(lam, mean, lr) >= 0.0


def test_timescale_rule_is_enforced():
    assert PolicyConfig(lr_theta=8e-5, lr_lambda=5e-5).validate(lr_psi=1e-4) == []
    assert PolicyConfig(lr_theta=8e-5, lr_lambda=9e-5).validate(lr_psi=1e-4)
    assert PolicyConfig(lr_theta=2e-4, lr_lambda=5e-5).validate(lr_psi=1e-4)


# -- PPO update -----------------------------------------------------------------------------


def chain_batch(seed=0, n=4):
    env = ChainHazard()
    agent = make_agent(env, PolicyConfig(), seed)
    trajs = rollout_batch(env, agent, range(n))
    step_costs = np.stack([t.costs for t in trajs])
    return env, agent, build_batch(agent, trajs, step_costs, env.gamma, 0.95)


def test_zero_advantages_leave_actor_unchanged():
    _, agent, batch = chain_batch()
    batch.adv_r[:] = 0.0
    batch.adv_c[:] = 0.0
    new, _ = ppo_update(agent, batch, PolicyConfig(entropy_coef=0.0), np.random.default_rng(0))
    assert np.array_equal(new.actor.flat(), agent.actor.flat())
    assert not np.array_equal(new.reward_critic.flat(), agent.reward_critic.flat())


def test_ppo_update_is_deterministic_and_pure():
    _, agent, batch = chain_batch()
    before = agent.actor.flat().copy()
    a, _ = ppo_update(agent, batch, PolicyConfig(), np.random.default_rng(3))
    b, _ = ppo_update(agent, batch, PolicyConfig(), np.random.default_rng(3))
    assert np.array_equal(a.actor.flat(), b.actor.flat())
    assert np.array_equal(a.cost_critic.flat(), b.cost_critic.flat())
    assert np.array_equal(agent.actor.flat(), before)


def test_build_batch_requires_cached_log_probs():
    env, agent, _ = chain_batch()
    tr = rollout_batch(env, agent, [0])[0]
    tr.logp = None
    with pytest.raises(ValueError):
        build_batch(agent, [tr], tr.costs[None], env.gamma, 0.95)


def test_gaussian_agent_update_keeps_log_std_in_range():
    env = PointHazard(horizon=20)
    cfg = PolicyConfig(lr_theta=0.5, lr_lambda=0.1, log_std_init=1.9)
    agent = make_agent(env, cfg, 0)
    trajs = rollout_batch(env, agent, range(4))
    batch = build_batch(agent, trajs, np.stack([t.costs for t in trajs]), env.gamma, 0.95)
    for k in range(5):
        agent, stats = ppo_update(agent, batch, cfg, np.random.default_rng(k))
        assert np.all(agent.log_std >= LOG_STD_MIN) and np.all(agent.log_std <= LOG_STD_MAX)
        assert np.isfinite(stats["policy_loss"])


# -- exact policy gradient versus REINFORCE ----------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_exact_cost_gradient_matches_reinforce_within_3_se(seed):
    env = ChainHazard(n_states=4, hazard_start=2, hazard_len=1, horizon=4)
    mdp = env.to_tabular()
    theta = np.random.default_rng(seed).normal(size=(4, 3))
    _, exact = exact_cost_gradient(mdp, theta, 4, env.gamma)
    mc, se = reinforce_cost_gradient(mdp, theta, 4, env.gamma, 100_000, np.random.default_rng(seed + 10))
    assert np.all(np.abs(mc - exact.reshape(-1)) <= 3 * se + 1e-12)


def test_exact_cost_gradient_matches_finite_differences():
    env = ChainHazard(n_states=3, hazard_start=1, hazard_len=1, horizon=3)
    mdp = env.to_tabular()
    theta = np.random.default_rng(0).normal(size=(3, 3))
    _, grad = exact_cost_gradient(mdp, theta, 3, 0.9)
    fd = central_diff(lambda th: exact_cost_gradient(mdp, th, 3, 0.9)[0], theta)
    assert rel_error(grad.reshape(-1), fd.reshape(-1)) < REL_TOL


# -- orchestration loop ----------------------------------------------------------------------------


def test_run_is_deterministic():
    cfg = small_config()
    a, b = run_pbcrl(cfg, 0), run_pbcrl(cfg, 0)
    assert a.rows == b.rows
    assert a.summary == b.summary


def test_interval_beyond_iterations_finetunes_once_and_flags():
    rep = run_pbcrl(small_config(iterations=4, finetune_interval=10), 0)
    assert rep.column("finetuned").tolist() == [1, 0, 0, 0]
    assert "finetune_interval_exceeds_iterations" in rep.flags


def test_zero_iterations_reports_pretraining_only():
    rep = run_pbcrl(small_config(iterations=0), 0)
    assert rep.rows == []
    assert rep.pretrain["offline_pairs"] == 240
    assert "final_true_cost" not in rep.summary


def test_budget_exhaustion_degrades_gracefully():
    raw = {k: dict(v) for k, v in SMALL.items()}
    raw["preferences"] = {"budget": 244, "offline_pairs": 240, "online_budget": 4}
    raw["policy"].update(iterations=7, finetune_interval=2, online_pairs=3)
    rep = run_pbcrl(config_from_dict(raw), 0)
    assert rep.column("queries").tolist()[-1] == 244
    assert any(f.startswith("budget_exhausted_at_iteration_") for f in rep.flags)
    assert len(rep.rows) == 7


def test_multiplier_and_deadzone_never_negative_during_training():
    raw = {k: dict(v) for k, v in SMALL.items()}
    raw["cost_model"]["lr"] = 5e-3
    raw["policy"].update(lr_lambda=1e-3, lr_theta=2e-3, lr_delta=2.0)
    rep = run_pbcrl(config_from_dict(raw), 1)
    assert np.all(rep.column("lambda") >= 0) and np.all(rep.column("delta") >= 0)


def test_plain_ablation_keeps_deadzone_at_zero():
    raw = {k: dict(v) for k, v in SMALL.items()}
    raw["ablation"] = "plain_bt"
    rep = run_pbcrl(config_from_dict(raw), 0)
    assert np.all(rep.column("delta") == 0.0)


def test_offline_only_ablation_never_queries():
    raw = {k: dict(v) for k, v in SMALL.items()}
    raw["ablation"] = "offline_only"
    rep = run_pbcrl(config_from_dict(raw), 0)
    assert np.all(rep.column("queries") == 240) and not np.any(rep.column("finetuned"))


def test_checkpoints_are_written_every_m_iterations(tmp_path):
    rep = run_pbcrl(small_config(checkpoint_every=2), 0, checkpoint_dir=tmp_path)
    dirs = sorted(p.name for p in tmp_path.iterdir())
    assert dirs == ["iter_00002", "iter_00004", "iter_00006"]
    actor, meta = load_checkpoint(tmp_path / "iter_00006" / "actor")
    assert np.array_equal(actor.flat(), rep.agent.actor.flat())
    assert meta["hyperparams"]["iteration"] == 6
