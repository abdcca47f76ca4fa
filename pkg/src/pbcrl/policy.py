"""PPO-Lagrangian on top of a learned cost model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import AdamState, Network, NonFiniteError, adam_init, adam_step, net_backward, net_forward, net_init

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class PolicyConfig:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    lr_theta: float = 8e-5
    lr_lambda: float = 5e-5
    lr_delta: float = 0.5
    clip: float = 0.2
    gae_lambda: float = 0.95
    iterations: int = 300
    finetune_interval: int = 25
    rollouts_per_iter: int = 8
    online_pairs: int = 16
    ppo_epochs: int = 4
    minibatch: int = 128
    entropy_coef: float = 0.003
    lambda_init: float = 0.0
    log_std_init: float = -0.5
    checkpoint_every: int = 100

    def validate(self, lr_psi: float | None = None) -> list[str]:
        errs = []
        for k in ("lr_theta", "lr_lambda", "lr_delta"):
            if getattr(self, k) <= 0:
                errs.append(f"{k} must be positive")
        if not self.lr_lambda < self.lr_theta:
            errs.append(f"timescale rule violated: need lr_lambda < lr_theta (got {self.lr_lambda} >= {self.lr_theta})")
        if lr_psi is not None and not self.lr_theta < lr_psi:
            errs.append(f"timescale rule violated: need lr_theta < lr_psi (got {self.lr_theta} >= {lr_psi})")
        if not 0 < self.clip < 1:
            errs.append("clip must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            errs.append("gae_lambda must lie in [0, 1]")
        if self.iterations < 0:
            errs.append("iterations must be >= 0")
        if self.finetune_interval < 1:
            errs.append("finetune_interval must be >= 1")
        if self.rollouts_per_iter < 1:
            errs.append("rollouts_per_iter must be >= 1")
        if self.online_pairs < 0:
            errs.append("online_pairs must be >= 0")
        if self.ppo_epochs < 1 or self.minibatch < 1:
            errs.append("ppo_epochs and minibatch must be >= 1")
        if self.entropy_coef < 0:
            errs.append("entropy_coef must be >= 0")
        if self.lambda_init < 0:
            errs.append("lambda_init must be >= 0")
        if self.checkpoint_every < 0:
            errs.append("checkpoint_every must be >= 0 (0 disables checkpoints)")
        return errs


@dataclass
class PolicyAgent:
    actor: Network
    reward_critic: Network
    cost_critic: Network
    lam: float = 0.0
    discrete: bool = True
    log_std: np.ndarray | None = None
    opt_actor: AdamState | None = None
    opt_reward: AdamState | None = None
    opt_cost: AdamState | None = None
    opt_log_std: dict | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.opt_actor is None:
            self.opt_actor = adam_init(self.actor)
            self.opt_reward = adam_init(self.reward_critic)
            self.opt_cost = adam_init(self.cost_critic)
        if not self.discrete and self.opt_log_std is None:
            self.opt_log_std = {"m": np.zeros_like(self.log_std), "v": np.zeros_like(self.log_std), "step": 0}

    @property
    def kind(self) -> str:
        return "categorical" if self.discrete else "gaussian"

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return softmax(net_forward(self.actor, obs))

    def mean_log_std(self, obs: np.ndarray):
        return net_forward(self.actor, obs), self.log_std

    def values(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return net_forward(self.reward_critic, obs)[:, 0], net_forward(self.cost_critic, obs)[:, 0]

    def copy(self) -> "PolicyAgent":
        return PolicyAgent(
            self.actor.copy(), self.reward_critic.copy(), self.cost_critic.copy(), self.lam, self.discrete,
            None if self.log_std is None else self.log_std.copy(),
            self.opt_actor.copy(), self.opt_reward.copy(), self.opt_cost.copy(),
            None if self.opt_log_std is None else {k: np.copy(v) for k, v in self.opt_log_std.items()},
        )


def make_agent(env, cfg: PolicyConfig, seed: int) -> PolicyAgent:
    n_out = env.n_actions if env.discrete else env.action_dim
    actor = net_init([env.obs_dim, *cfg.hidden, n_out], seed, cfg.activation)
    # small last layer: start close to uniform / zero-mean
    actor.weights[-1] *= 0.01
    vr = net_init([env.obs_dim, *cfg.hidden, 1], seed + 1, cfg.activation)
    vc = net_init([env.obs_dim, *cfg.hidden, 1], seed + 2, cfg.activation)
    log_std = None if env.discrete else np.full(env.action_dim, cfg.log_std_init)
    return PolicyAgent(actor, vr, vc, cfg.lambda_init, env.discrete, log_std)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- advantages ---------------------------------------------------------------------


def gae_advantages(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE over one trajectory; ``values`` has one extra bootstrap entry.

    Returns (advantages, value targets = advantages + V[:-1]).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(rewards) + 1:
        raise ValueError(f"need {len(rewards) + 1} values, got {len(values)}")
    deltas = rewards + gamma * values[1:] - values[:-1]
    adv = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values[:-1]


def lagrangian_advantage(adv_r, adv_c, lam: float):
    """A^R - lambda * A^C."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return np.asarray(adv_r) - lam * np.asarray(adv_c) if np.ndim(adv_r) else adv_r - lam * adv_c


def clipped_surrogate(ratio, adv, clip: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A) and its derivative in r."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    value = np.minimum(unclipped, clipped)
    active = unclipped <= clipped
    return value, np.where(active, adv, 0.0)


def multiplier_update(lam: float, mean_learned_cost: float, lr: float) -> float:
    """lambda <- max(0, lambda + lr * E[C_hat])."""
    if lr <= 0:
        raise ValueError("lr_lambda must be positive")
    return max(0.0, lam + lr * mean_learned_cost)


# -- rollout batches -----------------------------------------------------------------


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray  # int actions, or raw (unclipped) Gaussian samples
    logp_old: np.ndarray
    adv_r: np.ndarray
    adv_c: np.ndarray
    target_r: np.ndarray
    target_c: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


def build_batch(agent: PolicyAgent, trajs, step_costs, gamma: float, gae_lambda: float) -> RolloutBatch:
    """Flatten trajectories and compute GAE for the reward and learned-cost streams.

    ``step_costs`` holds the learned per-step costs (n_traj, T).  Episodes end at
    the fixed horizon, so the bootstrap value is 0.
    """
    obs, acts, logp, ar, ac, tr, tc = [], [], [], [], [], [], []
    for traj, c_hat in zip(trajs, step_costs):
        if traj.logp is None:
            raise ValueError("trajectory has no cached behaviour log-probabilities")
        vr, vc = agent.values(traj.states)
        a_r, t_r = gae_advantages(traj.rewards, np.append(vr, 0.0), gamma, gae_lambda)
        a_c, t_c = gae_advantages(c_hat, np.append(vc, 0.0), gamma, gae_lambda)
        obs.append(traj.states)
        acts.append(traj.actions if agent.discrete else traj.raw_actions)
        logp.append(traj.logp)
        ar.append(a_r)
        ac.append(a_c)
        tr.append(t_r)
        tc.append(t_c)
    cat = np.concatenate
    return RolloutBatch(cat(obs), cat(acts), cat(logp), cat(ar), cat(ac), cat(tr), cat(tc))


def _actor_logp(agent: PolicyAgent, obs, actions, return_cache=False):
    out, cache = net_forward(agent.actor, obs, return_cache=True)
    if agent.discrete:
        p = softmax(out)
        idx = np.arange(len(obs))
        logp = np.log(np.maximum(p[idx, actions.astype(np.int64)], 1e-300))
        return logp, (out, cache, p)
    std = np.exp(agent.log_std)
    z = (actions - out) / std
    logp = np.sum(-0.5 * z * z - agent.log_std - 0.5 * np.log(2 * np.pi), axis=1)
    return logp, (out, cache, z)


def _adam_vec(x, g, st, lr, b1=0.9, b2=0.999, eps=1e-8):
    st["step"] += 1
    st["m"] = b1 * st["m"] + (1 - b1) * g
    st["v"] = b2 * st["v"] + (1 - b2) * g * g
    mh = st["m"] / (1 - b1 ** st["step"])
    vh = st["v"] / (1 - b2 ** st["step"])
    return x - lr * mh / (np.sqrt(vh) + eps)


def _critic_step(net: Network, opt: AdamState, obs, target, lr) -> tuple[Network, AdamState, float]:
    out, cache = net_forward(net, obs, return_cache=True)
    diff = out[:, 0] - target
    loss = 0.5 * float(np.mean(diff**2))
    grads, _ = net_backward(net, cache, (diff / len(diff))[:, None])
    net, opt = adam_step(net, grads, opt, lr)
    return net, opt, loss


def ppo_update(agent: PolicyAgent, batch: RolloutBatch, cfg: PolicyConfig, rng: np.random.Generator,
               normalize: bool = True) -> tuple[PolicyAgent, dict]:
    """Clipped-surrogate ascent on the Lagrangian advantage plus critic regression."""
    agent = agent.copy()
    adv = lagrangian_advantage(batch.adv_r, batch.adv_c, agent.lam)
    if normalize and len(adv) > 1:
        sd = adv.std()
        adv = (adv - adv.mean()) / (sd if sd > 1e-8 else 1.0)
    n = len(batch)
    stats = {"policy_loss": 0.0, "value_loss_r": 0.0, "value_loss_c": 0.0, "clip_frac": 0.0}
    steps = 0
    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            obs, acts, a = batch.obs[idx], batch.actions[idx], adv[idx]
            logp, (out, cache, aux) = _actor_logp(agent, obs, acts)
            ratio = np.exp(logp - batch.logp_old[idx])
            surr, d_ratio = clipped_surrogate(ratio, a, cfg.clip)
            m = len(idx)
            # minimise -mean(surr) - entropy_coef * mean(H)
            d_logp = -(d_ratio * ratio) / m
            if agent.discrete:
                p = aux
                onehot = np.eye(p.shape[1])[acts.astype(np.int64)]
                up = d_logp[:, None] * (onehot - p)
                if cfg.entropy_coef > 0:
                    logp_all = np.log(np.maximum(p, 1e-300))
                    ent = -np.sum(p * logp_all, axis=1)
                    d_ent = -p * (logp_all + ent[:, None])
                    up -= cfg.entropy_coef * d_ent / m
            else:
                z = aux
                std = np.exp(agent.log_std)
                up = d_logp[:, None] * (z / std)
                g_ls = np.sum(d_logp[:, None] * (z * z - 1.0), axis=0)
                if cfg.entropy_coef > 0:
                    g_ls -= cfg.entropy_coef
                new_ls = _adam_vec(agent.log_std, g_ls, agent.opt_log_std, cfg.lr_theta)
                agent.log_std = np.clip(new_ls, LOG_STD_MIN, LOG_STD_MAX)
            grads, _ = net_backward(agent.actor, cache, up)
            agent.actor, agent.opt_actor = adam_step(agent.actor, grads, agent.opt_actor, cfg.lr_theta)
            agent.reward_critic, agent.opt_reward, lr_loss = _critic_step(
                agent.reward_critic, agent.opt_reward, obs, batch.target_r[idx], cfg.lr_theta)
            agent.cost_critic, agent.opt_cost, lc_loss = _critic_step(
                agent.cost_critic, agent.opt_cost, obs, batch.target_c[idx], cfg.lr_theta)
            pl = -float(np.mean(surr))
            if not np.isfinite(pl):
                raise NonFiniteError("non-finite policy loss")
            stats["policy_loss"] += pl
            stats["value_loss_r"] += lr_loss
            stats["value_loss_c"] += lc_loss
            stats["clip_frac"] += float(np.mean(np.abs(ratio - 1.0) > cfg.clip))
            steps += 1
    return agent, {k: v / max(steps, 1) for k, v in stats.items()}


# -- exact policy gradients on tabular MDPs ------------------------------------------------


def softmax_policy_table(theta: np.ndarray) -> np.ndarray:
    """Tabular softmax policy; ``theta`` has shape (S, A)."""
    return softmax(np.asarray(theta, dtype=np.float64))


def trajectory_scores(theta: np.ndarray, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """grad_theta log pi(tau) for each trajectory, flattened to (n_traj, S*A)."""
    pi = softmax_policy_table(theta)
    S, A = theta.shape
    n, T = states.shape
    score = np.zeros((n, S, A))
    rows = np.arange(n)
    for t in range(T):
        s, a = states[:, t], actions[:, t]
        score[rows, s, :] -= pi[s]
        score[rows, s, a] += 1.0
    return score.reshape(n, S * A)


def exact_cost_gradient(mdp, theta: np.ndarray, horizon: int, gamma: float):
    """Exact J^C and its theta-gradient by enumerating every trajectory."""
    from .envs import enumerate_trajectories

    pi = softmax_policy_table(theta)
    states, actions, prob = enumerate_trajectories(mdp, pi, horizon)
    disc = gamma ** np.arange(horizon)
    costs = mdp.cost[states, actions] @ disc
    score = trajectory_scores(theta, states, actions)
    return float(prob @ costs), (prob * costs) @ score


def reinforce_cost_gradient(mdp, theta: np.ndarray, horizon: int, gamma: float, n: int, rng):
    """Monte-Carlo REINFORCE estimate of grad J^C with per-coordinate standard errors."""
    from .envs import sample_tabular

    pi = softmax_policy_table(theta)
    states, actions = sample_tabular(mdp, pi, horizon, n, rng)
    costs = mdp.cost[states, actions] @ (gamma ** np.arange(horizon))
    g = costs[:, None] * trajectory_scores(theta, states, actions)
    return g.mean(axis=0), g.std(axis=0, ddof=1) / np.sqrt(n)
