"""Synthetic constrained MDPs with heavy-tailed episode costs.

Two environments are provided:

``ChainHazard``
    A 1-D chain with a contiguous block of hazard states between the start
    and the goal.  Hazard states are *sticky*: with probability ``p_stick`` the
    agent stays put whatever it does, so a single entry can cascade into a long
    run of violations.  Small enough for exact dynamic programming.

``PointHazard``
    A 2-D point mass that has to reach a goal while avoiding circular hazards.

Both use fixed-length episodes and binary per-step costs.  Environments are
immutable descriptions; all mutable episode data (position, step counter and
the random stream) lives in the state object returned by ``reset``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LEFT, STAY, RIGHT = 0, 1, 2


@dataclass
class Trajectory:
    states: np.ndarray  # (T, obs_dim) observation features of s_t
    actions: np.ndarray  # (T,) ints for discrete envs, (T, act_dim) otherwise
    rewards: np.ndarray
    costs: np.ndarray  # true per-step costs in {0, 1}
    seed: int
    terminal: bool = True
    logp: np.ndarray | None = None  # behaviour log-probabilities (set by rollouts)
    raw_actions: np.ndarray | None = None  # unclipped Gaussian samples

    def __post_init__(self):
        n = len(self.rewards)
        if len(self.states) != n or len(self.actions) != n or len(self.costs) != n:
            raise ValueError("trajectory arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_cost(self) -> float:
        """Undiscounted number of violations; used for safety labels."""
        return float(np.sum(self.costs))

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))

    def discounted_cost(self, gamma: float) -> float:
        return cumulative_cost(self, gamma)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "terminal": bool(self.terminal),
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "costs": self.costs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        actions = np.asarray(d["actions"])
        if actions.dtype.kind == "f" and actions.ndim == 1:
            actions = actions.astype(np.int64)
        return cls(
            states=np.asarray(d["states"], dtype=np.float64),
            actions=actions,
            rewards=np.asarray(d["rewards"], dtype=np.float64),
            costs=np.asarray(d["costs"], dtype=np.float64),
            seed=int(d["seed"]),
            terminal=bool(d.get("terminal", True)),
        )


def cumulative_cost(traj: Trajectory, gamma: float = 1.0) -> float:
    """sum_t gamma^t * cost_t."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    costs = np.asarray(traj.costs if isinstance(traj, Trajectory) else traj, dtype=np.float64)
    return float(np.dot(gamma ** np.arange(len(costs)), costs))


def _check_common(gamma, threshold, horizon):
    errors = []
    if not 0.0 < gamma < 1.0:
        errors.append(f"gamma must lie in (0, 1), got {gamma}")
    if threshold < 0:
        errors.append(f"threshold must be >= 0, got {threshold}")
    if horizon < 1:
        errors.append(f"horizon must be >= 1, got {horizon}")
    return errors


# -- ChainHazard ---------------------------------------------------------------


@dataclass
class ChainState:
    pos: int
    t: int
    rng: np.random.Generator = field(repr=False)


@dataclass(frozen=True)
class ChainHazard:
    """Chain of ``n_states`` cells; actions are left / stay / right.

    The agent starts in cell 0.  Cells ``hazard_start .. hazard_start+hazard_len-1``
    cost 1 per step and are sticky.  In the cells before the hazard block the
    floor is slippery: with probability ``p_slip`` the agent slides one cell
    back towards the start whatever it does, so undirected behaviour rarely
    reaches the hazard while a determined policy still crosses it.  Every step
    spent in the last cell earns ``goal_reward``, and every step earns
    ``progress_reward * pos / (n_states - 1)`` so that moving right pays off
    before the goal is ever seen.
    """

    n_states: int = 8
    hazard_start: int = 5
    hazard_len: int = 2
    p_stick: float = 0.85
    p_slip: float = 0.2
    goal_reward: float = 0.0
    progress_reward: float = 0.01
    threshold: float = 2.0
    gamma: float = 0.99
    horizon: int = 64

    discrete = True
    n_actions = 3

    def __post_init__(self):
        errors = _check_common(self.gamma, self.threshold, self.horizon)
        if self.n_states < 2:
            errors.append("n_states must be >= 2")
        if self.hazard_len < 1:
            errors.append("hazard block must be non-empty")
        if self.hazard_start <= 0:
            errors.append("hazard block must exclude the start state 0")
        if self.hazard_start + self.hazard_len > self.n_states:
            errors.append("hazard block extends past the end of the chain")
        if not 0.0 <= self.p_stick < 1.0:
            errors.append(f"p_stick must lie in [0, 1), got {self.p_stick}")
        if not 0.0 <= self.p_slip < 1.0:
            errors.append(f"p_slip must lie in [0, 1), got {self.p_slip}")
        if errors:
            raise ValueError("invalid ChainHazard: " + "; ".join(errors))

    @property
    def obs_dim(self) -> int:
        return self.n_states

    @property
    def action_dim(self) -> int:
        return self.n_actions

    @property
    def goal(self) -> int:
        return self.n_states - 1

    def is_hazard(self, pos: int) -> bool:
        return self.hazard_start <= pos < self.hazard_start + self.hazard_len

    def cost_vector(self) -> np.ndarray:
        return np.array([1.0 if self.is_hazard(s) else 0.0 for s in range(self.n_states)])

    def reward_vector(self) -> np.ndarray:
        r = self.progress_reward * np.arange(self.n_states) / (self.n_states - 1)
        r[self.goal] += self.goal_reward
        return r

    def transition_tensor(self) -> np.ndarray:
        """P[s, a, s'] including stickiness."""
        S = self.n_states
        P = np.zeros((S, self.n_actions, S))
        for s in range(S):
            for a in range(self.n_actions):
                nxt = min(max(s + a - 1, 0), S - 1)
                if self.is_hazard(s):
                    P[s, a, s] += self.p_stick
                    P[s, a, nxt] += 1.0 - self.p_stick
                elif s < self.hazard_start:
                    P[s, a, max(s - 1, 0)] += self.p_slip
                    P[s, a, nxt] += 1.0 - self.p_slip
                else:
                    P[s, a, nxt] = 1.0
        return P

    def simulate_costs(self, table, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised episodes under a tabular policy; returns per-step costs and rewards, each (n, T).

        Applies the same rules as ``step`` to all ``n`` episodes at once (one
        shared random stream), without going through ``transition_tensor``.
        """
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (self.n_states, self.n_actions):
            raise ValueError(f"policy table must have shape {(self.n_states, self.n_actions)}")
        pos = np.zeros(n, dtype=np.int64)
        costs = np.zeros((n, self.horizon))
        rewards = np.zeros((n, self.horizon))
        hazard = self.cost_vector() > 0
        reward = self.reward_vector()
        cum = np.cumsum(table, axis=1)
        for t in range(self.horizon):
            costs[:, t] = hazard[pos]
            rewards[:, t] = reward[pos]
            a = np.minimum((cum[pos] > rng.random(n)[:, None]).argmax(axis=1), self.n_actions - 1)
            moved = np.clip(pos + a - 1, 0, self.n_states - 1)
            u = rng.random(n)
            stick = hazard[pos] & (u < self.p_stick)
            slip = (pos < self.hazard_start) & (u < self.p_slip)
            pos = np.where(stick, pos, np.where(slip, np.maximum(pos - 1, 0), moved))
        return costs, rewards

    def to_tabular(self) -> "TabularMDP":
        start = np.zeros(self.n_states)
        start[0] = 1.0
        cost = np.repeat(self.cost_vector()[:, None], self.n_actions, axis=1)
        reward = np.repeat(self.reward_vector()[:, None], self.n_actions, axis=1)
        return TabularMDP(self.transition_tensor(), cost, reward, start)

    def reset(self, seed: int) -> ChainState:
        return ChainState(0, 0, np.random.default_rng(seed))

    def observe(self, state: ChainState) -> np.ndarray:
        obs = np.zeros(self.n_states)
        obs[state.pos] = 1.0
        return obs

    def action_features(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.int64)
        return np.eye(self.n_actions)[actions]

    def step(self, state: ChainState, action) -> tuple[ChainState, float, float, bool]:
        a = int(action)
        if a != action or not 0 <= a < self.n_actions:
            raise ValueError(f"action {action!r} is not one of 0..{self.n_actions - 1}")
        pos = state.pos
        cost = 1.0 if self.is_hazard(pos) else 0.0
        reward = self.progress_reward * pos / (self.n_states - 1)
        if pos == self.goal:
            reward += self.goal_reward
        if self.is_hazard(pos) and state.rng.random() < self.p_stick:
            nxt = pos
        elif pos < self.hazard_start and state.rng.random() < self.p_slip:
            nxt = max(pos - 1, 0)
        else:
            nxt = min(max(pos + a - 1, 0), self.n_states - 1)
        t = state.t + 1
        return ChainState(nxt, t, state.rng), reward, cost, t >= self.horizon


# -- PointHazard ---------------------------------------------------------------


@dataclass
class PointState:
    pos: np.ndarray
    vel: np.ndarray
    goal: np.ndarray
    t: int
    rng: np.random.Generator = field(repr=False)


@dataclass(frozen=True)
class PointHazard:
    """Point mass in the square [-arena, arena]^2 with circular hazards.

    Actions are accelerations in [-1, 1]^2.  Reward is the per-step reduction
    of the distance to the goal plus ``goal_bonus`` on arrival, after which the
    goal is moved to a fresh random location.  Each step that starts inside a
    hazard circle costs 1.
    """

    arena: float = 1.0
    hazards: tuple = ((0.0, 0.0, 0.35), (-0.55, 0.45, 0.2), (0.5, -0.45, 0.25))
    goal_radius: float = 0.15
    goal_bonus: float = 1.0
    dt: float = 0.1
    accel: float = 2.0
    damping: float = 0.85
    max_speed: float = 1.0
    threshold: float = 5.0
    gamma: float = 0.99
    horizon: int = 64

    discrete = False
    act_dim = 2

    def __post_init__(self):
        errors = _check_common(self.gamma, self.threshold, self.horizon)
        if self.arena <= 0:
            errors.append("arena must be positive")
        for cx, cy, r in self.hazards:
            if r <= 0:
                errors.append("hazard radius must be positive")
            if abs(cx) + r > self.arena or abs(cy) + r > self.arena:
                errors.append(f"hazard at ({cx}, {cy}) leaves the arena")
        if errors:
            raise ValueError("invalid PointHazard: " + "; ".join(errors))

    @property
    def obs_dim(self) -> int:
        return 6 + 2 * len(self.hazards)

    @property
    def action_dim(self) -> int:
        return self.act_dim

    def in_hazard(self, pos) -> bool:
        return any(np.hypot(pos[0] - cx, pos[1] - cy) < r for cx, cy, r in self.hazards)

    def _free_point(self, rng) -> np.ndarray:
        lim = 0.9 * self.arena
        while True:
            p = rng.uniform(-lim, lim, size=2)
            if not any(np.hypot(p[0] - cx, p[1] - cy) < r + self.goal_radius for cx, cy, r in self.hazards):
                return p

    def reset(self, seed: int) -> PointState:
        rng = np.random.default_rng(seed)
        pos = self._free_point(rng)
        goal = self._free_point(rng)
        return PointState(pos, np.zeros(2), goal, 0, rng)

    def observe(self, state: PointState) -> np.ndarray:
        rel = [np.array([cx, cy]) - state.pos for cx, cy, _ in self.hazards]
        return np.concatenate([state.pos, state.vel, state.goal - state.pos, *rel])

    def action_features(self, actions) -> np.ndarray:
        return np.asarray(actions, dtype=np.float64).reshape(-1, self.act_dim)

    def step(self, state: PointState, action) -> tuple[PointState, float, float, bool]:
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,) or not np.isfinite(a).all() or np.any(np.abs(a) > 1.0):
            raise ValueError(f"action {action!r} is outside the box [-1, 1]^2")
        cost = 1.0 if self.in_hazard(state.pos) else 0.0
        vel = self.damping * state.vel + self.dt * self.accel * a
        speed = np.hypot(*vel)
        if speed > self.max_speed:
            vel = vel * (self.max_speed / speed)
        pos = state.pos + self.dt * vel
        hit = np.abs(pos) > self.arena
        pos = np.clip(pos, -self.arena, self.arena)
        vel = np.where(hit, 0.0, vel)
        d_old = np.hypot(*(state.goal - state.pos))
        d_new = np.hypot(*(state.goal - pos))
        reward = d_old - d_new
        goal = state.goal
        if d_new < self.goal_radius:
            reward += self.goal_bonus
            goal = self._free_point(state.rng)
        t = state.t + 1
        return PointState(pos, vel, goal, t, state.rng), float(reward), cost, t >= self.horizon


def env_reset(env, seed: int):
    return env.reset(seed)


def env_step(env, state, action):
    return env.step(state, action)


def make_env(name: str, **params):
    envs = {"chain": ChainHazard, "point": PointHazard}
    if name not in envs:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(envs)}")
    if name == "point" and "hazards" in params:
        params["hazards"] = tuple(tuple(h) for h in params["hazards"])
    return envs[name](**params)


def env_config(env) -> dict:
    d = asdict(env)
    d["name"] = "chain" if isinstance(env, ChainHazard) else "point"
    return d


# -- policies usable by rollouts -----------------------------------------------


class TabularPolicy:
    """Fixed action distribution per ChainHazard cell (rows of ``table``)."""

    kind = "categorical"

    def __init__(self, table):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0):
            raise ValueError("tabular policy rows must be probability vectors")
        self.table = table

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return self.table[np.argmax(obs, axis=1)]


class UniformPolicy:
    kind = "categorical"

    def __init__(self, n_actions: int = 3):
        self.n_actions = n_actions

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return np.full((len(obs), self.n_actions), 1.0 / self.n_actions)


class GaussianPolicy:
    """Diagonal Gaussian from a callable mapping obs -> means; fixed log-std."""

    kind = "gaussian"

    def __init__(self, mean_fn, log_std: float = 0.0, act_dim: int = 2):
        self.mean_fn = mean_fn
        self.log_std = np.full(act_dim, float(log_std))

    def mean_log_std(self, obs: np.ndarray):
        return self.mean_fn(obs), self.log_std


def _sample_actions(policy, obs: np.ndarray, rngs):
    if policy.kind == "categorical":
        p = policy.probs(obs)
        u = np.array([r.random() for r in rngs])
        a = (np.cumsum(p, axis=1) > u[:, None]).argmax(axis=1)
        # guard against cumsum rounding slightly below 1
        a = np.minimum(a, p.shape[1] - 1)
        logp = np.log(np.maximum(p[np.arange(len(a)), a], 1e-300))
        return a, a, logp
    mean, log_std = policy.mean_log_std(obs)
    std = np.exp(log_std)
    z = np.stack([r.standard_normal(mean.shape[1]) for r in rngs])
    raw = mean + std * z
    logp = np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi), axis=1)
    return np.clip(raw, -1.0, 1.0), raw, logp


def rollout_batch(env, policy, seeds) -> list[Trajectory]:
    """Roll out one fixed-length episode per seed, stepping all of them together.

    Trajectory ``i`` depends only on ``seeds[i]`` so the result matches
    ``rollout(env, policy, seeds[i])`` exactly.
    """
    seeds = [int(s) for s in seeds]
    states = [env.reset(s) for s in seeds]
    n, T = len(seeds), env.horizon
    obs_buf = np.zeros((T, n, env.obs_dim))
    act_buf, raw_buf = [], []
    logp_buf = np.zeros((T, n))
    rew_buf = np.zeros((T, n))
    cost_buf = np.zeros((T, n))
    rngs = [s.rng for s in states]
    for t in range(T):
        obs = np.stack([env.observe(s) for s in states])
        obs_buf[t] = obs
        act, raw, logp = _sample_actions(policy, obs, rngs)
        act_buf.append(act)
        raw_buf.append(raw)
        logp_buf[t] = logp
        for i in range(n):
            states[i], rew_buf[t, i], cost_buf[t, i], _ = env.step(states[i], act[i])
    acts = np.stack(act_buf)
    raws = np.stack(raw_buf)
    out = []
    for i in range(n):
        out.append(
            Trajectory(
                states=obs_buf[:, i].copy(),
                actions=acts[:, i].copy(),
                rewards=rew_buf[:, i].copy(),
                costs=cost_buf[:, i].copy(),
                seed=seeds[i],
                terminal=True,
                logp=logp_buf[:, i].copy(),
                raw_actions=None if env.discrete else raws[:, i].copy(),
            )
        )
    return out


def rollout(env, policy, seed: int) -> Trajectory:
    return rollout_batch(env, policy, [seed])[0]


# -- tabular machinery (exact oracles) -------------------------------------------


@dataclass
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    cost: np.ndarray  # (S, A)
    reward: np.ndarray  # (S, A)
    start: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def exact_expected_cost(chain, policy, gamma: float, horizon: int) -> float:
    """E_pi[sum_{t<horizon} gamma^t c(s_t, a_t)] by backward induction."""
    mdp = chain.to_tabular() if hasattr(chain, "to_tabular") else chain
    if not isinstance(mdp, TabularMDP):
        raise TypeError("exact_expected_cost needs a finite (tabular) environment")
    table = policy.table if isinstance(policy, TabularPolicy) else np.asarray(policy, dtype=np.float64)
    if table.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy table must have shape {(mdp.n_states, mdp.n_actions)}")
    step_cost = np.sum(table * mdp.cost, axis=1)
    P_pi = np.einsum("sa,sap->sp", table, mdp.P)
    V = np.zeros(mdp.n_states)
    for _ in range(horizon):
        V = step_cost + gamma * P_pi @ V
    return float(mdp.start @ V)


def enumerate_trajectories(mdp: TabularMDP, table: np.ndarray, horizon: int, max_count: int = 200_000):
    """Every positive-probability trajectory as arrays (states, actions, prob).

    ``states`` and ``actions`` have shape (n, horizon); the transition out of the
    last state does not matter for costs or scores and is summed out.
    """
    S, A = mdp.n_states, mdp.n_actions
    table = np.asarray(table, dtype=np.float64)
    if (S * A) ** horizon > max_count:
        raise ValueError("state/action space too large to enumerate")
    paths = [((int(s),), (), float(mdp.start[s])) for s in np.flatnonzero(mdp.start)]
    for t in range(horizon):
        nxt = []
        for states, actions, p in paths:
            s = states[-1]
            for a in np.flatnonzero(table[s]):
                q = p * table[s, a]
                if t == horizon - 1:
                    nxt.append((states, actions + (int(a),), q))
                    continue
                for s2 in np.flatnonzero(mdp.P[s, a]):
                    nxt.append((states + (int(s2),), actions + (int(a),), q * mdp.P[s, a, s2]))
        paths = nxt
    states = np.array([x[0] for x in paths], dtype=np.int64).reshape(len(paths), horizon)
    actions = np.array([x[1] for x in paths], dtype=np.int64).reshape(len(paths), horizon)
    return states, actions, np.array([x[2] for x in paths])


def sample_tabular(mdp: TabularMDP, table: np.ndarray, horizon: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised sampling of ``n`` trajectories; returns (states, actions), each (n, horizon)."""
    S, A = mdp.n_states, mdp.n_actions
    states = np.zeros((n, horizon), dtype=np.int64)
    actions = np.zeros((n, horizon), dtype=np.int64)
    s = rng.choice(S, size=n, p=mdp.start)
    cum_pi = np.cumsum(table, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    for t in range(horizon):
        states[:, t] = s
        a = np.minimum((cum_pi[s] > rng.random(n)[:, None]).argmax(axis=1), A - 1)
        actions[:, t] = a
        s = np.minimum((cum_P[s, a] > rng.random(n)[:, None]).argmax(axis=1), S - 1)
    return states, actions


# -- trajectory dumps ---------------------------------------------------------------


def trajectory_hash(traj: Trajectory) -> str:
    payload = json.dumps(traj.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def dump_trajectories(trajs, path) -> None:
    with open(path, "w") as fh:
        for tr in trajs:
            d = tr.to_dict()
            d["hash"] = trajectory_hash(tr)
            fh.write(json.dumps(d, separators=(",", ":")) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    with open(Path(path)) as fh:
        return [Trajectory.from_dict(json.loads(line)) for line in fh if line.strip()]
