"""Executable checks of the dead-zone analysis and the policy-gradient variance bound.

Each ``check_*`` function returns a ``Verdict`` that serialises to JSON.  The
scalar dynamics are the gradient-descent proxies

    F(c)    = c + eta * (1 - sigmoid(c))
    F_dz(c) = c + eta * (1 - sigmoid(c - delta))

applied to the learned cost of an unsafe trajectory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import TabularMDP, enumerate_trajectories
from .inference import sigmoid
from .policy import softmax_policy_table, trajectory_scores

MAX_REPORTED = 20


@dataclass
class Verdict:
    claim: str
    grid: dict
    passed: bool
    counterexamples: list = field(default_factory=list)
    margins: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def grad_safe(c_hat):
    """Gradient of the plain safety loss for an unsafe trajectory: -sigmoid(-C)."""
    c_hat = np.asarray(c_hat, dtype=np.float64)
    if not np.all(np.isfinite(c_hat)):
        raise ValueError("cost must be finite")
    return -sigmoid(-c_hat)


def grad_safe_dz(c_hat, delta):
    """Dead-zone counterpart: -sigmoid(delta - C)."""
    if np.any(np.asarray(delta) < 0):
        raise ValueError("delta must be >= 0")
    c_hat = np.asarray(c_hat, dtype=np.float64)
    if not np.all(np.isfinite(c_hat)):
        raise ValueError("cost must be finite")
    return -sigmoid(np.asarray(delta, dtype=np.float64) - c_hat)


def default_cost_grid() -> np.ndarray:
    return np.arange(-1000, 1001) / 100.0


def check_lemma1(c_grid=None, delta_grid=(0.1, 0.5, 1.0, 2.0)) -> Verdict:
    """grad_safe_dz(C, delta) < grad_safe(C) < 0 at every grid point.

    A delta of 0 is evaluated too but gives equality, so it is reported as a
    counterexample to the strict claim rather than silently skipped.
    """
    c = default_cost_grid() if c_grid is None else np.asarray(c_grid, dtype=np.float64)
    g = grad_safe(c)
    bad = []
    min_gap = np.inf
    for delta in delta_grid:
        gd = grad_safe_dz(c, delta)
        ok = (gd < g) & (g < 0)
        min_gap = min(min_gap, float(np.min(g - gd)))
        for i in np.flatnonzero(~ok)[:MAX_REPORTED]:
            bad.append({"c_hat": float(c[i]), "delta": float(delta), "grad_dz": float(gd[i]), "grad": float(g[i])})
        if not ok.all() and len(bad) >= MAX_REPORTED:
            break
    return Verdict(
        "gradient_dominance",
        {"c_min": float(c.min()), "c_max": float(c.max()), "n_c": int(len(c)), "deltas": [float(d) for d in delta_grid]},
        not bad, bad, {"min_gap": min_gap, "max_grad": float(np.max(g))},
    )


# -- scalar dynamics --------------------------------------------------------------------


@dataclass
class DynamicsTrace:
    c0: float
    eta: float
    delta: float
    steps: int
    plain: np.ndarray
    deadzone: np.ndarray


def step_plain(c, eta):
    return c + eta * (1.0 - sigmoid(c))


def step_deadzone(c, eta, delta):
    return c + eta * (1.0 - sigmoid(c - delta))


def simulate_dynamics(c0, eta: float, delta: float, steps: int) -> DynamicsTrace:
    """Iterate F and F_dz from a shared start; ``c0`` may be a scalar or an array."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    c0_arr = np.asarray(c0, dtype=np.float64)
    plain = np.empty((steps + 1,) + c0_arr.shape)
    dz = np.empty_like(plain)
    plain[0] = dz[0] = c0_arr
    for t in range(steps):
        plain[t + 1] = step_plain(plain[t], eta)
        dz[t + 1] = step_deadzone(dz[t], eta, delta)
    return DynamicsTrace(float(c0) if c0_arr.ndim == 0 else c0_arr, eta, delta, steps, plain, dz)


def check_deadzone_monotone(eta: float, delta: float, n_pairs: int = 10_000, seed: int = 0) -> tuple[int, list]:
    """Count sampled x1 < x2 with F_dz(x1) >= F_dz(x2); pairs cluster near delta where the slope is smallest."""
    rng = np.random.default_rng(seed)
    x1 = delta + rng.uniform(-10.0, 10.0, n_pairs)
    x1[: n_pairs // 2] = delta + rng.normal(0.0, 0.5, n_pairs // 2)
    gap = 10.0 ** rng.uniform(-4.0, 1.0, n_pairs)
    x2 = x1 + gap
    bad = np.flatnonzero(step_deadzone(x1, eta, delta) >= step_deadzone(x2, eta, delta))
    return len(bad), [{"x1": float(x1[i]), "x2": float(x2[i]), "eta": eta, "delta": delta} for i in bad[:MAX_REPORTED]]


def check_theorem1(c0s=(-5.0, 0.0, 5.0), etas=(0.1, 1.0, 3.9), deltas=(0.1, 1.0, 2.0), steps: int = 1000,
                   n_pairs: int = 10_000, seed: int = 0) -> Verdict:
    """C_dz_t > C_t for 1 <= t <= steps on the whole grid, and F_dz increasing for eta < 4."""
    if any(not 0 < e < 4 for e in etas):
        raise ValueError("the dominance argument needs 0 < eta < 4")
    bad = []
    min_gap = np.inf
    c0 = np.asarray(c0s, dtype=np.float64)
    for eta in etas:
        for delta in deltas:
            tr = simulate_dynamics(c0, eta, delta, steps)
            diff = tr.deadzone[1:] - tr.plain[1:]
            min_gap = min(min_gap, float(diff.min()))
            for t, j in zip(*np.nonzero(diff <= 0)):
                if len(bad) < MAX_REPORTED:
                    bad.append({"kind": "dominance", "c0": float(c0[j]), "eta": eta, "delta": delta, "t": int(t + 1)})
    mono_fail = 0
    for k, eta in enumerate(etas):
        for delta in deltas:
            n_bad, ex = check_deadzone_monotone(eta, delta, n_pairs, seed + k)
            mono_fail += n_bad
            bad += [{"kind": "monotonicity", **e} for e in ex][: max(0, MAX_REPORTED - len(bad))]
    return Verdict(
        "cost_dominance",
        {"c0": list(c0s), "eta": list(etas), "delta": list(deltas), "steps": steps, "monotone_pairs": n_pairs},
        not bad and mono_fail == 0, bad, {"min_gap": min_gap, "monotone_failures": mono_fail},
    )


def check_corollary1(population, eta: float = 0.5, delta: float = 1.0, steps: int = 200,
                     z_grid=None, n_z: int = 50) -> Verdict:
    """Tail dominance P(C_dz >= z) >= P(C >= z) over an evolved population.

    The default grid has ``n_z`` points strictly inside the pooled support.
    With delta > 0 the claim also needs strict inequality somewhere; with
    delta = 0 the tails must coincide everywhere.
    """
    pop = np.asarray(population, dtype=np.float64).ravel()
    if len(pop) < 1000:
        raise ValueError("population must have at least 1000 members")
    tr = simulate_dynamics(pop, eta, delta, steps)
    a, b = tr.plain[-1], tr.deadzone[-1]
    if z_grid is None:
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        z_grid = np.linspace(lo, hi, n_z + 2)[1:-1]
    z = np.asarray(z_grid, dtype=np.float64)
    tail_a = np.mean(a[None, :] >= z[:, None], axis=1)
    tail_b = np.mean(b[None, :] >= z[:, None], axis=1)
    bad = [{"z": float(z[i]), "tail_dz": float(tail_b[i]), "tail": float(tail_a[i])}
           for i in np.flatnonzero(tail_b < tail_a)[:MAX_REPORTED]]
    n_strict = int(np.sum(tail_b > tail_a))
    if delta > 0:
        passed = not bad and n_strict >= 1
    else:
        passed = bool(np.array_equal(tail_a, tail_b))
    return Verdict(
        "tail_dominance",
        {"population": len(pop), "eta": eta, "delta": delta, "steps": steps, "n_z": len(z)},
        passed, bad, {"strict_points": n_strict, "max_tail_gap": float(np.max(tail_b - tail_a))},
    )


# -- policy-gradient variance bound -------------------------------------------------------

MAX_ENUM_STATES, MAX_ENUM_ACTIONS, MAX_ENUM_HORIZON = 4, 3, 4


def tiny_chain_mdp(n_states: int = 3, n_actions: int = 2, seed: int = 0) -> TabularMDP:
    """Random transitions and costs on a small chain, start state 0."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    cost = rng.uniform(0.0, 1.0, (n_states, n_actions))
    reward = np.zeros((n_states, n_actions))
    start = np.zeros(n_states)
    start[0] = 1.0
    return TabularMDP(P, cost, reward, start)


def check_snr_bound(mdp: TabularMDP, theta: np.ndarray, horizon: int, gamma: float, cost=None) -> Verdict:
    """Cov(C, score_i)^2 <= Var(C) Var(score_i) per coordinate, by exact enumeration.

    ``cost`` is an optional (S, A) table standing in for a learned cost; the
    MDP's own cost is used otherwise.  Also checks E[score] = 0 and reports the
    norm form ||grad J||^2 <= Var(C) * sum_i Var(score_i).
    """
    S, A = mdp.cost.shape
    if S > MAX_ENUM_STATES or A > MAX_ENUM_ACTIONS or horizon > MAX_ENUM_HORIZON:
        raise ValueError(f"too large to enumerate: {S} states, {A} actions, horizon {horizon}")
    table = mdp.cost if cost is None else np.asarray(cost, dtype=np.float64)
    pi = softmax_policy_table(theta)
    states, actions, prob = enumerate_trajectories(mdp, pi, horizon)
    c = table[states, actions] @ (gamma ** np.arange(horizon))
    score = trajectory_scores(theta, states, actions)
    mean_c = prob @ c
    mean_score = prob @ score
    cov = prob @ ((c - mean_c)[:, None] * (score - mean_score))
    var_c = float(prob @ (c - mean_c) ** 2)
    var_score = prob @ (score - mean_score) ** 2
    grad = prob @ (c[:, None] * score)
    lhs, rhs = cov**2, var_c * var_score
    tol = 1e-12 * (1.0 + rhs)
    bad = [{"coord": int(i), "lhs": float(lhs[i]), "rhs": float(rhs[i])} for i in np.flatnonzero(lhs > rhs + tol)]
    zero_mean = float(np.max(np.abs(mean_score)))
    if zero_mean > 1e-12:
        bad.append({"coord": "mean_score", "max_abs": zero_mean})
    return Verdict(
        "policy_gradient_variance_bound",
        {"states": S, "actions": A, "horizon": horizon, "gamma": gamma, "n_traj": int(len(prob))},
        not bad, bad,
        {"min_margin": float(np.min(rhs - lhs)), "grad_norm_sq": float(grad @ grad),
         "norm_bound": float(var_c * var_score.sum()), "max_abs_mean_score": zero_mean,
         "prob_total": float(prob.sum()), "var_cost": var_c},
    )


def check_snr_bound_random(n_policies: int = 10, seed: int = 0, n_states: int = 3, n_actions: int = 2,
                           horizon: int = 3, gamma: float = 0.99) -> Verdict:
    """``check_snr_bound`` on random tabular-softmax policies over one random tiny chain."""
    rng = np.random.default_rng(seed)
    mdp = tiny_chain_mdp(n_states, n_actions, seed)
    runs = [check_snr_bound(mdp, rng.normal(size=(n_states, n_actions)), horizon, gamma) for _ in range(n_policies)]
    bad = [{"policy": k, **c} for k, v in enumerate(runs) for c in v.counterexamples]
    return Verdict(
        "policy_gradient_variance_bound",
        {**runs[0].grid, "policies": n_policies, "seed": seed},
        all(v.passed for v in runs), bad[:MAX_REPORTED],
        {"min_margin": min(v.margins["min_margin"] for v in runs),
         "max_abs_mean_score": max(v.margins["max_abs_mean_score"] for v in runs),
         "norm_form_holds": all(v.margins["grad_norm_sq"] <= v.margins["norm_bound"] + 1e-12 for v in runs)},
    )


def run_all(seed: int = 0, n_policies: int = 10) -> list[Verdict]:
    """The four claims at their default grids; used by the ``verify-theory`` command.

    The tail check carries its delta = 0 control in the same verdict.
    """
    rng = np.random.default_rng(seed)
    pop = rng.normal(size=1000)
    tail = check_corollary1(pop)
    control = check_corollary1(pop, delta=0.0)
    tail.passed = tail.passed and control.passed
    tail.margins["control_delta0_identical"] = control.passed
    tail.counterexamples += [{"control": True, **c} for c in control.counterexamples]
    return [check_lemma1(), check_theorem1(seed=seed), tail, check_snr_bound_random(n_policies, seed)]
