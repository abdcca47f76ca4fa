"""Preference dataset built from a ground-truth oracle standing in for annotators."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .envs import GaussianPolicy, TabularPolicy, Trajectory, UniformPolicy, env_config, rollout_batch, trajectory_hash

MU_VALUES = (0.0, 0.5, 1.0)


class BudgetExceededError(RuntimeError):
    """More preference queries requested than the budget allows."""


class ClassCollapseError(RuntimeError):
    """Could not obtain both safe and unsafe trajectories."""


@dataclass
class PreferenceRecord:
    traj_a: Trajectory
    traj_b: Trajectory
    mu_a: float
    mu_b: float
    eps_a: int
    eps_b: int
    source: str = "offline"
    iteration: int = -1

    def __post_init__(self):
        if self.mu_a not in MU_VALUES or self.mu_b not in MU_VALUES or self.mu_a + self.mu_b != 1.0:
            raise ValueError(f"invalid preference labels ({self.mu_a}, {self.mu_b})")
        if self.eps_a not in (0, 1) or self.eps_b not in (0, 1):
            raise ValueError(f"safety labels must be 0/1, got ({self.eps_a}, {self.eps_b})")


@dataclass
class PreferenceDataset:
    budget: int
    records: list[PreferenceRecord] = field(default_factory=list)
    queries: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def remaining(self) -> int:
        return self.budget - self.queries

    def extend(self, records) -> None:
        records = list(records)
        if self.queries + len(records) > self.budget:
            raise BudgetExceededError(
                f"{len(records)} new queries would exceed the budget "
                f"({self.queries} used of {self.budget})"
            )
        self.records.extend(records)
        self.queries += len(records)

    def snapshot(self) -> list[PreferenceRecord]:
        return list(self.records)

    def trajectories(self) -> list[Trajectory]:
        return [t for r in self.records for t in (r.traj_a, r.traj_b)]

    def safety_labels(self) -> np.ndarray:
        return np.array([e for r in self.records for e in (r.eps_a, r.eps_b)], dtype=np.int64)


def oracle_label_pair(traj_1: Trajectory, traj_2: Trajectory, d: float | None = None) -> tuple[float, float]:
    """Prefer the trajectory with the lower true (undiscounted) episode cost."""
    if len(traj_1) != len(traj_2):
        raise ValueError(f"cannot compare horizons {len(traj_1)} and {len(traj_2)}")
    c1, c2 = traj_1.episode_cost, traj_2.episode_cost
    if c1 < c2:
        return 1.0, 0.0
    if c1 > c2:
        return 0.0, 1.0
    return 0.5, 0.5


def oracle_label_safety(traj: Trajectory, d: float) -> int:
    """1 iff the undiscounted episode cost is at most ``d``."""
    if d < 0:
        raise ValueError("threshold must be non-negative")
    return int(traj.episode_cost <= d)


def label_pair(traj_a: Trajectory, traj_b: Trajectory, d: float, source: str = "offline", iteration: int = -1):
    mu_a, mu_b = oracle_label_pair(traj_a, traj_b, d)
    return PreferenceRecord(
        traj_a, traj_b, mu_a, mu_b,
        oracle_label_safety(traj_a, d), oracle_label_safety(traj_b, d),
        source, iteration,
    )


def inject_label_noise(record: PreferenceRecord, rate: float, rng: np.random.Generator) -> PreferenceRecord:
    """Swap the preference pair with probability ``rate``; flip each safety label likewise."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"noise rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return record
    u = rng.random(3)
    mu_a, mu_b = (record.mu_b, record.mu_a) if u[0] < rate else (record.mu_a, record.mu_b)
    eps_a = 1 - record.eps_a if u[1] < rate else record.eps_a
    eps_b = 1 - record.eps_b if u[2] < rate else record.eps_b
    return replace(record, mu_a=mu_a, mu_b=mu_b, eps_a=eps_a, eps_b=eps_b)


def default_behavior_policies(env) -> list:
    """Seeded mixture spanning cautious to reckless behaviour."""
    if env.discrete:
        policies = [UniformPolicy(env.n_actions)]
        for p_right in (0.2, 0.33, 0.45, 0.55, 0.7, 0.9):
            row = [(1 - p_right) / 2, (1 - p_right) / 2, p_right]
            policies.append(TabularPolicy(np.tile(row, (env.n_states, 1))))
        return policies

    def heading(gain):
        def fn(obs):
            rel = obs[:, 4:6]
            norm = np.maximum(np.linalg.norm(rel, axis=1, keepdims=True), 1e-6)
            return np.clip(gain * rel / norm, -1.0, 1.0)

        return fn

    policies = [GaussianPolicy(lambda obs: np.zeros((len(obs), 2)), log_std=0.0)]
    for gain, log_std in ((0.3, -0.5), (0.6, -0.7), (1.0, -1.0), (1.0, -2.0)):
        policies.append(GaussianPolicy(heading(gain), log_std=log_std))
    return policies


def collect_mixture(env, behavior_policies, n: int, rng: np.random.Generator) -> list[Trajectory]:
    """``n`` trajectories, each from a behaviour policy drawn uniformly at random."""
    if n == 0:
        return []
    choice = rng.integers(len(behavior_policies), size=n)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    out: list[Trajectory | None] = [None] * n
    for k, pol in enumerate(behavior_policies):
        idx = np.flatnonzero(choice == k)
        if len(idx):
            for i, tr in zip(idx, rollout_batch(env, pol, seeds[idx])):
                out[i] = tr
    return out


def build_offline_dataset(
    env,
    behavior_policies,
    n_pairs: int,
    d: float,
    seed: int,
    budget: int | None = None,
    dataset: PreferenceDataset | None = None,
    noise_rate: float = 0.0,
    max_attempts: int = 10,
) -> PreferenceDataset:
    """Roll out ``2 * n_pairs`` trajectories, pair them up and label with the oracle.

    Resamples (up to ``max_attempts`` times) until the batch contains both
    safe and unsafe trajectories.  Appends to ``dataset`` when given.
    """
    if dataset is None:
        dataset = PreferenceDataset(budget=n_pairs if budget is None else budget)
    if n_pairs < 0:
        raise ValueError("n_pairs must be non-negative")
    if dataset.queries + n_pairs > dataset.budget:
        raise BudgetExceededError(
            f"requesting {n_pairs} pairs with {dataset.remaining} of {dataset.budget} queries left"
        )
    if n_pairs == 0:
        return dataset
    if behavior_policies is None:
        behavior_policies = default_behavior_policies(env)
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        trajs = collect_mixture(env, behavior_policies, 2 * n_pairs, rng)
        eps = {oracle_label_safety(t, d) for t in trajs}
        if eps == {0, 1}:
            break
    else:
        raise ClassCollapseError(
            f"only safety class {eps} after {max_attempts} attempts; check the environment configuration"
        )
    records = [label_pair(trajs[2 * i], trajs[2 * i + 1], d) for i in range(n_pairs)]
    if noise_rate > 0:
        records = [inject_label_noise(r, noise_rate, rng) for r in records]
    dataset.extend(records)
    return dataset


def pair_online_batch(trajs, d: float, iteration: int, noise_rate: float = 0.0, rng=None) -> list[PreferenceRecord]:
    """Label consecutive on-policy rollouts (0,1), (2,3), ... as online pairs."""
    records = [label_pair(trajs[i], trajs[i + 1], d, "online", iteration) for i in range(0, len(trajs) - 1, 2)]
    if noise_rate > 0:
        records = [inject_label_noise(r, noise_rate, rng) for r in records]
    return records


# -- files ----------------------------------------------------------------------------


def save_dataset(dataset: PreferenceDataset, directory, env=None, seed: int | None = None) -> Path:
    """Write ``trajectories.jsonl``, ``records.jsonl`` and ``manifest.json``.

    Records point at trajectories by content hash.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seen = {}
    for tr in dataset.trajectories():
        seen.setdefault(trajectory_hash(tr), tr)
    with open(directory / "trajectories.jsonl", "w") as fh:
        for h, tr in seen.items():
            d = tr.to_dict()
            d["hash"] = h
            fh.write(json.dumps(d, separators=(",", ":")) + "\n")
    with open(directory / "records.jsonl", "w") as fh:
        for r in dataset.records:
            fh.write(json.dumps({
                "traj_a": trajectory_hash(r.traj_a), "traj_b": trajectory_hash(r.traj_b),
                "mu_a": r.mu_a, "mu_b": r.mu_b, "eps_a": r.eps_a, "eps_b": r.eps_b,
                "source": r.source, "iteration": r.iteration,
            }) + "\n")
    manifest = {"schema_version": 1, "budget": dataset.budget, "queries": dataset.queries,
                "n_records": len(dataset), "seed": seed}
    if env is not None:
        cfg = json.dumps(env_config(env), sort_keys=True, default=list)
        manifest["env_config"] = env_config(env)
        manifest["env_config_hash"] = hashlib.sha256(cfg.encode()).hexdigest()[:16]
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list))
    return directory


def load_dataset(directory) -> PreferenceDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    trajs = {}
    with open(directory / "trajectories.jsonl") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                trajs[d["hash"]] = Trajectory.from_dict(d)
    records = []
    with open(directory / "records.jsonl") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                records.append(PreferenceRecord(
                    trajs[d["traj_a"]], trajs[d["traj_b"]], d["mu_a"], d["mu_b"],
                    d["eps_a"], d["eps_b"], d["source"], d["iteration"],
                ))
    return PreferenceDataset(budget=manifest["budget"], records=records, queries=manifest["queries"])
