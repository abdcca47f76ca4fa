"""End-to-end loop: pretrain the cost model, then alternate PPO-Lagrangian updates
with periodic online labelling, dead-zone calibration and cost-model finetuning."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .envs import make_env, rollout_batch
from .inference import (
    CostModel,
    CostTrainConfig,
    TrainHistory,
    calibrate_deadzone,
    empirical_violation_rate,
    encode_trajectories,
    finetune_online,
    predicted_violation_rate,
    pretrain_offline,
    traj_cost_batch,
)
from .metrics import w2_distance
from .nn import NonFiniteError, net_forward, save_checkpoint
from .policy import PolicyConfig, build_batch, make_agent, multiplier_update, ppo_update
from .preferences import (
    BudgetExceededError,
    PreferenceDataset,
    build_offline_dataset,
    collect_mixture,
    default_behavior_policies,
    pair_online_batch,
)

log = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "iteration", "return", "true_cost", "true_cost_disc", "learned_cost", "lambda", "delta",
    "p_vio", "p_hat_vio", "w2_batch", "finetuned", "queries",
]


@dataclass
class ExperimentReport:
    seed: int
    threshold: float
    rows: list = field(default_factory=list)
    pretrain: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def window_mean(self, name: str, where: str = "final") -> float:
        """Mean of a column over the last 10% of iterations, or a 10% window at mid-training."""
        n = len(self.rows)
        if n == 0:
            return float("nan")
        w = max(1, n // 10)
        if where == "final":
            lo, hi = n - w, n
        elif where == "mid":
            lo = max(0, n // 2 - w // 2)
            hi = lo + w
        else:
            raise ValueError(f"unknown window {where!r}")
        return float(np.mean(self.column(name)[lo:hi]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in REPORT_COLUMNS})

    def to_json(self) -> dict:
        return {"schema_version": 1, "seed": self.seed, "threshold": self.threshold, "pretrain": self.pretrain,
                "summary": self.summary, "flags": self.flags, "config": self.config}

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.write_csv(directory / "report.csv")
        (directory / "summary.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "ExperimentReport":
        directory = Path(directory)
        meta = json.loads((directory / "summary.json").read_text())
        rows = []
        with open(directory / "report.csv") as fh:
            for r in csv.DictReader(fh):
                rows.append({k: float(v) for k, v in r.items()})
        return cls(meta["seed"], meta["threshold"], rows, meta["pretrain"], meta["summary"], meta["flags"],
                   meta.get("config", {}))


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def effective_cost_config(cfg) -> CostTrainConfig:
    """Cost-model settings after applying the ablation switches."""
    cm = cfg.cost_model
    if cfg.ablation == "plain_bt":
        cm = replace(cm, delta=0.0, zeta=0.0)
    return cm


def prepare_offline(cfg, seed: int, env=None):
    """Build the offline dataset and pretrain a cost model for one seed."""
    env = env or make_env(cfg.env.name, **cfg.env.params)
    cm = replace(effective_cost_config(cfg), seed=seed)
    pref = cfg.preferences
    data_seed = int(np.random.SeedSequence(seed).generate_state(1)[0])
    dataset = build_offline_dataset(
        env, default_behavior_policies(env), pref.offline_pairs, env.threshold, data_seed,
        budget=pref.budget, noise_rate=pref.noise_rate,
    )
    model, opt, history = pretrain_offline(dataset, env, cm)
    return env, dataset, model, opt, history


def evaluation_set(env, seed: int, n: int):
    """Fixed trajectories from the behaviour mixture, used to compare cost distributions."""
    return collect_mixture(env, default_behavior_policies(env), n, np.random.default_rng([seed, 7919]))


def cost_alignment(model: CostModel, trajs, mode: str = "raw") -> float:
    """W2 between learned costs and ground-truth discounted costs on ``trajs``."""
    c_hat = traj_cost_batch(model, trajs)
    truth = np.array([t.discounted_cost(model.gamma) for t in trajs])
    return w2_distance(c_hat, truth, normalize=(mode == "zscore"))


def save_agent_checkpoint(agent, model: CostModel, directory, iteration: int) -> Path:
    directory = Path(directory) / f"iter_{iteration:05d}"
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"iteration": iteration, "lambda": agent.lam}
    if agent.log_std is not None:
        meta["log_std"] = agent.log_std.tolist()
    save_checkpoint(agent.actor, directory / "actor", meta)
    save_checkpoint(agent.reward_critic, directory / "reward_critic", meta)
    save_checkpoint(agent.cost_critic, directory / "cost_critic", meta)
    model.save(directory / "cost_model", {"iteration": iteration})
    return directory


def run_pbcrl(cfg, seed: int, prepared=None, checkpoint_dir=None) -> ExperimentReport:
    """Pretrain, then N iterations of collect / (every K: label, calibrate, finetune) / update.

    With ``checkpoint_dir`` set, networks are written every
    ``cfg.policy.checkpoint_every`` iterations.
    """
    env = make_env(cfg.env.name, **cfg.env.params)
    pc: PolicyConfig = cfg.policy
    cm = replace(effective_cost_config(cfg), seed=seed)
    if prepared is None:
        prepared = prepare_offline(cfg, seed, env)
    _, dataset, model, opt, history = prepared
    dataset = PreferenceDataset(dataset.budget, list(dataset.records), dataset.queries)
    model, opt = model.copy(), opt.copy()
    d = env.threshold
    calibrate = cfg.ablation != "plain_bt"
    finetune = cfg.ablation != "offline_only"

    r_roll, r_ppo, r_noise, r_ft, r_eval = _streams(seed, 5)
    agent = make_agent(env, pc, int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]) % (2**31))
    report = ExperimentReport(seed, d, config=cfg.to_dict() if hasattr(cfg, "to_dict") else {})
    report.pretrain = {
        "best_epoch": history.best_epoch, "holdout_accuracy": history.best_accuracy,
        "epochs_run": len(history.rows), "offline_pairs": len(dataset), "delta": model.delta,
    }
    if pc.iterations and pc.finetune_interval > pc.iterations:
        report.flags.append("finetune_interval_exceeds_iterations")
    ft_history = TrainHistory()
    budget_flagged = False
    p_hat_last = float("nan")

    for n in range(pc.iterations):
        finetuned = 0
        if finetune and n % pc.finetune_interval == 0:
            n_pairs = min(pc.online_pairs, dataset.remaining)
            if n_pairs <= 0:
                if not budget_flagged:
                    report.flags.append(f"budget_exhausted_at_iteration_{n}")
                    budget_flagged = True
            else:
                seeds = r_ft.integers(0, 2**31 - 1, size=2 * n_pairs)
                online = rollout_batch(env, agent, seeds)
                batch = pair_online_batch(online, d, n, cfg.preferences.noise_rate, r_noise)
                trajs = [t for r in batch for t in (r.traj_a, r.traj_b)]
                eps = [e for r in batch for e in (r.eps_a, r.eps_b)]
                p_hat_last = predicted_violation_rate(traj_cost_batch(model, trajs))
                if calibrate:
                    model.delta = calibrate_deadzone(model.delta, p_hat_last, empirical_violation_rate(eps),
                                                     pc.lr_delta)
                try:
                    model, opt = finetune_online(model, opt, batch, dataset, cm, r_ft, ft_history)
                except BudgetExceededError:  # pragma: no cover - n_pairs is clipped above
                    report.flags.append(f"budget_exceeded_at_iteration_{n}")
                finetuned = 1

        seeds = r_roll.integers(0, 2**31 - 1, size=pc.rollouts_per_iter)
        trajs = rollout_batch(env, agent, seeds)
        x = encode_trajectories(model, trajs)
        step_c = net_forward(model.net, x.reshape(-1, x.shape[-1]))[:, 0].reshape(x.shape[:2])
        c_hat = step_c @ (model.gamma ** np.arange(x.shape[1]))
        batch = build_batch(agent, trajs, step_c, env.gamma, pc.gae_lambda)
        agent, _ = ppo_update(agent, batch, pc, r_ppo)
        agent.lam = multiplier_update(agent.lam, float(np.mean(c_hat)), pc.lr_lambda)
        if not (np.all(np.isfinite(c_hat)) and agent.actor.is_finite()):
            raise NonFiniteError(f"non-finite training state at iteration {n}")

        true_c = np.array([t.episode_cost for t in trajs])
        true_disc = np.array([t.discounted_cost(env.gamma) for t in trajs])
        report.rows.append({
            "iteration": n,
            "return": float(np.mean([t.episode_return for t in trajs])),
            "true_cost": float(true_c.mean()),
            "true_cost_disc": float(true_disc.mean()),
            "learned_cost": float(c_hat.mean()),
            "lambda": agent.lam,
            "delta": model.delta,
            "p_vio": float(np.mean(true_c > d)),
            "p_hat_vio": float(np.mean(c_hat > 0)),
            "w2_batch": w2_distance(c_hat, true_disc),
            "finetuned": finetuned,
            "queries": dataset.queries,
        })
        if checkpoint_dir is not None and pc.checkpoint_every and (n + 1) % pc.checkpoint_every == 0:
            save_agent_checkpoint(agent, model, checkpoint_dir, n + 1)

    summary = {"iterations": pc.iterations, "queries": dataset.queries, "final_delta": model.delta,
               "final_lambda": agent.lam}
    if pc.iterations:
        summary.update({
            "final_true_cost": report.window_mean("true_cost", "final"),
            "final_return": report.window_mean("return", "final"),
            "mid_true_cost": report.window_mean("true_cost", "mid"),
            "mid_return": report.window_mean("return", "mid"),
        })
        summary["bias"] = abs(summary["final_true_cost"] - d)
        n_eval = cfg.evaluation.n_eval
        if n_eval >= 2:
            ev = rollout_batch(env, agent, r_eval.integers(0, 2**31 - 1, size=n_eval))
            summary["w2_policy"] = cost_alignment(model, ev, "raw")
            summary["w2_policy_zscore"] = cost_alignment(model, ev, "zscore")
            # same trajectories for every configuration of a seed, so models are compared on equal inputs
            ref = evaluation_set(env, seed, n_eval)
            summary["w2_reference"] = cost_alignment(model, ref, "raw")
            summary["w2_reference_zscore"] = cost_alignment(model, ref, "zscore")
            suffix = "" if cfg.evaluation.w2_mode == "raw" else "_zscore"
            summary["w2"] = summary["w2_reference" + suffix]
    report.summary = summary
    report.agent, report.model, report.dataset = agent, model, dataset
    return report
