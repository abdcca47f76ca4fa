"""Learning a per-step cost model from trajectory preferences.

The learned trajectory cost is C_hat(tau) = sum_t gamma^t c_hat(s_t, a_t) and the
learned safety threshold is fixed at 0.  Training minimises

    L = L_pair + L_safe^DZ + L_SNR

where L_pair is the Bradley-Terry cross-entropy on preferences, L_safe^DZ pushes
safe trajectories below 0 and unsafe ones above the dead-zone bound delta, and
L_SNR rewards spread of C_hat relative to the entropy of the preference labels.

Each loss is available as a pure function of the trajectory costs returning
``(value, dL/dC_hat)``; ``loss_pbci`` chains that into parameter gradients.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .envs import Trajectory
from .nn import (
    AdamState,
    Gradients,
    Network,
    NonFiniteError,
    adam_init,
    adam_step,
    load_checkpoint,
    net_backward,
    net_forward,
    net_init,
    save_checkpoint,
)
from .preferences import PreferenceDataset

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
LOG_MIN = float(np.log(LOG_FLOOR))
ENTROPY_FLOOR = 1e-3


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def _clamped_log_sigmoid(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """max(log sigma(x), log 1e-12) and its derivative (zero where clamped)."""
    ls = -np.logaddexp(0.0, -x)
    clamped = ls < LOG_MIN
    return np.where(clamped, LOG_MIN, ls), np.where(clamped, 0.0, sigmoid(-x))


def pref_prob(c_hat_1, c_hat_2):
    """Probability that trajectory 1 is preferred: sigma(C_hat_2 - C_hat_1)."""
    return sigmoid(np.asarray(c_hat_2, dtype=np.float64) - np.asarray(c_hat_1, dtype=np.float64))


# -- losses on trajectory costs -----------------------------------------------------


def pair_loss(c_a, c_b, mu_a, mu_b) -> tuple[float, np.ndarray, np.ndarray]:
    """Bradley-Terry cross-entropy; returns (value, dL/dc_a, dL/dc_b)."""
    c_a, c_b = np.asarray(c_a, dtype=np.float64), np.asarray(c_b, dtype=np.float64)
    mu_a, mu_b = np.asarray(mu_a, dtype=np.float64), np.asarray(mu_b, dtype=np.float64)
    n = c_a.size
    if n == 0:
        raise ValueError("empty preference batch")
    gap = c_b - c_a
    l1, g1 = _clamped_log_sigmoid(gap)
    l2, g2 = _clamped_log_sigmoid(-gap)
    value = -np.sum(mu_a * l1 + mu_b * l2) / n
    d_gap = -(mu_a * g1 - mu_b * g2) / n
    return float(value), -d_gap, d_gap


def safe_loss(c_hat, eps) -> tuple[float, np.ndarray]:
    """Safety cross-entropy without a dead zone."""
    return safe_dz_loss(c_hat, eps, 0.0)


def safe_dz_loss(c_hat, eps, delta: float) -> tuple[float, np.ndarray]:
    """-mean[eps log sigma(-C) + (1 - eps) log sigma(C - delta)]."""
    if delta < 0:
        raise ValueError(f"dead-zone bound must be >= 0, got {delta}")
    c_hat = np.asarray(c_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    n = c_hat.size
    if n == 0:
        raise ValueError("empty batch")
    l_safe, g_safe = _clamped_log_sigmoid(-c_hat)
    l_unsafe, g_unsafe = _clamped_log_sigmoid(c_hat - delta)
    value = -np.sum(eps * l_safe + (1.0 - eps) * l_unsafe) / n
    grad = -(-eps * g_safe + (1.0 - eps) * g_unsafe) / n
    return float(value), grad


def label_entropy(mu) -> float:
    """Natural-log entropy of the empirical distribution of mu over {0, 0.5, 1}."""
    mu = np.asarray(mu, dtype=np.float64)
    counts = np.array([np.sum(mu == v) for v in (0.0, 0.5, 1.0)], dtype=np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def snr_loss(c_hat, mu, zeta: float) -> tuple[float, np.ndarray]:
    """-zeta * Var(C_hat) / max(H(mu), 1e-3) with the unbiased variance."""
    if zeta < 0:
        raise ValueError("zeta must be non-negative")
    c_hat = np.asarray(c_hat, dtype=np.float64)
    n = c_hat.size
    if n < 2:
        raise ValueError("the variance term needs at least two trajectories")
    if zeta == 0:
        return 0.0, np.zeros_like(c_hat)
    h = max(label_entropy(mu), ENTROPY_FLOOR)
    centred = c_hat - c_hat.mean()
    var = float(np.sum(centred**2) / (n - 1))
    return -zeta * var / h, -zeta * 2.0 * centred / ((n - 1) * h)


# -- cost model ---------------------------------------------------------------------


@dataclass
class CostModel:
    net: Network
    delta: float = 1.0
    gamma: float = 0.99
    n_actions: int = 0  # > 0: actions are one-hot encoded integers

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.net.n_out != 1:
            raise ValueError("cost network must have a scalar output")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    def copy(self) -> "CostModel":
        return CostModel(self.net.copy(), self.delta, self.gamma, self.n_actions)

    def features(self, states, actions) -> np.ndarray:
        """Concatenate state features with (one-hot or raw) action features."""
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions)
        if self.n_actions:
            acts = np.eye(self.n_actions)[actions.astype(np.int64)]
        else:
            acts = actions.astype(np.float64)
            if acts.ndim == states.ndim - 1:
                acts = acts[..., None]
        x = np.concatenate([states, acts], axis=-1)
        if x.shape[-1] != self.net.n_in:
            raise ValueError(f"feature width {x.shape[-1]} does not match the network input {self.net.n_in}")
        return x

    def step_costs(self, states, actions) -> np.ndarray:
        x = self.features(states, actions)
        return net_forward(self.net, x.reshape(-1, x.shape[-1]))[:, 0].reshape(x.shape[:-1])

    def save(self, path, extra: dict | None = None):
        meta = {"delta": self.delta, "gamma": self.gamma, "n_actions": self.n_actions}
        meta.update(extra or {})
        return save_checkpoint(self.net, path, meta)

    @classmethod
    def load(cls, path) -> "CostModel":
        net, meta = load_checkpoint(path)
        hp = meta["hyperparams"]
        return cls(net, float(hp["delta"]), float(hp["gamma"]), int(hp.get("n_actions", 0)))


def make_cost_model(env, hidden=(32, 32), seed: int = 0, delta: float = 1.0, gamma: float | None = None,
                    activation: str = "tanh") -> CostModel:
    n_actions = env.n_actions if env.discrete else 0
    n_in = env.obs_dim + (n_actions or env.action_dim)
    net = net_init([n_in, *hidden, 1], seed, activation)
    return CostModel(net, delta, env.gamma if gamma is None else gamma, n_actions)


def traj_cost_estimate(model: CostModel, traj: Trajectory) -> float:
    """sum_t gamma^t c_hat(s_t, a_t)."""
    c = model.step_costs(traj.states, traj.actions)
    return float(np.dot(model.gamma ** np.arange(len(c)), c))


def traj_cost_batch(model: CostModel, trajs) -> np.ndarray:
    """C_hat for many equal-length trajectories in one forward pass."""
    trajs = list(trajs)
    if not trajs:
        return np.zeros(0)
    x = encode_trajectories(model, trajs)
    return _costs_from_features(model, x)


def encode_trajectories(model: CostModel, trajs) -> np.ndarray:
    lengths = {len(t) for t in trajs}
    if len(lengths) != 1:
        raise ValueError(f"trajectories have different lengths {sorted(lengths)}")
    states = np.stack([t.states for t in trajs])
    actions = np.stack([t.actions for t in trajs])
    return model.features(states, actions)


def _costs_from_features(model: CostModel, x: np.ndarray) -> np.ndarray:
    n, T, f = x.shape
    c = net_forward(model.net, x.reshape(-1, f))[:, 0].reshape(n, T)
    return c @ (model.gamma ** np.arange(T))


# -- encoded batches ----------------------------------------------------------------


@dataclass
class EncodedPairs:
    """Feature tensors and labels for a set of preference records."""

    x_a: np.ndarray  # (n, T, F)
    x_b: np.ndarray
    mu_a: np.ndarray
    mu_b: np.ndarray
    eps_a: np.ndarray
    eps_b: np.ndarray

    def __len__(self) -> int:
        return len(self.mu_a)

    def subset(self, idx) -> "EncodedPairs":
        return EncodedPairs(*(getattr(self, k)[idx] for k in ("x_a", "x_b", "mu_a", "mu_b", "eps_a", "eps_b")))

    def safety_labels(self) -> np.ndarray:
        return np.concatenate([self.eps_a, self.eps_b])


def encode_records(model: CostModel, records) -> EncodedPairs:
    records = list(records)
    if not records:
        raise ValueError("empty preference batch")
    return EncodedPairs(
        encode_trajectories(model, [r.traj_a for r in records]),
        encode_trajectories(model, [r.traj_b for r in records]),
        np.array([r.mu_a for r in records], dtype=np.float64),
        np.array([r.mu_b for r in records], dtype=np.float64),
        np.array([r.eps_a for r in records], dtype=np.float64),
        np.array([r.eps_b for r in records], dtype=np.float64),
    )


def _as_encoded(model, batch) -> EncodedPairs:
    return batch if isinstance(batch, EncodedPairs) else encode_records(model, batch)


def batch_costs(model: CostModel, batch) -> tuple[np.ndarray, np.ndarray]:
    enc = _as_encoded(model, batch)
    return _costs_from_features(model, enc.x_a), _costs_from_features(model, enc.x_b)


def loss_pair(model: CostModel, batch) -> float:
    enc = _as_encoded(model, batch)
    c_a, c_b = batch_costs(model, enc)
    return pair_loss(c_a, c_b, enc.mu_a, enc.mu_b)[0]


def loss_safe_dz(model: CostModel, batch, delta: float | None = None) -> float:
    enc = _as_encoded(model, batch)
    c_a, c_b = batch_costs(model, enc)
    d = model.delta if delta is None else delta
    return safe_dz_loss(np.concatenate([c_a, c_b]), enc.safety_labels(), d)[0]


def loss_snr(model: CostModel, batch, zeta: float) -> float:
    enc = _as_encoded(model, batch)
    c_a, c_b = batch_costs(model, enc)
    return snr_loss(np.concatenate([c_a, c_b]), enc.mu_a, zeta)[0]


@dataclass
class PbciLossBreakdown:
    pair_loss: float
    safe_dz_loss: float
    snr_loss: float

    @property
    def total(self) -> float:
        return self.pair_loss + self.safe_dz_loss + self.snr_loss


def loss_pbci(model: CostModel, batch, delta: float | None = None, zeta: float = 1e-3,
              with_grad: bool = True) -> tuple[PbciLossBreakdown, Gradients | None]:
    """Composite loss and, optionally, its gradient with respect to the network."""
    enc = _as_encoded(model, batch)
    delta = model.delta if delta is None else delta
    n, T, f = enc.x_a.shape
    x = np.concatenate([enc.x_a, enc.x_b]).reshape(-1, f)
    out, cache = net_forward(model.net, x, return_cache=True)
    disc = model.gamma ** np.arange(T)
    c = out[:, 0].reshape(2 * n, T) @ disc
    c_a, c_b = c[:n], c[n:]
    lp, ga, gb = pair_loss(c_a, c_b, enc.mu_a, enc.mu_b)
    ls, gs = safe_dz_loss(c, enc.safety_labels(), delta)
    if zeta > 0 and 2 * n >= 2:
        ln, gn = snr_loss(c, enc.mu_a, zeta)
    else:
        ln, gn = 0.0, np.zeros(2 * n)
    parts = PbciLossBreakdown(lp, ls, ln)
    if not np.isfinite(parts.total):
        raise NonFiniteError("non-finite cost-model loss")
    if not with_grad:
        return parts, None
    d_c = np.concatenate([ga, gb]) + gs + gn
    upstream = (d_c[:, None] * disc[None, :]).reshape(-1, 1)
    grads, _ = net_backward(model.net, cache, upstream)
    return parts, grads


# -- rates and calibration ------------------------------------------------------------


def predicted_violation_rate(c_hat) -> float:
    """Fraction of trajectories with C_hat > 0 (strict)."""
    c_hat = np.asarray(c_hat, dtype=np.float64)
    if c_hat.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(c_hat > 0))


def empirical_violation_rate(eps) -> float:
    """Fraction of trajectories labelled unsafe."""
    eps = np.asarray(eps)
    if eps.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(eps == 0))


def calibrate_deadzone(delta: float, p_hat: float, p_emp: float, lr: float) -> float:
    """delta <- max(0, delta + lr * (P_vio - P_hat_vio))."""
    if lr <= 0:
        raise ValueError("lr_delta must be positive")
    return max(0.0, delta + lr * (p_emp - p_hat))


def calibrate_on_batch(model: CostModel, records, lr: float) -> tuple[float, float, float]:
    """Apply the dead-zone update using the rates on ``records``; returns (delta', P_hat, P)."""
    records = list(records)
    if not records:
        raise ValueError("empty batch")
    trajs = [t for r in records for t in (r.traj_a, r.traj_b)]
    eps = [e for r in records for e in (r.eps_a, r.eps_b)]
    p_hat = predicted_violation_rate(traj_cost_batch(model, trajs))
    p_emp = empirical_violation_rate(eps)
    return calibrate_deadzone(model.delta, p_hat, p_emp, lr), p_hat, p_emp


def pairwise_accuracy(model: CostModel, batch) -> float:
    """Share of strictly-ordered pairs whose C_hat ordering agrees with the label."""
    enc = _as_encoded(model, batch)
    c_a, c_b = batch_costs(model, enc)
    strict = enc.mu_a != 0.5
    if not np.any(strict):
        return float("nan")
    pred_a = c_a < c_b
    return float(np.mean(pred_a[strict] == (enc.mu_a[strict] == 1.0)))


# -- training -----------------------------------------------------------------------


@dataclass
class CostTrainConfig:
    hidden: tuple = (32, 32)
    activation: str = "tanh"
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    finetune_epochs: int = 3
    delta: float = 1.0
    zeta: float = 1e-3
    holdout_frac: float = 0.1
    patience: int = 5
    min_improvement: float = 0.0
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        if self.lr <= 0:
            errs.append("lr must be positive")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.epochs < 0 or self.finetune_epochs < 0:
            errs.append("epoch counts must be >= 0")
        if self.delta < 0:
            errs.append("delta must be >= 0")
        if self.zeta < 0:
            errs.append("zeta must be >= 0")
        if not 0.0 <= self.holdout_frac < 1.0:
            errs.append("holdout_frac must lie in [0, 1)")
        return errs


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_accuracy: float = float("nan")

    def write_csv(self, path) -> None:
        cols = ["epoch", "pair_loss", "safe_loss", "snr_loss", "holdout_accuracy", "delta"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] for c in cols])


def _train_epochs(model: CostModel, opt: AdamState, enc: EncodedPairs, cfg: CostTrainConfig, epochs: int,
                  rng: np.random.Generator, holdout: EncodedPairs | None, history: TrainHistory,
                  epoch0: int = 0):
    n = len(enc)
    best = (model.net.copy(), opt.copy(), -np.inf)
    stale = 0
    for ep in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue
            parts, grads = loss_pbci(model, enc.subset(idx), model.delta, cfg.zeta)
            model.net, opt = adam_step(model.net, grads, opt, cfg.lr)
            sums += (parts.pair_loss, parts.safe_dz_loss, parts.snr_loss)
            n_batches += 1
        acc = pairwise_accuracy(model, holdout) if holdout is not None and len(holdout) else float("nan")
        means = sums / max(n_batches, 1)
        history.rows.append({"epoch": epoch0 + ep, "pair_loss": means[0], "safe_loss": means[1],
                             "snr_loss": means[2], "holdout_accuracy": acc, "delta": model.delta})
        if holdout is None or np.isnan(acc):
            continue
        if acc > best[2] + cfg.min_improvement or not np.isfinite(best[2]):
            best = (model.net.copy(), opt.copy(), acc)
            history.best_epoch, history.best_accuracy = epoch0 + ep, acc
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if holdout is not None and np.isfinite(best[2]):
        model.net, opt = best[0], best[1]
    return model, opt


def _check_classes(eps) -> None:
    if len(set(np.asarray(eps).astype(int).tolist())) < 2:
        raise ValueError("training data must contain both safe and unsafe trajectories")


def pretrain_offline(dataset: PreferenceDataset | list, env, cfg: CostTrainConfig | None = None,
                     model: CostModel | None = None) -> tuple[CostModel, AdamState, TrainHistory]:
    """Fit a fresh cost model with a fixed dead zone and early stopping on held-out accuracy."""
    cfg = cfg or CostTrainConfig()
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    records = dataset.records if isinstance(dataset, PreferenceDataset) else list(dataset)
    if not records:
        raise ValueError("empty preference dataset")
    if model is None:
        model = make_cost_model(env, cfg.hidden, cfg.seed, cfg.delta, activation=cfg.activation)
    enc = encode_records(model, records)
    _check_classes(enc.safety_labels())
    rng = np.random.default_rng(cfg.seed + 1)
    n_hold = int(round(cfg.holdout_frac * len(enc))) if len(enc) >= 10 else 0
    perm = rng.permutation(len(enc))
    holdout = enc.subset(perm[:n_hold]) if n_hold else None
    train = enc.subset(perm[n_hold:])
    opt = adam_init(model.net)
    history = TrainHistory()
    model, opt = _train_epochs(model, opt, train, cfg, cfg.epochs, rng, holdout, history)
    return model, opt, history


def finetune_online(model: CostModel, opt: AdamState, new_batch, dataset: PreferenceDataset,
                    cfg: CostTrainConfig, rng: np.random.Generator,
                    history: TrainHistory | None = None) -> tuple[CostModel, AdamState]:
    """D <- D u B, then a few warm-started epochs over the merged data.

    Raises ``BudgetExceededError`` (from the dataset) before touching the model
    if the new records do not fit in the remaining budget.
    """
    dataset.extend(new_batch)
    if len(dataset) == 0 or cfg.finetune_epochs == 0:
        return model, opt
    enc = encode_records(model, dataset.records)
    history = history if history is not None else TrainHistory()
    epoch0 = history.rows[-1]["epoch"] + 1 if history.rows else 0
    return _train_epochs(model, opt, enc, cfg, cfg.finetune_epochs, rng, None, history, epoch0)
