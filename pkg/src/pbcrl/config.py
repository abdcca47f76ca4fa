"""Experiment configuration: JSON files, validation, canonical dumps.

Every tunable lives in ``ExperimentConfig``; the resolved dump (all defaults
expanded, keys sorted) plus its hash is what a run directory records.  Only the
output directory and the seed may be overridden from the environment
(``PBCRL_OUT`` and ``PBCRL_SEED``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .envs import make_env
from .inference import CostTrainConfig
from .policy import PolicyConfig

ABLATIONS = ("none", "plain_bt", "offline_only")
W2_MODES = ("raw", "zscore")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem with its field path."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class EnvSection:
    name: str = "chain"
    params: dict = field(default_factory=dict)


@dataclass
class PreferenceSection:
    budget: int = 2000
    offline_pairs: int = 1800
    online_budget: int = 200
    noise_rate: float = 0.0


@dataclass
class EvalSection:
    n_eval: int = 500
    w2_mode: str = "raw"


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    preferences: PreferenceSection = field(default_factory=PreferenceSection)
    cost_model: CostTrainConfig = field(default_factory=CostTrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    evaluation: EvalSection = field(default_factory=EvalSection)
    ablation: str = "none"
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cost_model"].pop("seed", None)  # derived from the run seed
        return _jsonable(d)

    def validate(self) -> list[str]:
        errs = []
        try:
            make_env(self.env.name, **self.env.params)
        except (TypeError, ValueError) as exc:
            errs.append(f"env: {exc}")
        p = self.preferences
        if p.budget < 0 or p.offline_pairs < 0 or p.online_budget < 0:
            errs.append("preferences: budget entries must be >= 0")
        if p.offline_pairs + p.online_budget != p.budget:
            errs.append(f"preferences: offline_pairs + online_budget = {p.offline_pairs + p.online_budget} "
                        f"must equal budget = {p.budget}")
        if not 0.0 <= p.noise_rate < 1.0:
            errs.append("preferences.noise_rate: must lie in [0, 1)")
        errs += [f"cost_model: {e}" for e in self.cost_model.validate()]
        errs += [f"policy: {e}" for e in self.policy.validate(lr_psi=self.cost_model.lr)]
        if self.evaluation.n_eval < 0:
            errs.append("evaluation.n_eval: must be >= 0")
        if self.evaluation.w2_mode not in W2_MODES:
            errs.append(f"evaluation.w2_mode: must be one of {W2_MODES}")
        if self.ablation not in ABLATIONS:
            errs.append(f"ablation: must be one of {ABLATIONS}, got {self.ablation!r}")
        if not self.seeds:
            errs.append("seeds: must be non-empty")
        elif not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            errs.append("seeds: must be non-negative integers")
        return errs


SECTIONS = {
    "env": EnvSection,
    "preferences": PreferenceSection,
    "cost_model": CostTrainConfig,
    "policy": PolicyConfig,
    "evaluation": EvalSection,
}


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _coerce(cls, path: str, raw, errors: list[str]):
    if not isinstance(raw, dict):
        errors.append(f"{path}: expected an object")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields or (cls is CostTrainConfig and key == "seed"):
            errors.append(f"{path}.{key}: unknown key")
            continue
        default = getattr(cls(), key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if default is not None and not isinstance(value, type(default)) or isinstance(value, bool) != isinstance(default, bool):
            errors.append(f"{path}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
            continue
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config; raises ``ConfigError`` listing all problems."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: expected an object"])
    kwargs = {}
    for key, value in raw.items():
        if key in SECTIONS:
            kwargs[key] = _coerce(SECTIONS[key], key, value, errors)
        elif key == "ablation":
            kwargs[key] = value
        elif key == "seeds":
            kwargs[key] = list(value) if isinstance(value, list) else value
            if not isinstance(value, list):
                errors.append("seeds: expected a list")
        elif key == "out_dir":
            kwargs[key] = str(value)
        else:
            errors.append(f"{key}: unknown key")
    cfg = ExperimentConfig(**kwargs)
    if not errors:
        errors += cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path=None, env=None) -> ExperimentConfig:
    """Read a JSON config (or defaults when ``path`` is None) and apply env overrides."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<file>: JSON parse error: {exc}"]) from None
    cfg = config_from_dict(raw)
    env = os.environ if env is None else env
    if env.get("PBCRL_OUT"):
        cfg.out_dir = env["PBCRL_OUT"]
    if env.get("PBCRL_SEED"):
        try:
            cfg.seeds = [int(env["PBCRL_SEED"])]
        except ValueError:
            raise ConfigError([f"PBCRL_SEED: not an integer: {env['PBCRL_SEED']!r}"]) from None
        errs = cfg.validate()
        if errs:
            raise ConfigError(errs)
    return cfg


def resolved_config_dump(cfg: ExperimentConfig) -> str:
    """Canonical JSON with every default expanded."""
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(resolved_config_dump(cfg).encode()).hexdigest()[:16]
