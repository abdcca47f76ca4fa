"""Constrained RL from trajectory preferences with a dead-zone cost model."""

from .config import ConfigError, ExperimentConfig, config_from_dict, parse_config
from .envs import ChainHazard, PointHazard, make_env
from .inference import CostModel, CostTrainConfig, pretrain_offline
from .policy import PolicyConfig
from .training import ExperimentReport, run_pbcrl

__all__ = [
    "ChainHazard", "ConfigError", "CostModel", "CostTrainConfig", "ExperimentConfig", "ExperimentReport",
    "PointHazard", "PolicyConfig", "config_from_dict", "make_env", "parse_config", "pretrain_offline",
    "run_pbcrl",
]
__version__ = "0.1.0"
