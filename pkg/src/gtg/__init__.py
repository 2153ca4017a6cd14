"""Guided trajectory generation for offline model-based optimization."""

from .config import ConfigError, ExperimentConfig, load_config
from .dataset import DatasetError, OfflineDataset, load_dataset, make_dataset
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule
from .pipeline import ablate, run_experiment
from .tasks import branin, get_oracle

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetError",
    "ExperimentConfig",
    "GuidanceConfig",
    "NoiseSchedule",
    "OfflineDataset",
    "ablate",
    "branin",
    "get_oracle",
    "load_config",
    "load_dataset",
    "make_dataset",
    "make_schedule",
    "run_experiment",
]
