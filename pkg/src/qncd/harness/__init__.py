from .config import ConfigError, ExperimentConfig, load, loads
from .runner import StageError, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "load", "loads", "StageError", "run_experiment"]
