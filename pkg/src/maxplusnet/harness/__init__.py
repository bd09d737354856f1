"""Experiments, configuration, metrics and the command-line entry point."""

from .config import TASKS, ConfigError, ExperimentConfig, InitSpec, load_config, parse_config
from .experiments import run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "InitSpec", "load_config", "parse_config", "TASKS", "run_experiment"]
