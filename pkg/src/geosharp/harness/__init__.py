"""Configuration, experiment runners and the command line interface."""

from .config import ConfigError, ExperimentConfig, parse_config
from .experiments import ExperimentError, RunArtifacts, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "ExperimentError", "RunArtifacts", "parse_config",
           "run_experiment"]
