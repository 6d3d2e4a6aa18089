"""Experiment configuration, runners, CSV/SVG output and the command line."""

from .config import ConfigError, ExperimentConfig, default_config
from .experiments import StageError, reproduce, run_experiment
from .io import export_csv, read_csv
from .plots import export_svg

__all__ = ["ConfigError", "ExperimentConfig", "default_config", "StageError", "reproduce",
           "run_experiment", "export_csv", "read_csv", "export_svg"]
