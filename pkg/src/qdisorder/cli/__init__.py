"""Command-line experiment runner: configs, presets and the four canonical experiments."""

from .config import ConfigError, ExperimentConfig, load_config, load_preset, parse_config, preset_names
from .experiments import (
    run_correlations,
    run_error_benchmark,
    run_experiment,
    run_spectrum,
    run_transition_scan,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "load_preset",
    "parse_config",
    "preset_names",
    "run_correlations",
    "run_error_benchmark",
    "run_experiment",
    "run_spectrum",
    "run_transition_scan",
]
