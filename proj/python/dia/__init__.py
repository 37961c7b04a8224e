"""Python bindings for the DIA simulator, estimators and experiment harness."""

import json
from os import PathLike

from ._dia import (
    ConfigError,
    RankDeficientError,
    binary_instrument_argmin,
    binary_instrument_objective,
    config_hash,
    linear_asymptotics,
)
from . import _dia

__all__ = [
    "ConfigError",
    "RankDeficientError",
    "binary_instrument_argmin",
    "binary_instrument_objective",
    "config_hash",
    "fit_mse",
    "linear_asymptotics",
    "run_experiment",
    "sample",
    "validate_config",
]


def _text(obj):
    return obj if isinstance(obj, str) else json.dumps(obj)


def validate_config(config):
    """Raise ConfigError unless ``config`` (dict or JSON text) is a valid experiment config."""
    _dia.validate_config(_text(config))


def run_experiment(config, out_dir: "str | PathLike[str]"):
    """Run an experiment config and return the list of CSV paths written."""
    return _dia.run_experiment(_text(config), out_dir)


def sample(dgp, probs, n, seed=0):
    """Draw ``n`` samples from ``dgp`` (dict) with fixed instrument probabilities."""
    return _dia.sample(_text(dgp), probs, n, seed)


def fit_mse(dgp, probs, n, seed=0):
    """Sample, fit the domain's default estimator and return ``(theta, true_mse)``."""
    return _dia.fit_mse(_text(dgp), probs, n, seed)
