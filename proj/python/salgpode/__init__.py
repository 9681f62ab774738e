"""Safe active learning of Gaussian-process ODE models (C++ core)."""

import json as _json

from ._core import (
    METRICS_HEADER,
    SUMMARY_HEADER,
    ConfigError,
    ContractViolation,
    Model,
    NumericalError,
    SchemaError,
    aggregate_csv,
    conditional_entropy_constant,
    covariance_score,
    entropy,
    gram,
    integrate,
    is_truly_safe,
    list_systems,
    measure,
    read_metrics,
    safety_probability,
    system_info,
)
from . import _core


def _dump(config):
    return config if isinstance(config, str) else _json.dumps(config)


def validate_config(config):
    """Return the config (dict or JSON text) with defaults filled in."""
    return _json.loads(_core.validate_config(_dump(config)))


def run(config, seed=0):
    """Run one seed of the loop; returns (records, model)."""
    return _core.run(_dump(config), seed)
