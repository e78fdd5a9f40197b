"""Learning interpretable ODE models from noisy data."""

import json

from ._core import (
    ConfigError,
    Dataset,
    cascaded_tank_surrogate,
    identified_equations,
    lqr,
    read_dataset,
    rmse,
    run_cli,
    simulate_checkpoint,
    write_dataset,
)
from ._core import synthesize as _synthesize

__all__ = [
    "ConfigError",
    "Dataset",
    "cascaded_tank_surrogate",
    "identified_equations",
    "lqr",
    "read_dataset",
    "rmse",
    "run_cli",
    "simulate_checkpoint",
    "synthesize",
    "write_dataset",
]


def synthesize(system, x0, t_end, dt, params=None, **kwargs):
    """Simulate `system` ("duffing", "cascaded_tank", "cartpole") from x0."""
    return _synthesize(system, json.dumps(params or {}), x0, t_end, dt, **kwargs)
