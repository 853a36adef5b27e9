"""Two-spill pollutant concentration in a one-dimensional channel."""
from __future__ import annotations

import numpy as np

from ..acqopt import BoxDomain, Reducer
from .base import Problem

TRUE_PARAMS = np.array([10.0, 0.07, 1.505, 30.1525])  # M, D, L, tau
LOWER = np.array([7.0, 0.02, 0.01, 30.01])
UPPER = np.array([12.0, 0.12, 3.0, 30.295])
S_GRID = np.array([0.0, 1.0, 2.5])
T_GRID = np.array([15.0, 30.0, 45.0, 60.0])


def env_concentration(params, s, t):
    """Concentration c(s, t; M, D, L, tau); broadcasts over s and t."""
    M, D, L, tau = (float(p) for p in params)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("time must be positive")
    first = M / np.sqrt(4 * np.pi * D * t) * np.exp(-s ** 2 / (4 * D * t))
    late = t > tau
    dt = np.where(late, t - tau, 1.0)
    second = np.where(late, M / np.sqrt(4 * np.pi * D * dt) * np.exp(-(s - L) ** 2 / (4 * D * dt)), 0.0)
    return first + second


def env_output(params) -> np.ndarray:
    """The 3 x 4 observation grid, flattened location-major (s outer, t inner)."""
    s, t = np.meshgrid(S_GRID, T_GRID, indexing="ij")
    return env_concentration(params, s, t).ravel()


Y_TRUE = env_output(TRUE_PARAMS)


def env_mse(y) -> np.ndarray:
    return np.mean((np.asarray(y) - Y_TRUE) ** 2, axis=-1)


def _env_mse_grad(y):
    return 2.0 * (np.asarray(y) - Y_TRUE) / Y_TRUE.shape[0]


def output_coords() -> np.ndarray:
    """(s, t) pairs scaled to [0, 1], one row per output."""
    s, t = np.meshgrid(S_GRID / S_GRID.max(), T_GRID / T_GRID.max(), indexing="ij")
    return np.stack([s.ravel(), t.ravel()], axis=1)


def make_problem() -> Problem:
    return Problem(
        name="env",
        domain=BoxDomain(LOWER, UPPER),
        black_box=env_output,
        objective=Reducer(env_mse, _env_mse_grad),
        output_coords=output_coords(),
        description="environmental model: recover (M, D, L, tau) from a 3x4 concentration grid",
    )
