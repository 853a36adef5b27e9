from __future__ import annotations

import numpy as np

from ..acqopt import BoxDomain, Reducer
from .base import Problem

LOWER, UPPER = -1.5, 1.5


def double_well_1d(x):
    """(x^2 - 1)^2 + 0.2 x: wells near -1.02 (deeper) and +0.97."""
    x = np.asarray(x, dtype=np.float64)
    return (x * x - 1.0) ** 2 + 0.2 * x


def double_well_output(x) -> np.ndarray:
    return np.atleast_1d(double_well_1d(np.asarray(x, dtype=np.float64).reshape(-1)[0]))


def _first(y):
    return np.asarray(y)[..., 0]


def _first_grad(y):
    g = np.zeros_like(np.asarray(y, dtype=np.float64))
    g[..., 0] = 1.0
    return g


def make_problem() -> Problem:
    return Problem(
        name="doublewell",
        domain=BoxDomain([LOWER], [UPPER]),
        black_box=double_well_output,
        objective=Reducer(_first, _first_grad),
        output_coords=np.zeros((1, 1)),
        description="one-dimensional asymmetric double well",
    )
