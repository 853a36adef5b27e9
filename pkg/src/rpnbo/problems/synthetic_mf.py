"""Synthetic constrained two-fidelity design problem.

A blade-loading-like profile ``y(t)``, ``t`` on 32 stations, is a cosine
series whose coefficients are smooth trigonometric functions of 8 shape
parameters.  The objective is the negative of an efficiency-like score and
the constraint asks for a minimum pressure-rise-like ratio, calibrated so
that about 30% of the box is feasible.  The low-fidelity model keeps only
the first three modes and adds a biased sinusoid.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..acqopt import BoxDomain, Reducer
from .base import Constraint, Problem

DIM = 8
N_OUT = 32
N_MODES = 5
LF_MODES = 3
FEASIBLE_FRACTION = 0.3

_STATIONS = np.linspace(0.0, 1.0, N_OUT)
_MODES = np.cos(np.pi * np.arange(N_MODES)[:, None] * _STATIONS[None])  # (modes, out)
_rng = np.random.default_rng(2024)
_AMP = _rng.normal(size=(N_MODES, DIM)) * np.array([1.0, 0.8, 0.6, 0.4, 0.3])[:, None]
_PHASE = _rng.uniform(0.0, 2 * np.pi, size=(N_MODES, DIM))
del _rng


def _coefficients(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.sum(_AMP[None] * np.sin(np.pi * x[:, None, :] + _PHASE[None]), axis=-1) / np.sqrt(DIM)
    c[:, 0] += 1.0 + 0.6 * x[:, 0] - 0.4 * (x[:, 1] - 0.5) ** 2
    c[:, 1] += 0.5 * x[:, 0] - 0.3 * x[:, 2]
    return c / np.arange(1, N_MODES + 1)


def high_fidelity(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = _coefficients(x) @ _MODES
    return y[0] if x.ndim == 1 else y


def low_fidelity(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = _coefficients(x)
    c[:, LF_MODES:] = 0.0
    xs = np.atleast_2d(x)
    y = c @ _MODES + 0.1 * np.sin(2 * np.pi * _STATIONS[None] + np.pi * xs[:, :1])
    return y[0] if x.ndim == 1 else y


def efficiency(y) -> np.ndarray:
    y = np.asarray(y)
    return y.mean(axis=-1) - 0.5 * y.var(axis=-1)


def _neg_efficiency(y):
    return -efficiency(y)


def _neg_efficiency_grad(y):
    y = np.asarray(y)
    n = y.shape[-1]
    return -(1.0 / n - (y - y.mean(axis=-1, keepdims=True)) / n)


def pressure_ratio(y) -> np.ndarray:
    """Rear-half mean minus front-half mean of the profile."""
    y = np.asarray(y)
    half = y.shape[-1] // 2
    return y[..., half:].mean(axis=-1) - y[..., :half].mean(axis=-1)


def _ratio_grad(y):
    y = np.asarray(y, dtype=np.float64)
    half = y.shape[-1] // 2
    g = np.empty_like(y)
    g[..., :half] = -1.0 / half
    g[..., half:] = 1.0 / (y.shape[-1] - half)
    return g


@lru_cache(maxsize=1)
def ratio_threshold(n_samples: int = 100_000, seed: int = 0) -> float:
    """Threshold r0 leaving ``FEASIBLE_FRACTION`` of the box feasible."""
    x = np.random.default_rng(seed).uniform(size=(n_samples, DIM))
    return float(np.quantile(pressure_ratio(high_fidelity(x)), 1.0 - FEASIBLE_FRACTION))


def make_problem() -> Problem:
    r0 = ratio_threshold()
    con = Constraint(Reducer(lambda y: pressure_ratio(y) - r0, _ratio_grad))
    return Problem(
        name="mfblade-synthetic",
        domain=BoxDomain(np.zeros(DIM), np.ones(DIM)),
        black_box=high_fidelity,
        objective=Reducer(_neg_efficiency, _neg_efficiency_grad),
        constraints=[con],
        low_fidelity=low_fidelity,
        output_coords=_STATIONS[:, None],
        description="synthetic constrained two-fidelity profile design (d=8, s=32)",
    )
