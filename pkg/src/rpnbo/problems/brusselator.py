"""Brusselator reaction-diffusion system on a periodic square grid.

    u_t = D0 lap(u) + a - (1 + b) u + u^2 v
    v_t = D1 lap(v) + b u - u^2 v

Method of lines with the 5-point Laplacian and explicit Euler in time.
"""
from __future__ import annotations

import numba
import numpy as np

from ..acqopt import BoxDomain, Reducer
from .base import EvaluationError, Problem

LOWER = np.array([0.1, 0.1, 0.01, 0.01])  # a, b, D0, D1
UPPER = np.array([5.0, 5.0, 5.0, 5.0])
SIDE = 64.0  # physical side length; 64 cells of unit width at full resolution
T_END = 20.0
DT = 1e-3


class SolverBlowup(EvaluationError):
    pass


@numba.njit(cache=True)
def _euler(u, v, a, b, d0, d1, h, dt, steps):
    n = u.shape[0]
    inv_h2 = 1.0 / (h * h)
    un = np.empty_like(u)
    vn = np.empty_like(v)
    for _ in range(steps):
        for i in range(n):
            ip = (i + 1) % n
            im = (i - 1) % n
            for j in range(n):
                jp = (j + 1) % n
                jm = (j - 1) % n
                uc = u[i, j]
                vc = v[i, j]
                lu = (u[ip, j] + u[im, j] + u[i, jp] + u[i, jm] - 4.0 * uc) * inv_h2
                lv = (v[ip, j] + v[im, j] + v[i, jp] + v[i, jm] - 4.0 * vc) * inv_h2
                uuv = uc * uc * vc
                un[i, j] = uc + dt * (d0 * lu + a - (1.0 + b) * uc + uuv)
                vn[i, j] = vc + dt * (d1 * lv + b * uc - uuv)
        u, un = un, u
        v, vn = vn, v
        if not (np.isfinite(u[0, 0]) and np.isfinite(v[0, 0])):
            break
    return u, v


def stable_dt(dt: float, h: float, d_max: float) -> float:
    """Shrink ``dt`` to the explicit diffusion limit if needed."""
    return min(dt, 0.9 * h * h / (4.0 * d_max))


def brusselator_solve(params, grid_n: int = 16, t_end: float = T_END, dt: float = DT,
                      side: float = SIDE) -> np.ndarray:
    """Final (u, v) fields flattened and concatenated, length 2 * grid_n**2."""
    a, b, d0, d1 = (float(p) for p in params)
    h = side / grid_n
    dt = stable_dt(dt, h, max(d0, d1))
    steps = int(np.ceil(t_end / dt))
    dt = t_end / steps
    g = np.arange(grid_n) / grid_n
    X, Y = np.meshgrid(g, g, indexing="ij")
    u = a + 0.1 * np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y)
    v = np.full((grid_n, grid_n), b / a)
    u, v = _euler(u, v, a, b, d0, d1, h, dt, steps)
    out = np.concatenate([u.ravel(), v.ravel()])
    if not np.all(np.isfinite(out)):
        raise SolverBlowup(f"non-finite Brusselator state for parameters {list(params)}")
    return out


def brusselator_objective(y) -> np.ndarray:
    """Population variance of the concatenated fields."""
    return np.var(np.asarray(y), axis=-1)


def _objective_grad(y):
    y = np.asarray(y)
    return 2.0 * (y - y.mean(axis=-1, keepdims=True)) / y.shape[-1]


def output_coords(grid_n: int) -> np.ndarray:
    """(i/n, j/n, field) triples in output order."""
    g = np.arange(grid_n) / grid_n
    X, Y = np.meshgrid(g, g, indexing="ij")
    rows = [np.stack([X.ravel(), Y.ravel(), np.full(grid_n * grid_n, k)], axis=1) for k in (0.0, 1.0)]
    return np.vstack(rows)


def make_problem(grid_n: int = 16) -> Problem:
    return Problem(
        name="brusselator",
        domain=BoxDomain(LOWER, UPPER),
        black_box=lambda x: brusselator_solve(x, grid_n),
        objective=Reducer(brusselator_objective, _objective_grad),
        output_coords=output_coords(grid_n),
        description=f"Brusselator control on a {grid_n}x{grid_n} periodic grid",
    )
