"""Multi-restart projected Adam over q-point batches in a box."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import acquisition as acq_mod
from .acquisition import AcquisitionSpec, WeightModel


class AcquisitionOptimizationError(RuntimeError):
    pass


@dataclass
class BoxDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise ValueError("domain needs lower < upper in every dimension")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all((x >= self.lower) & (x <= self.upper)))


@dataclass(frozen=True)
class AcqOptConfig:
    restarts: int = 16
    steps: int = 200
    learning_rate: float = 1e-2

    def __post_init__(self):
        if self.restarts < 1 or self.steps < 1:
            raise ValueError("restarts and steps must be at least 1")


@dataclass
class BatchResult:
    x: np.ndarray  # (q, d), original units
    score: float


@dataclass(frozen=True)
class Reducer:
    """Known scalar map of a vector output, vectorized over leading axes."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


def latin_hypercube(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return qmc.LatinHypercube(d=d, seed=rng).random(n)


def optimize_batch(acq: Callable, lower, upper, q: int, config: AcqOptConfig,
                   rng: np.random.Generator) -> BatchResult:
    """Maximize a batch score over the box.

    ``acq`` maps a stack of batches (R, q, d) in original units to
    ``(scores (R,), grads (R, q, d))``.  All restarts step together; the
    best batch seen over every restart and iterate is returned.
    """
    dom = BoxDomain(lower, upper)
    d = dom.dim
    span = dom.upper - dom.lower
    R = config.restarts
    z = latin_hypercube(R * q, d, rng)
    z = z[rng.permutation(R * q)].reshape(R, q, d)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    alive = np.ones(R, dtype=bool)
    best = np.full(R, -np.inf)
    best_z = z.copy()
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(config.steps + 1):
        vals, grads = acq(dom.lower + z * span)
        vals = np.asarray(vals, dtype=np.float64)
        grads = np.asarray(grads, dtype=np.float64) * span
        bad = ~np.isfinite(vals) | ~np.all(np.isfinite(grads), axis=(1, 2))
        alive &= ~bad
        best = np.where(alive, best, -np.inf)  # a restart that went non-finite is dropped whole
        better = alive & (vals > best)
        best = np.where(better, vals, best)
        best_z[better] = z[better]
        if t == config.steps or not alive.any():
            break
        g = np.where(alive[:, None, None], grads, 0.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = config.learning_rate * (m / (1 - b1 ** (t + 1))) / (np.sqrt(v / (1 - b2 ** (t + 1))) + eps)
        z = np.clip(z + step, 0.0, 1.0)
    if not alive.any():
        raise AcquisitionOptimizationError("every restart produced a non-finite acquisition value")
    r = int(np.argmax(best))
    x = np.clip(dom.lower + best_z[r] * span, dom.lower, dom.upper)
    return BatchResult(x, float(best[r]))


def acq_gradient(acq: Callable, X) -> np.ndarray:
    """Gradient of the batch score at a single batch ``X`` (q, d)."""
    X = np.asarray(X, dtype=np.float64)
    _, g = acq(X[None])
    g = np.asarray(g)[0]
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite acquisition gradient at {X.tolist()}")
    return g


@dataclass
class ConstraintTerm:
    model: object
    reducer: Reducer
    scale: float = 1.0  # constraint values are divided by this before the sigmoid


@dataclass
class SurrogateAcquisition:
    """Batch score on ensemble members, with gradients through the networks.

    ``model`` is anything exposing ``forward_vjp`` and ``size`` (Ensemble,
    MfEnsemble).  Objective values are affinely rescaled by
    ``(f - shift) / scale`` before the estimator sees them.
    """

    spec: AcquisitionSpec
    model: object
    objective: Reducer
    f_star: Optional[float] = None
    weight_model: Optional[WeightModel] = None
    constraints: Sequence[ConstraintTerm] = field(default_factory=list)
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.spec.family == "TS":
            raise ValueError("Thompson sampling is selected with thompson_select")
        if self.spec.family == "EI" and self.f_star is None:
            raise ValueError("EI needs an incumbent f_star")
        if self.spec.constrained and not self.constraints:
            raise ValueError(f"{self.spec.family} needs at least one constraint term")

    def __call__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        R, q, d = X.shape
        flat = X.reshape(R * q, d)
        spec = self.spec
        cache = {}

        def forward(model):
            key = id(model)
            if key not in cache:
                Y, vjp = model.forward_vjp(flat)
                cache[key] = [Y, vjp, np.zeros_like(Y)]
            return cache[key]

        entry = forward(self.model)
        Y = entry[0]
        n = Y.shape[0]
        F = (self.objective.value(Y) - self.shift) / self.scale  # (N, P)
        S = F.reshape(n, R, q).transpose(1, 0, 2)  # (R, N, q)
        mu = S.mean(axis=1)

        if spec.weighted and self.weight_model is not None:
            w, w_grad = self.weight_model.value_and_grad(flat)
        else:
            w, w_grad = np.ones(R * q), np.zeros((R * q, d))
        w = w.reshape(R, q)

        dw = None
        dcons = []
        fam = spec.family
        if fam == "EI":
            value, dS = acq_mod._ei(S, (self.f_star - self.shift) / self.scale)
            dmu = np.zeros_like(mu)
        elif fam in ("LCB", "LW_LCB"):
            value, dS, dmu, dw = acq_mod._lcb(S, mu, w, spec.kappa)
        elif fam == "CLSF":
            value, dS, dmu, dw = acq_mod._clsf(S, mu, w, spec.kappa, spec.epsilon)
        else:
            cvals = []
            for term in self.constraints:
                Yc = forward(term.model)[0]
                C = term.reducer.value(Yc) / term.scale
                cvals.append(C.reshape(n, R, q).transpose(1, 0, 2))
            value, dS, dmu, dw, dcons = acq_mod._lcbc(
                S, mu, w, cvals, spec.kappa, spec.delta, spec.sigmoid_steepness)

        sign = 1.0 if spec.maximize else -1.0
        # mu_j is the member mean of column j
        dS = dS + dmu[:, None, :] / n
        gF = dS.transpose(1, 0, 2).reshape(n, R * q) / self.scale
        entry[2] += gF[..., None] * self.objective.grad(Y)
        for term, dC in zip(self.constraints, dcons):
            ent = forward(term.model)
            gC = dC.transpose(1, 0, 2).reshape(n, R * q) / term.scale
            ent[2] += gC[..., None] * term.reducer.grad(ent[0])

        gx = np.zeros_like(flat)
        for Yk, vjp, cot in cache.values():
            gx += vjp(cot).sum(axis=0)
        if dw is not None:
            gx += dw.reshape(R * q)[:, None] * w_grad
        return sign * value, sign * gx.reshape(R, q, d)


def select_batch(acquisition: SurrogateAcquisition, lower, upper, config: AcqOptConfig,
                 rng: np.random.Generator) -> BatchResult:
    return optimize_batch(acquisition, lower, upper, acquisition.spec.q, config, rng)
