"""Reparameterized Monte Carlo acquisition estimators on ensemble members.

Member matrices hold ``S[i, j] = f(g_i(x_j))``: one row per ensemble member,
one column per batch point.  The underscore-prefixed kernels accept any
number of leading batch axes ``(..., N_s, q)`` and return the value together
with its partial derivatives, which the batch optimizer chains back to the
inputs.  The public ``eval_*`` functions return plain floats.

Conventions: the objective is minimized.  EI is computed on improvements
``f_star - xi``; LCB-type values are to be minimized; CLSF is maximized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import gaussian_kde

FAMILIES = ("EI", "LCB", "TS", "LW_LCB", "CLSF", "LCBC", "LW_LCBC")
HALF_PI = math.pi / 2.0


class CholeskyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class AcquisitionSpec:
    family: str = "LCB"
    kappa: float = 2.0
    q: int = 1
    epsilon: float = 1e-3
    delta: float = 3.0
    sigmoid_steepness: float = 10.0
    n_gmm: int = 2
    n_probe: int = 256

    def __post_init__(self):
        fam = self.family.upper().replace("-", "_")
        object.__setattr__(self, "family", fam)
        if fam not in FAMILIES:
            raise ValueError(f"unknown acquisition family {self.family!r}")
        if self.q < 1:
            raise ValueError("q must be at least 1")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.sigmoid_steepness <= 0:
            raise ValueError("sigmoid_steepness must be positive")

    @property
    def weighted(self) -> bool:
        return self.family.startswith("LW_")

    @property
    def constrained(self) -> bool:
        return self.family in ("LCBC", "LW_LCBC")

    @property
    def maximize(self) -> bool:
        """True when larger estimator values are better."""
        return self.family in ("EI", "CLSF")


def _members(members) -> np.ndarray:
    s = np.asarray(members, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[-2] == 0 or s.shape[-1] == 0:
        raise ValueError("empty member matrix")
    return s


def _argmax_onehot(a: np.ndarray) -> np.ndarray:
    """One-hot of the first maximizer along the last axis."""
    idx = np.argmax(a, axis=-1)
    return np.arange(a.shape[-1]) == idx[..., None]


# ---------------------------------------------------------------- kernels

def _ei(s, f_star):
    """Returns value (...), d/dS (..., N, q)."""
    imp = f_star - s
    best = imp.max(axis=-1)
    n = s.shape[-2]
    value = np.maximum(best, 0.0).mean(axis=-1)
    hot = _argmax_onehot(imp) & (best > 0.0)[..., None]
    return value, -hot.astype(np.float64) / n


def _lcb(s, mu, w, kappa, delta=0.0):
    """Value, d/dS (mu held fixed), d/dmu (direct), d/dw."""
    c = math.sqrt(kappa * HALF_PI)
    dev = s - mu[..., None, :]
    terms = mu[..., None, :] - delta - c * w[..., None, :] * np.abs(dev)
    n = s.shape[-2]
    value = terms.min(axis=-1).mean(axis=-1)
    hot = _argmax_onehot(-terms) / n  # first minimizer
    sgn = np.sign(dev)
    ds = -c * w[..., None, :] * sgn * hot
    dmu = (hot * (1.0 + c * w[..., None, :] * sgn)).sum(axis=-2)
    dw = (-c * np.abs(dev) * hot).sum(axis=-2)
    return value, ds, dmu, dw


def _clsf(s, mu, w, kappa, eps):
    c = math.sqrt(HALF_PI)
    dev = s - mu[..., None, :]
    amu = np.abs(mu)
    denom = amu ** (1.0 / kappa) + eps
    ratio = c * w[..., None, :] * np.abs(dev) / denom[..., None, :]
    n = s.shape[-2]
    value = ratio.max(axis=-1).mean(axis=-1)
    hot = _argmax_onehot(ratio) / n
    sgn = np.sign(dev)
    ds = c * w[..., None, :] * sgn / denom[..., None, :] * hot
    with np.errstate(divide="ignore", invalid="ignore"):
        ddenom = np.where(amu > 0, (1.0 / kappa) * amu ** (1.0 / kappa - 1.0) * np.sign(mu), 0.0)
    dmu = (hot * (-c * w[..., None, :] * sgn / denom[..., None, :]
                  - ratio * ddenom[..., None, :] / denom[..., None, :])).sum(axis=-2)
    dw = (hot * c * np.abs(dev) / denom[..., None, :]).sum(axis=-2)
    return value, ds, dmu, dw


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _feasibility(cvals, steepness):
    """Member-averaged batch feasibility: mean_i max_j sigmoid(k * c_ij)."""
    sg = _sigmoid(steepness * cvals)
    n = cvals.shape[-2]
    value = sg.max(axis=-1).mean(axis=-1)
    hot = _argmax_onehot(sg) / n
    return value, hot * steepness * sg * (1.0 - sg)


def _lcbc(s, mu, w, cons, kappa, delta, steepness):
    """Returns value, dS, dmu, dw, [dC_k]."""
    lval, ds, dmu, dw = _lcb(s, mu, w, kappa, delta)
    probs, dps = zip(*(_feasibility(c, steepness) for c in cons))
    probs = np.stack(probs)  # (K, ...)
    prod = np.prod(probs, axis=0)
    dcs = []
    for k, dp in enumerate(dps):
        others = np.prod(np.delete(probs, k, axis=0), axis=0) if len(probs) > 1 else np.ones_like(prod)
        dcs.append((lval * others)[..., None, None] * dp)
    p = prod[..., None]
    return lval * prod, ds * p[..., None], dmu * p, dw * p, dcs


# ---------------------------------------------------------------- public estimators

def eval_ei(members, f_star: float) -> float:
    """MC expected improvement (1/N) sum_i max_j max(f_star - xi_ij, 0)."""
    return float(_ei(_members(members), f_star)[0])


def jittered_cholesky(cov: np.ndarray, jitter: float = 1e-10, max_doublings: int = 10) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if not np.any(cov):
        return np.zeros_like(cov)  # deterministic limit, no jitter noise
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(cov.shape[0])
    for k in range(max_doublings + 1):
        try:
            return np.linalg.cholesky(cov + jitter * 2.0 ** k * eye)
        except np.linalg.LinAlgError:
            continue
    raise CholeskyError("covariance is not factorizable after jitter escalation")


def eval_ei_gaussian(mu, cov, f_star: float, eps_samples) -> float:
    """EI through ``mu + L eps`` draws with ``L L^T = cov``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    eps = _members(eps_samples)
    chol = jittered_cholesky(cov)
    xi = mu + eps @ chol.T
    return eval_ei(xi, f_star)


def _weights(weights, q):
    if weights is None:
        return np.ones(q)
    return np.asarray(weights, dtype=np.float64)


def eval_lcb(members, mu, weights=None, kappa: float = 2.0) -> float:
    """(1/N) sum_i min_j { mu_j - sqrt(kappa pi/2) w_j |xi_ij - mu_j| }; lower is better."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    s = _members(members)
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    return float(_lcb(s, mu, _weights(weights, s.shape[-1]), kappa)[0])


def eval_lw_lcb(members, mu, weight_model: "WeightModel", X, kappa: float = 2.0) -> float:
    """LCB with likelihood weights ``w(x_j)`` taken from ``weight_model``."""
    return eval_lcb(members, mu, weight_model(np.atleast_2d(X)), kappa)


def eval_clsf(members, mu, weights=None, kappa: float = 1.0, epsilon: float = 1e-3) -> float:
    """Boundary-seeking ratio of spread to |mean|^(1/kappa); higher is better."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    s = _members(members)
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    return float(_clsf(s, mu, _weights(weights, s.shape[-1]), kappa, epsilon)[0])


def eval_lcbc(objective_members, mu, objective_weights, constraint_members: Sequence,
              kappa: float = 2.0, delta: float = 3.0, steepness: float = 10.0) -> float:
    """Shifted LCB times the product of smoothed batch feasibility probabilities."""
    if constraint_members is None or len(constraint_members) == 0:
        raise ValueError("LCBC needs at least one constraint member matrix")
    s = _members(objective_members)
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    cons = [_members(c) for c in constraint_members]
    for c in cons:
        if c.shape != s.shape:
            raise ValueError(f"constraint members {c.shape} not aligned with objective {s.shape}")
    w = _weights(objective_weights, s.shape[-1])
    return float(_lcbc(s, mu, w, cons, kappa, delta, steepness)[0])


# ---------------------------------------------------------------- weight model

@dataclass
class WeightModel:
    """Gaussian mixture over normalized inputs approximating p_x(x) / p(mu(x)).

    With no components the model is flat (w = 1).
    """

    alphas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    covs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    scale: float = 1.0

    @property
    def flat(self) -> bool:
        return len(self.alphas) == 0

    def _normalize(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.lower is None:
            return x, 1.0
        span = self.upper - self.lower
        return (x - self.lower) / span, span

    def density(self, xn: np.ndarray) -> np.ndarray:
        """Mixture density at normalized points (before rescaling)."""
        return _gmm_logpdf_components(xn, self.alphas, self.means, self.covs, weighted=True)[1]

    def value_and_grad(self, x):
        """Weights at ``x`` (P, d) and their gradients in original units."""
        xn, span = self._normalize(x)
        if self.flat:
            return np.ones(xn.shape[0]), np.zeros_like(xn)
        comp, dens = _gmm_logpdf_components(xn, self.alphas, self.means, self.covs, weighted=True)
        precs = np.linalg.inv(self.covs)
        diff = xn[:, None, :] - self.means[None]  # (P, K, d)
        grad_n = -np.einsum("pk,pkd->pd", np.exp(comp), np.einsum("kde,pke->pkd", precs, diff))
        return self.scale * dens, self.scale * grad_n / span

    def __call__(self, x) -> np.ndarray:
        return self.value_and_grad(x)[0]


def _gmm_logpdf_components(x, alphas, means, covs, weighted=True):
    """Per-component weighted log densities (P, K) and the mixture density (P,)."""
    d = x.shape[1]
    chol = np.linalg.cholesky(covs)
    diff = x[:, None, :] - means[None]
    sol = np.linalg.solve(chol[None], diff[..., None])[..., 0]  # (P, K, d)
    maha = np.sum(sol ** 2, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    logp = -0.5 * (maha + logdet + d * math.log(2.0 * math.pi))
    if weighted:
        with np.errstate(divide="ignore"):
            logp = logp + np.log(alphas)
    return logp, np.exp(logp).sum(axis=1)


def weighted_em(x: np.ndarray, weights: np.ndarray, n_components: int, rng: np.random.Generator,
                iterations: int = 50, cov_floor: float = 1e-6, min_weight: float = 1e-8):
    """Fit a Gaussian mixture to weighted samples by EM.

    Components whose mixture weight falls below ``min_weight`` are dropped.
    """
    n, d = x.shape
    wts = weights / weights.sum()
    k = min(n_components, n)
    # initial means: weighted draws without replacement
    nz = np.count_nonzero(wts)
    idx = rng.choice(n, size=min(k, nz), replace=False, p=wts)
    means = x[idx].copy()
    k = len(means)
    base = np.cov(x.T, aweights=wts).reshape(d, d) + cov_floor * np.eye(d)
    covs = np.repeat(base[None], k, axis=0)
    alphas = np.full(k, 1.0 / k)
    eye = np.eye(d)
    for _ in range(iterations):
        logp, _ = _gmm_logpdf_components(x, alphas, means, covs)
        logp -= logp.max(axis=1, keepdims=True)
        resp = np.exp(logp)
        resp /= resp.sum(axis=1, keepdims=True)
        r = resp * wts[:, None]  # (n, K)
        nk = r.sum(axis=0)
        keep = nk > min_weight
        if not np.all(keep):
            r, nk, means, covs = r[:, keep], nk[keep], means[keep], covs[keep]
        alphas = nk / nk.sum()
        means = (r.T @ x) / nk[:, None]
        diff = x[None] - means[:, None, :]  # (K, n, d)
        covs = np.einsum("nk,knd,kne->kde", r, diff, diff) / nk[:, None, None] + cov_floor * eye
    return alphas, means, covs


def fit_weight_model(scalar_mean, lower, upper, n_probe: int = 256, n_gmm: int = 2,
                     rng: Optional[np.random.Generator] = None) -> WeightModel:
    """Likelihood-ratio weights w(x) = p_x(x) / p(mu(x)) as a Gaussian mixture.

    ``scalar_mean`` maps points (P, d) in original units to the ensemble's
    mean scalar objective (P,).
    """
    if n_probe < 10 * n_gmm:
        raise ValueError("n_probe must be at least 10 * n_gmm")
    rng = np.random.default_rng() if rng is None else rng
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    u = rng.uniform(size=(n_probe, lower.shape[0]))
    mu = np.asarray(scalar_mean(lower + u * (upper - lower)), dtype=np.float64)
    spread = mu.std()
    if not np.isfinite(spread) or spread <= 1e-12 * (1.0 + abs(mu.mean())):
        return WeightModel(lower=lower, upper=upper)
    # uniform box density in normalized coordinates is 1
    importance = 1.0 / np.maximum(gaussian_kde(mu, bw_method="silverman")(mu), 1e-300)
    alphas, means, covs = weighted_em(u, importance, n_gmm, rng)
    model = WeightModel(alphas, means, covs, lower, upper)
    model.scale = 1.0 / model.density(u).mean()
    return model


# ---------------------------------------------------------------- Thompson sampling

def thompson_select(model, objective, lower, upper, q: int, rng: np.random.Generator,
                    config=None) -> np.ndarray:
    """Minimize q distinct ensemble members' objective, one point each.

    ``objective`` is a scalar reducer with ``value(y)`` and ``grad(y)``.
    """
    from .acqopt import AcqOptConfig, optimize_batch

    if q > model.size:
        raise ValueError(f"q={q} exceeds the ensemble size {model.size}")
    config = config or AcqOptConfig()
    picks = rng.choice(model.size, size=q, replace=False)
    points = []
    for i in picks:
        member = model.subset([int(i)])

        def acq(X, member=member):
            R, qq, d = X.shape
            Y, vjp = member.forward_vjp(X.reshape(R * qq, d))
            val = objective.value(Y)[0]
            g = vjp(-objective.grad(Y))[0]
            return -val.reshape(R, qq)[:, 0], g.reshape(R, qq, d)

        res = optimize_batch(acq, lower, upper, 1, config, rng)
        points.append(res.x[0])
    return np.array(points)
