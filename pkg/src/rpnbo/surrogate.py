"""Bootstrapped ensembles of randomized-prior networks.

Each member predicts ``trainable(x) + beta * prior(x)`` where ``prior`` is
frozen at its random initialization.  Members are stored stacked along a
leading axis and trained together in chunks; chunking never changes the
result for a given member.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .ndcore import (
    DeepONetParams,
    DimensionError,
    MlpParams,
    TrainingError,
    adam_init,
    adam_step,
    deeponet_backprop,
    deeponet_forward_cached,
    glorot_deeponet,
    glorot_mlp,
    mlp_backprop,
    mlp_forward_cached,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STD_FLOOR = 1e-8
WORKERS_ENV = "RPNBO_TRAIN_WORKERS"


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    ensemble_size: int = 128
    arch: str = "mlp"  # "mlp" or "deeponet"
    hidden: tuple[int, ...] = (64, 64)
    latent: int = 64  # DeepONet branch/trunk output width
    iterations: int = 5000
    learning_rate: float = 1e-3
    lr_decay: float = 0.999
    bootstrap_fraction: float = 0.8
    activation: str = "tanh"
    beta: float = 1.0
    seed: int = 0
    workers: Optional[int] = None  # None: read RPNBO_TRAIN_WORKERS, default 1
    chunk_size: Optional[int] = None

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2")
        if self.arch not in ("mlp", "deeponet"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Dataset:
    x: np.ndarray  # (n, d), original units
    y: np.ndarray  # (n, s)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionError(f"{self.x.shape[0]} inputs but {self.y.shape[0]} outputs")
        if self.x.shape[0] < 1:
            raise InsufficientDataError("dataset is empty")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class Normalizer:
    """Per-dimension affine map ``z = (v - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(self.scale == 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError("normalizer scale must be finite and nonzero")

    @classmethod
    def from_bounds(cls, lower, upper) -> "Normalizer":
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        return cls(lower, upper - lower)

    @classmethod
    def zscore(cls, y: np.ndarray) -> "Normalizer":
        return cls(y.mean(axis=0), np.maximum(y.std(axis=0), STD_FLOOR))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def norm(self, v):
        return (v - self.shift) / self.scale

    def denorm(self, z):
        return z * self.scale + self.shift


@dataclass
class RpnMember:
    """View of one ensemble member."""

    trainable: object
    prior: object
    beta: float
    bootstrap_mask: np.ndarray


# ---------------------------------------------------------------- architecture glue

def _init_params(cfg: EnsembleConfig, rng, in_dim, out_dim, coord_dim):
    if cfg.arch == "mlp":
        return glorot_mlp(rng, [in_dim, *cfg.hidden, out_dim], cfg.activation)
    return glorot_deeponet(rng, in_dim, coord_dim, cfg.hidden, cfg.latent, cfg.activation)


def _forward(params, x, coords):
    if isinstance(params, MlpParams):
        return mlp_forward_cached(params, x)
    return deeponet_forward_cached(params, x, coords)


def _backprop(params, cache, g, input_grad=False):
    if isinstance(params, MlpParams):
        return mlp_backprop(params, cache, g, input_grad)
    return deeponet_backprop(params, cache, g, input_grad)


def _stack(params_list):
    first = params_list[0]
    tensors = [np.stack(ts) for ts in zip(*(p.tensors() for p in params_list))]
    return first.with_tensors(tensors)


def _concat(params_list):
    first = params_list[0]
    tensors = [np.concatenate(ts) for ts in zip(*(p.tensors() for p in params_list))]
    return first.with_tensors(tensors)


def _member_rng(seed: int, member: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(member, attempt)))


# ---------------------------------------------------------------- ensemble

@dataclass
class Ensemble:
    trainable: object  # stacked MlpParams / DeepONetParams, leading axis = member
    prior: object
    masks: np.ndarray  # (N_s, m) training indices per member
    input_norm: Normalizer
    output_norm: Normalizer
    config: EnsembleConfig
    coords: Optional[np.ndarray] = None  # (s, c) DeepONet trunk inputs
    beta: float = 1.0
    final_loss: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.masks.shape[0]

    @property
    def in_dim(self) -> int:
        return self.trainable.in_dim

    @property
    def out_dim(self) -> int:
        return self.output_norm.shift.shape[0]

    @property
    def seed(self) -> int:
        return self.config.seed

    def member(self, i: int) -> RpnMember:
        return RpnMember(self.trainable.take(i), self.prior.take(i), self.beta, self.masks[i])

    def subset(self, index) -> "Ensemble":
        index = np.atleast_1d(index)
        return replace(self, trainable=self.trainable.take(index), prior=self.prior.take(index),
                       masks=self.masks[index],
                       final_loss=None if self.final_loss is None else self.final_loss[index])

    # normalized-space evaluation; inputs (P, d) shared or (N, P, d) per member
    def forward_normalized(self, xn: np.ndarray):
        zt, ct = _forward(self.trainable, xn, self.coords)
        zp, cp = _forward(self.prior, xn, self.coords)
        return zt + self.beta * zp, (ct, cp)

    def backward_normalized(self, cache, g: np.ndarray) -> np.ndarray:
        ct, cp = cache
        _, gt = _backprop(self.trainable, ct, g, input_grad=True)
        _, gp = _backprop(self.prior, cp, g, input_grad=True)
        return gt + self.beta * gp

    def forward_vjp(self, x: np.ndarray):
        """Member outputs at points ``x`` (P, d) plus a pullback to ``x``.

        Returns ``(Y, vjp)`` with ``Y`` of shape (N_s, P, s) in original units
        and ``vjp(G)`` mapping an (N_s, P, s) cotangent to (N_s, P, d).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"input width {x.shape[-1]} != {self.in_dim}")
        z, cache = self.forward_normalized(self.input_norm.norm(x))
        y = self.output_norm.denorm(z)

        def vjp(g):
            gx = self.backward_normalized(cache, g * self.output_norm.scale)
            return gx / self.input_norm.scale

        return y, vjp


def predict_members(e, x) -> np.ndarray:
    """Per-member predictions in original units.

    ``x`` of shape (d,) gives (N_s, s); (P, d) gives (N_s, P, s).
    Works for both Ensemble and MfEnsemble.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    y, _ = e.forward_vjp(x[None, :] if single else x)
    return y[:, 0, :] if single else y


def predict_stats(e, x):
    """Ensemble mean and population standard deviation."""
    ys = predict_members(e, x)
    return ys.mean(axis=0), ys.std(axis=0)


def _resolve_workers(cfg: EnsembleConfig) -> int:
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _train_chunk(cfg: EnsembleConfig, members: Sequence[int], attempt: int, xn, zy, coords,
                 n: int, m: int):
    """Train a contiguous group of members; returns stacked params, masks, losses."""
    out_dim = zy.shape[-1]
    in_dim = xn.shape[-1]
    coord_dim = None if coords is None else coords.shape[-1]
    trains, priors, masks = [], [], []
    for i in members:
        rng = _member_rng(cfg.seed, i, attempt)
        trains.append(_init_params(cfg, rng, in_dim, out_dim, coord_dim))
        priors.append(_init_params(cfg, rng, in_dim, out_dim, coord_dim))
        masks.append(np.sort(rng.choice(n, size=m, replace=False)))
    params = _stack(trains)
    prior = _stack(priors)
    masks = np.stack(masks)

    if xn.ndim == 2:
        xb = xn[masks]
    else:  # member-specific inputs (N_s, n, d)
        xb = np.stack([xn[i][mk] for i, mk in zip(members, masks)])
    yb = zy[masks]
    # the prior is frozen, so its contribution is a constant offset
    prior_out, _ = _forward(prior, xb, coords)
    target = yb - cfg.beta * prior_out

    state = adam_init(params, cfg.learning_rate, cfg.lr_decay)
    scale = 2.0 / (m * out_dim)
    for _ in range(cfg.iterations):
        out, cache = _forward(params, xb, coords)
        resid = out - target
        grads, _ = _backprop(params, cache, resid * scale)
        params, state = adam_step(params, grads, state, check_finite=False)
    out, _ = _forward(params, xb, coords)
    loss = np.mean((out - target) ** 2, axis=(-2, -1))
    return params, prior, masks, loss


def _train_members(cfg: EnsembleConfig, xn: np.ndarray, zy: np.ndarray, coords):
    n = zy.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 training points, got {n}")
    m = max(1, int(np.floor(cfg.bootstrap_fraction * n)))
    size = cfg.ensemble_size
    workers = _resolve_workers(cfg)
    chunk = cfg.chunk_size or max(1, -(-size // workers))
    groups = [list(range(s, min(s + chunk, size))) for s in range(0, size, chunk)]

    def run(group):
        return _train_chunk(cfg, group, 0, xn, zy, coords, n, m)

    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]

    params = _concat([r[0] for r in results])
    prior = _concat([r[1] for r in results])
    masks = np.concatenate([r[2] for r in results])
    loss = np.concatenate([r[3] for r in results])

    bad = np.flatnonzero(~np.isfinite(loss))
    for i in bad:
        log.warning("member %d diverged (loss %s); retraining with a fresh seed", i, loss[i])
        p1, q1, mk1, l1 = _train_chunk(cfg, [int(i)], 1, xn, zy, coords, n, m)
        if not np.all(np.isfinite(l1)):
            raise TrainingError(f"member {i} diverged twice; last loss {l1[0]}")
        ts = params.tensors()
        for t, t1 in zip(ts, p1.tensors()):
            t[i] = t1[0]
        qs = prior.tensors()
        for t, t1 in zip(qs, q1.tensors()):
            t[i] = t1[0]
        masks[i] = mk1[0]
        loss[i] = l1[0]
    return params, prior, masks, loss


def train_ensemble(data: Dataset, config: EnsembleConfig, lower=None, upper=None,
                   coords: Optional[np.ndarray] = None) -> Ensemble:
    """Train ``config.ensemble_size`` randomized-prior members from scratch.

    Inputs are mapped to [0, 1] with the box ``lower``/``upper`` (the data
    range if omitted); outputs are z-scored with training statistics.
    """
    if lower is None or upper is None:
        lower = data.x.min(axis=0)
        upper = data.x.max(axis=0)
        upper = np.where(upper > lower, upper, lower + 1.0)
    in_norm = Normalizer.from_bounds(lower, upper)
    out_norm = Normalizer.zscore(data.y)
    if config.arch == "deeponet":
        if coords is None:
            coords = np.linspace(0.0, 1.0, data.y.shape[1])[:, None]
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.shape[0] != data.y.shape[1]:
            raise DimensionError("need one coordinate row per output dimension")
    else:
        coords = None
    params, prior, masks, loss = _train_members(config, in_norm.norm(data.x), out_norm.norm(data.y), coords)
    return Ensemble(params, prior, masks, in_norm, out_norm, config, coords, config.beta, loss)


# ---------------------------------------------------------------- multi-fidelity

@dataclass
class MfEnsemble:
    """Two-level stack: high member i consumes [low_i(x) ; x]."""

    low: Ensemble
    high: Ensemble

    def __post_init__(self):
        if self.low.size != self.high.size:
            raise ValueError("both fidelity levels need the same member count")

    @property
    def size(self) -> int:
        return self.high.size

    @property
    def in_dim(self) -> int:
        return self.low.in_dim

    @property
    def out_dim(self) -> int:
        return self.high.out_dim

    def subset(self, index) -> "MfEnsemble":
        return MfEnsemble(self.low.subset(index), self.high.subset(index))

    def _features(self, x):
        xn = self.low.input_norm.norm(x)
        zl, cache_l = self.low.forward_normalized(xn)
        feats = np.concatenate([zl, np.broadcast_to(xn, zl.shape[:-1] + xn.shape[-1:])], axis=-1)
        return feats, cache_l

    def forward_vjp(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"input width {x.shape[-1]} != {self.in_dim}")
        feats, cache_l = self._features(x)
        zh, cache_h = self.high.forward_normalized(feats)
        y = self.high.output_norm.denorm(zh)
        s_low = self.low.out_dim

        def vjp(g):
            gf = self.high.backward_normalized(cache_h, g * self.high.output_norm.scale)
            gxn = gf[..., s_low:] + self.low.backward_normalized(cache_l, gf[..., :s_low])
            return gxn / self.low.input_norm.scale

        return y, vjp


def predict_mf_members(m: MfEnsemble, x) -> np.ndarray:
    return predict_members(m, x)


def train_mf(data_low: Dataset, data_high: Dataset, config_low: EnsembleConfig,
             config_high: EnsembleConfig, lower=None, upper=None) -> MfEnsemble:
    """Fit the low-fidelity ensemble, then each high member on its paired low member."""
    if data_low.x.shape[1] != data_high.x.shape[1]:
        raise DimensionError("fidelity levels must share the input dimension")
    if config_low.ensemble_size != config_high.ensemble_size:
        raise ValueError("both fidelity levels need the same ensemble size")
    if lower is None or upper is None:
        allx = np.vstack([data_low.x, data_high.x])
        lower, upper = allx.min(axis=0), allx.max(axis=0)
        upper = np.where(upper > lower, upper, lower + 1.0)
    low = train_ensemble(data_low, config_low, lower, upper)
    # low outputs enter in the low ensemble's normalized scale
    xn = low.input_norm.norm(data_high.x)
    zl, _ = low.forward_normalized(xn)
    feats = np.concatenate([zl, np.broadcast_to(xn, zl.shape[:-1] + xn.shape[-1:])], axis=-1)
    out_norm = Normalizer.zscore(data_high.y)
    if config_high.arch != "mlp":
        raise ValueError("the high-fidelity level supports the mlp architecture only")
    params, prior, masks, loss = _train_members(config_high, feats, out_norm.norm(data_high.y), None)
    high = Ensemble(params, prior, masks, Normalizer.identity(feats.shape[-1]), out_norm,
                    config_high, None, config_high.beta, loss)
    return MfEnsemble(low, high)


# ---------------------------------------------------------------- serialization

def _ensemble_arrays(e: Ensemble, prefix: str) -> tuple[dict, dict]:
    arrays = {}
    for name, params in (("trainable", e.trainable), ("prior", e.prior)):
        for k, t in enumerate(params.tensors()):
            arrays[f"{prefix}{name}_{k}"] = t
    arrays[f"{prefix}masks"] = e.masks
    arrays[f"{prefix}in_shift"] = e.input_norm.shift
    arrays[f"{prefix}in_scale"] = e.input_norm.scale
    arrays[f"{prefix}out_shift"] = e.output_norm.shift
    arrays[f"{prefix}out_scale"] = e.output_norm.scale
    if e.coords is not None:
        arrays[f"{prefix}coords"] = e.coords
    if e.final_loss is not None:
        arrays[f"{prefix}final_loss"] = e.final_loss
    meta = {
        "config": e.config.to_dict(),
        "beta": e.beta,
        "arch": e.config.arch,
        "n_tensors": len(e.trainable.tensors()),
        "activation": e.config.activation,
        "seed": e.config.seed,
    }
    return arrays, meta


def _template(cfg: EnsembleConfig, tensors):
    n_layers = len(cfg.hidden) + 1
    if cfg.arch == "mlp":
        return MlpParams(tensors[:n_layers], tensors[n_layers:2 * n_layers], cfg.activation)
    nb = 2 * n_layers
    branch = MlpParams(tensors[:n_layers], tensors[n_layers:nb], cfg.activation)
    trunk = MlpParams(tensors[nb:nb + n_layers], tensors[nb + n_layers:2 * nb], cfg.activation)
    return DeepONetParams(branch, trunk, tensors[2 * nb])


def _ensemble_from(arrays, meta: dict, prefix: str) -> Ensemble:
    cfg_d = dict(meta["config"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    cfg = EnsembleConfig(**cfg_d)
    nt = meta["n_tensors"]
    trainable = _template(cfg, [arrays[f"{prefix}trainable_{k}"] for k in range(nt)])
    prior = _template(cfg, [arrays[f"{prefix}prior_{k}"] for k in range(nt)])
    coords = arrays[f"{prefix}coords"] if f"{prefix}coords" in arrays else None
    loss = arrays[f"{prefix}final_loss"] if f"{prefix}final_loss" in arrays else None
    return Ensemble(
        trainable, prior, arrays[f"{prefix}masks"],
        Normalizer(arrays[f"{prefix}in_shift"], arrays[f"{prefix}in_scale"]),
        Normalizer(arrays[f"{prefix}out_shift"], arrays[f"{prefix}out_scale"]),
        cfg, coords, meta["beta"], loss,
    )


def save_ensemble(model, path) -> None:
    """Write an Ensemble or MfEnsemble to a versioned ``.npz`` archive."""
    if isinstance(model, MfEnsemble):
        a_low, m_low = _ensemble_arrays(model.low, "low/")
        a_high, m_high = _ensemble_arrays(model.high, "high/")
        arrays = {**a_low, **a_high}
        meta = {"version": FORMAT_VERSION, "kind": "mf", "low": m_low, "high": m_high}
    else:
        arrays, m = _ensemble_arrays(model, "")
        meta = {"version": FORMAT_VERSION, "kind": "single", "ensemble": m}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_ensemble(path):
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported ensemble format version {meta.get('version')}")
    if meta["kind"] == "mf":
        return MfEnsemble(_ensemble_from(arrays, meta["low"], "low/"),
                          _ensemble_from(arrays, meta["high"], "high/"))
    return _ensemble_from(arrays, meta["ensemble"], "")
