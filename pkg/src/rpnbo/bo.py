"""Outer Bayesian-optimization loops: plain, constrained, two-fidelity."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .acqopt import (AcqOptConfig, AcquisitionOptimizationError, ConstraintTerm, Reducer, SurrogateAcquisition,
                     latin_hypercube, optimize_batch)
from .acquisition import AcquisitionSpec, fit_weight_model, thompson_select
from .problems.base import Problem
from .records import Batch, IterationLog, RunRecord, _floats
from .ndcore import TrainingError
from .surrogate import Dataset, EnsembleConfig, predict_members, train_ensemble, train_mf

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
# surrogate or optimizer breakdowns end the run with a partial record
LOOP_FAILURES = (TrainingError, AcquisitionOptimizationError, np.linalg.LinAlgError)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _subseed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


@dataclass
class _Store:
    """Successful evaluations at one fidelity."""

    x: list
    y: list
    f: list
    c: list
    h: list  # per point: list of separate constraint outputs

    @classmethod
    def empty(cls):
        return cls([], [], [], [], [])

    def add(self, x, ev):
        self.x.append(np.asarray(x, dtype=np.float64))
        self.y.append(ev["y"])
        self.f.append(ev["f"])
        self.c.append(ev["c"])
        self.h.append(ev["h"])

    @property
    def n(self) -> int:
        return len(self.x)

    def best_feasible(self) -> Optional[float]:
        best = None
        for f, c in zip(self.f, self.c):
            if all(ci >= 0.0 for ci in c) and (best is None or f < best):
                best = f
        return best


def _evaluate_batch(problem: Problem, X, fidelity: str, store: _Store) -> Batch:
    xs, ys, fs, cs, errs = [], [], [], [], []
    for x in np.atleast_2d(X):
        try:
            ev = problem.evaluate(x) if fidelity == "H" else problem.evaluate_low(x)
        except Exception as exc:  # black boxes may fail in arbitrary ways
            log.warning("evaluation failed at %s: %s", x, exc)
            xs.append(_floats(x))
            ys.append(None)
            fs.append(None)
            cs.append(None)
            errs.append(f"{type(exc).__name__}: {exc}")
            continue
        store.add(x, ev)
        xs.append(_floats(x))
        ys.append(_floats(ev["y"]))
        fs.append(ev["f"])
        cs.append(list(ev["c"]))
        errs.append(None)
    return Batch(fidelity, xs, ys, fs, cs, errs)


def _initial_design(problem: Problem, n: int, rng) -> np.ndarray:
    dom = problem.domain
    return dom.lower + latin_hypercube(n, dom.dim, rng) * (dom.upper - dom.lower)


def _scaling(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(max(v.std(), SCALE_FLOOR))


def _header(problem, seed, extra) -> dict:
    h = {"problem": problem.name, "seed": int(seed)}
    h.update(extra or {})
    return h


def _objective_surrogate_stats(model, objective: Reducer):
    def scalar_mean(X):
        return objective.value(predict_members(model, X)).mean(axis=0)
    return scalar_mean


def _acquire(problem: Problem, model, spec: AcquisitionSpec, store: _Store, rng, acq_config,
             constraint_models, objective: Optional[Reducer] = None):
    """Choose the next batch on ``model`` for the given acquisition."""
    objective = objective or problem.objective
    dom = problem.domain
    if spec.family == "TS":
        return thompson_select(model, objective, dom.lower, dom.upper, spec.q, rng, acq_config)
    weight_model = None
    if spec.weighted:
        weight_model = fit_weight_model(_objective_surrogate_stats(model, objective), dom.lower, dom.upper,
                                        spec.n_probe, spec.n_gmm, rng)
    shift, scale = 0.0, 1.0
    f_star = None
    if spec.family == "EI":
        best = store.best_feasible()
        f_star = best if best is not None else float(np.min(store.f))
    if spec.constrained:
        shift, scale = _scaling(store.f)
    acq = SurrogateAcquisition(spec, model, objective, f_star, weight_model, constraint_models, shift, scale)
    return optimize_batch(acq, dom.lower, dom.upper, spec.q, acq_config, rng).x


def _constraint_terms(problem: Problem, objective_model, store: _Store, train_separate):
    """One ConstraintTerm per constraint; shared-output constraints reuse the objective model."""
    terms = []
    cvals = np.asarray(store.c, dtype=np.float64)
    k_sep = 0
    for k, con in enumerate(problem.constraints):
        if con.shares_output:
            model = objective_model
        else:
            model = train_separate(k_sep)
            k_sep += 1
        scale = float(max(cvals[:, k].std(), SCALE_FLOOR)) if cvals.size else 1.0
        terms.append(ConstraintTerm(model, con.reducer, scale))
    return terms


def run_bo(problem: Problem, n_init: int, budget: int, spec: AcquisitionSpec, ens_config: EnsembleConfig,
           seed: int, acq_config: Optional[AcqOptConfig] = None, header: Optional[dict] = None) -> RunRecord:
    """Single-fidelity loop, with constraints gated in when ``spec`` is LCBC-type."""
    if n_init < 2:
        raise ValueError("need at least 2 initial points")
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if spec.constrained and not problem.constraints:
        raise ValueError(f"{spec.family} needs a problem with constraints")
    acq_config = acq_config or AcqOptConfig()
    dom = problem.domain
    store = _Store.empty()
    record = RunRecord(_header(problem, seed, header))

    batch = _evaluate_batch(problem, _initial_design(problem, n_init, _rng(seed, 0)), "H", store)
    n_hf = len(batch.x)
    n_trainings = 0
    n_cfits = 0
    record.iterations.append(IterationLog(0, [batch], store.best_feasible(), n_hf, 0, 0, 0))
    record.timings.append({"iteration": 0, "train_seconds": 0.0, "acq_seconds": 0.0})
    if store.n < 2:
        record.status, record.message = "aborted", "fewer than 2 successful initial evaluations"
        return record

    try:
        for t in range(1, budget + 1):
            t0 = time.perf_counter()
            cfg = replace(ens_config, seed=_subseed(seed, 2, t))
            model = train_ensemble(Dataset(np.array(store.x), np.array(store.y)), cfg, dom.lower, dom.upper,
                                   problem.output_coords)
            n_trainings += 1
            terms = []
            if spec.constrained:
                def train_separate(k, t=t):
                    ys = np.array([h[k] for h in store.h])
                    return train_ensemble(Dataset(np.array(store.x), ys), replace(ens_config, seed=_subseed(seed, 3, t, k)),
                                          dom.lower, dom.upper)
                terms = _constraint_terms(problem, model, store, train_separate)
                n_cfits += len(terms)
            t1 = time.perf_counter()
            X = _acquire(problem, model, spec, store, _rng(seed, 1, t), acq_config, terms)
            t2 = time.perf_counter()
            batch = _evaluate_batch(problem, X, "H", store)
            n_hf += len(batch.x)
            record.iterations.append(IterationLog(t, [batch], store.best_feasible(), n_hf, 0, n_trainings, n_cfits))
            record.timings.append({"iteration": t, "train_seconds": t1 - t0, "acq_seconds": t2 - t1})
            log.info("iteration %d: best feasible %s", t, store.best_feasible())
            if batch.n_ok == 0:
                record.status, record.message = "aborted", f"every evaluation failed at iteration {t}"
                return record
    except LOOP_FAILURES as exc:
        log.error("run stopped: %s", exc)
        record.status, record.message = "failed", f"{type(exc).__name__}: {exc}"
        return record
    if problem.constraints and store.best_feasible() is None:
        record.status = "no_feasible"
    return record


def run_random(problem: Problem, n_init: int, budget: int, q: int, seed: int,
               header: Optional[dict] = None) -> RunRecord:
    """Random-search baseline sharing run_bo's initial design and record format."""
    dom = problem.domain
    store = _Store.empty()
    record = RunRecord(_header(problem, seed, header))
    batch = _evaluate_batch(problem, _initial_design(problem, n_init, _rng(seed, 0)), "H", store)
    n_hf = len(batch.x)
    record.iterations.append(IterationLog(0, [batch], store.best_feasible(), n_hf, 0, 0))
    rng = _rng(seed, 4)
    for t in range(1, budget + 1):
        X = dom.lower + rng.uniform(size=(q, dom.dim)) * (dom.upper - dom.lower)
        batch = _evaluate_batch(problem, X, "H", store)
        n_hf += len(batch.x)
        record.iterations.append(IterationLog(t, [batch], store.best_feasible(), n_hf, 0, 0))
    if problem.constraints and store.best_feasible() is None:
        record.status = "no_feasible"
    return record


def run_constrained_mf_bo(problem: Problem, n_init: int, budget: int, spec_objective: AcquisitionSpec,
                          ens_config_low: EnsembleConfig, ens_config_high: EnsembleConfig, seed: int,
                          spec_constraint_explore: Optional[AcquisitionSpec] = None, n_init_low: Optional[int] = None,
                          schedule: str = "HL", acq_config: Optional[AcqOptConfig] = None,
                          header: Optional[dict] = None) -> RunRecord:
    """Two-fidelity loop.

    Each iteration retrains the stacked surrogates, then follows
    ``schedule``: "H" acquires on the high-fidelity stack with
    ``spec_objective``, "L" explores the low level with
    ``spec_constraint_explore`` on the first constraint (LCB on the
    objective when no constraint exists or no explore spec is given).
    """
    if problem.low_fidelity is None:
        raise ValueError("problem has no low-fidelity model")
    if not schedule or set(schedule) - {"H", "L"}:
        raise ValueError("schedule must be a non-empty string over 'H' and 'L'")
    if spec_objective.constrained and not problem.constraints:
        raise ValueError(f"{spec_objective.family} needs a problem with constraints")
    acq_config = acq_config or AcqOptConfig()
    n_init_low = n_init_low or 2 * n_init
    dom = problem.domain
    hi, lo = _Store.empty(), _Store.empty()
    record = RunRecord(_header(problem, seed, header))

    b_hi = _evaluate_batch(problem, _initial_design(problem, n_init, _rng(seed, 0)), "H", hi)
    b_lo = _evaluate_batch(problem, _initial_design(problem, n_init_low, _rng(seed, 5)), "L", lo)
    n_hf, n_lf = len(b_hi.x), len(b_lo.x)
    n_trainings = 0
    n_cfits = 0
    record.iterations.append(IterationLog(0, [b_hi, b_lo], hi.best_feasible(), n_hf, n_lf, 0, 0))
    record.timings.append({"iteration": 0, "train_seconds": 0.0, "acq_seconds": 0.0})
    if hi.n < 2 or lo.n < 2:
        record.status, record.message = "aborted", "fewer than 2 successful initial evaluations per fidelity"
        return record

    explore = spec_constraint_explore
    if explore is not None and (explore.family in ("EI", "TS") or explore.constrained):
        raise ValueError("constraint exploration supports CLSF and LCB-type families")
    try:
        for t in range(1, budget + 1):
            t0 = time.perf_counter()
            cfg_l = replace(ens_config_low, seed=_subseed(seed, 2, t, 0))
            cfg_h = replace(ens_config_high, seed=_subseed(seed, 2, t, 1))
            model = train_mf(Dataset(np.array(lo.x), np.array(lo.y)), Dataset(np.array(hi.x), np.array(hi.y)),
                             cfg_l, cfg_h, dom.lower, dom.upper)
            n_trainings += 2
            terms = []
            if spec_objective.constrained or explore is not None:
                def train_separate(k, t=t):
                    yl = np.array([h[k] for h in lo.h])
                    yh = np.array([h[k] for h in hi.h])
                    return train_mf(Dataset(np.array(lo.x), yl), Dataset(np.array(hi.x), yh),
                                    replace(ens_config_low, seed=_subseed(seed, 3, t, k, 0)),
                                    replace(ens_config_high, seed=_subseed(seed, 3, t, k, 1)), dom.lower, dom.upper)
                terms = _constraint_terms(problem, model, hi, train_separate)
                n_cfits += len(terms)
            t1 = time.perf_counter()
            batches = []
            for k, fid in enumerate(schedule):
                rng = _rng(seed, 1, t, k)
                if fid == "H":
                    X = _acquire(problem, model, spec_objective, hi, rng, acq_config,
                                 terms if spec_objective.constrained else [])
                    batches.append(_evaluate_batch(problem, X, "H", hi))
                    n_hf += len(batches[-1].x)
                else:
                    if explore is not None and problem.constraints:
                        con = problem.constraints[0]
                        low_model = terms[0].model.low
                        cl = np.asarray(lo.c, dtype=np.float64)[:, 0]
                        X = _acquire_on(problem, low_model, explore, con.reducer, _scaling(cl)[1], rng, acq_config)
                    else:
                        X = _acquire(problem, model.low, AcquisitionSpec("LCB", q=1), lo, rng, acq_config, [])
                    batches.append(_evaluate_batch(problem, X, "L", lo))
                    n_lf += len(batches[-1].x)
            t2 = time.perf_counter()
            record.iterations.append(IterationLog(t, batches, hi.best_feasible(), n_hf, n_lf, n_trainings, n_cfits))
            record.timings.append({"iteration": t, "train_seconds": t1 - t0, "acq_seconds": t2 - t1})
            if all(b.n_ok == 0 for b in batches):
                record.status, record.message = "aborted", f"every evaluation failed at iteration {t}"
                return record
    except LOOP_FAILURES as exc:
        log.error("run stopped: %s", exc)
        record.status, record.message = "failed", f"{type(exc).__name__}: {exc}"
        return record
    if problem.constraints and hi.best_feasible() is None:
        record.status = "no_feasible"
    return record


def _acquire_on(problem, model, spec, reducer, scale, rng, acq_config):
    """Boundary exploration: CLSF (or a plain LCB-type family) on a constraint surrogate."""
    if spec.family in ("EI", "TS") or spec.constrained:
        raise ValueError("constraint exploration supports CLSF and LCB-type families")
    dom = problem.domain
    acq = SurrogateAcquisition(spec, model, reducer, scale=scale)
    return optimize_batch(acq, dom.lower, dom.upper, spec.q, acq_config, rng).x
