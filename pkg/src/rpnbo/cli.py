"""Command-line front end: ``rpnbo run|aggregate|baseline-random|list-problems``."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .acqopt import AcqOptConfig
from .acquisition import FAMILIES, AcquisitionSpec
from .bo import run_bo, run_constrained_mf_bo, run_random
from .problems import REGISTRY, get_problem
from .records import RunRecord, aggregate, aggregate_glob, read_record, rows_to_csv
from .surrogate import EnsembleConfig

log = logging.getLogger("rpnbo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_NO_FEASIBLE = 4

SEED_WORKERS_ENV = "RPNBO_SEED_WORKERS"


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    problem: str
    family: str = "LCB"
    kappa: float = 2.0
    q: int = 1
    epsilon: float = 1e-3
    delta: float = 3.0
    sigmoid_steepness: float = 10.0
    n_gmm: int = 2
    n_probe: int = 256
    ensemble_size: int = 128
    arch: str = "mlp"
    hidden: list = field(default_factory=lambda: [64, 64])
    latent: int = 64
    iterations: int = 5000
    learning_rate: float = 1e-3
    n_init: int = 5
    budget: int = 40
    seeds: list = field(default_factory=lambda: [0])
    fidelity_schedule: Optional[str] = None  # e.g. "HL"; None runs single-fidelity
    explore_family: Optional[str] = None  # low-fidelity constraint exploration, e.g. "CLSF"
    n_init_low: Optional[int] = None
    low_iterations: Optional[int] = None
    restarts: int = 16
    acq_steps: int = 200
    acq_learning_rate: float = 1e-2
    problem_options: dict = field(default_factory=dict)
    output_dir: str = "runs"

    @property
    def multi_fidelity(self) -> bool:
        return self.fidelity_schedule is not None

    def acquisition_spec(self) -> AcquisitionSpec:
        return AcquisitionSpec(self.family, self.kappa, self.q, self.epsilon, self.delta,
                               self.sigmoid_steepness, self.n_gmm, self.n_probe)

    def explore_spec(self) -> Optional[AcquisitionSpec]:
        if self.explore_family is None:
            return None
        return AcquisitionSpec(self.explore_family, self.kappa, 1, self.epsilon, n_gmm=self.n_gmm,
                               n_probe=self.n_probe)

    def ensemble_config(self, low: bool = False) -> EnsembleConfig:
        iters = self.low_iterations if (low and self.low_iterations) else self.iterations
        return EnsembleConfig(ensemble_size=self.ensemble_size, arch=self.arch, hidden=tuple(self.hidden),
                              latent=self.latent, iterations=iters, learning_rate=self.learning_rate)

    def acq_config(self) -> AcqOptConfig:
        return AcqOptConfig(self.restarts, self.acq_steps, self.acq_learning_rate)

    def canonical(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.canonical(), sort_keys=True, default_flow_style=None)

    def config_hash(self) -> str:
        """Hash of every setting except where the artifacts go."""
        body = {k: v for k, v in self.canonical().items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_INTS = {"q", "n_gmm", "n_probe", "ensemble_size", "latent", "iterations", "n_init", "budget", "restarts",
         "acq_steps", "n_init_low", "low_iterations"}
_FLOATS = {"kappa", "epsilon", "delta", "sigmoid_steepness", "learning_rate", "acq_learning_rate"}


def _coerce(name: str, value):
    if value is None:
        if name in ("fidelity_schedule", "explore_family", "n_init_low", "low_iterations"):
            return None
        raise ConfigError(name, "must not be null")
    if name in _INTS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if name in _FLOATS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if name == "hidden":
        if not isinstance(value, list) or not value or not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(name, "expected a non-empty list of positive integers")
        return list(value)
    if name == "seeds":
        if isinstance(value, int) and not isinstance(value, bool):
            if value < 1:
                raise ConfigError(name, "seed count must be positive")
            return list(range(value))
        if isinstance(value, list) and value and all(isinstance(v, int) and v >= 0 for v in value):
            if len(set(value)) != len(value):
                raise ConfigError(name, "seeds must be distinct")
            return list(value)
        raise ConfigError(name, "expected a positive count or a list of non-negative integers")
    if name == "problem_options":
        if not isinstance(value, dict):
            raise ConfigError(name, "expected a mapping")
        return dict(value)
    if not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a flat mapping into an ExperimentConfig, raising ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping of field names to values")
    for key in data:
        if key not in _FIELDS:
            raise ConfigError(str(key), "unknown field")
    if "problem" not in data:
        raise ConfigError("problem", "required field is missing")
    values = {k: _coerce(k, v) for k, v in data.items()}
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def _check(name: str, fn):
    try:
        return fn()
    except (ValueError, TypeError, KeyError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise ConfigError(name, str(msg)) from None


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.problem not in REGISTRY:
        raise ConfigError("problem", f"unknown problem id {cfg.problem!r}; choose from {sorted(REGISTRY)}")
    if cfg.family.upper().replace("-", "_") not in FAMILIES:
        raise ConfigError("family", f"unknown acquisition family {cfg.family!r}")
    if cfg.arch not in ("mlp", "deeponet"):
        raise ConfigError("arch", f"unknown architecture {cfg.arch!r}; choose mlp or deeponet")
    spec = _check("family", cfg.acquisition_spec)
    _check("explore_family", cfg.explore_spec)
    _check("ensemble_size", cfg.ensemble_config)
    _check("restarts", cfg.acq_config)
    if cfg.n_init < 2:
        raise ConfigError("n_init", "need at least 2 initial points")
    if cfg.budget < 0:
        raise ConfigError("budget", "must be non-negative")
    if spec.family == "TS" and cfg.q > cfg.ensemble_size:
        raise ConfigError("q", "Thompson sampling needs q <= ensemble_size")
    problem = _check("problem_options", lambda: get_problem(cfg.problem, **cfg.problem_options))
    if spec.constrained and not problem.constraints:
        raise ConfigError("family", f"{spec.family} needs a problem with constraints")
    if cfg.multi_fidelity:
        if not cfg.fidelity_schedule or set(cfg.fidelity_schedule) - {"H", "L"}:
            raise ConfigError("fidelity_schedule", "expected a non-empty string over 'H' and 'L'")
        if problem.low_fidelity is None:
            raise ConfigError("fidelity_schedule", f"problem {cfg.problem!r} has no low-fidelity model")
        if cfg.arch != "mlp":
            raise ConfigError("arch", "two-fidelity runs support the mlp architecture only")
    elif cfg.explore_family is not None:
        raise ConfigError("explore_family", "only used with a fidelity_schedule")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    return parse_config(data or {})


def _header(cfg: ExperimentConfig, kind: str) -> dict:
    # where artifacts go is not part of the experiment; reruns elsewhere stay byte-identical
    body = {k: v for k, v in cfg.canonical().items() if k != "output_dir"}
    return {"config": body, "config_hash": cfg.config_hash(), "kind": kind}


def run_seed(cfg: ExperimentConfig, seed: int) -> RunRecord:
    problem = get_problem(cfg.problem, **cfg.problem_options)
    header = _header(cfg, "bo")
    if cfg.multi_fidelity:
        return run_constrained_mf_bo(problem, cfg.n_init, cfg.budget, cfg.acquisition_spec(),
                                     cfg.ensemble_config(low=True), cfg.ensemble_config(), seed,
                                     spec_constraint_explore=cfg.explore_spec(), n_init_low=cfg.n_init_low,
                                     schedule=cfg.fidelity_schedule, acq_config=cfg.acq_config(), header=header)
    return run_bo(problem, cfg.n_init, cfg.budget, cfg.acquisition_spec(), cfg.ensemble_config(), seed,
                  cfg.acq_config(), header)


def random_seed(cfg: ExperimentConfig, seed: int) -> RunRecord:
    problem = get_problem(cfg.problem, **cfg.problem_options)
    return run_random(problem, cfg.n_init, cfg.budget, cfg.q, seed, _header(cfg, "random"))


def _job(args):
    fn, cfg, seed, path = args
    record = fn(cfg, seed)
    record.write(path)
    return record.status


def _seed_workers() -> int:
    raw = os.environ.get(SEED_WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(SEED_WORKERS_ENV, f"expected an integer, got {raw!r}") from None


def execute(cfg: ExperimentConfig, fn, prefix: str) -> int:
    """Run every seed, write records and a CSV summary, return an exit code."""
    workers = _seed_workers()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(fn, cfg, seed, out / f"{prefix}seed_{seed:04d}.jsonl") for seed in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            statuses = list(pool.map(_job, jobs))
    else:
        statuses = [_job(j) for j in jobs]
    records = [read_record(j[3]) for j in jobs]
    (out / f"{prefix}summary.csv").write_text(rows_to_csv(aggregate(records)))
    (out / f"{prefix}config.yaml").write_text(cfg.dumps())
    for seed, status in zip(cfg.seeds, statuses):
        log.info("seed %d: %s", seed, status)
    if any(s in ("aborted", "failed") for s in statuses):
        return EXIT_RUNTIME
    if any(s == "no_feasible" for s in statuses):
        return EXIT_NO_FEASIBLE
    return EXIT_OK


def cmd_run(path) -> int:
    return execute(load_config(path), run_seed, "")


def cmd_baseline_random(path) -> int:
    return execute(load_config(path), random_seed, "random_")


def cmd_aggregate(pattern: str, output: Optional[str] = None) -> int:
    text = aggregate_glob(pattern)
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_list_problems() -> int:
    for name in sorted(REGISTRY):
        print(f"{name}\t{get_problem(name).description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpnbo", description="Ensemble-surrogate Bayesian optimization experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run BO for every seed in a config")
    p.add_argument("config")
    p = sub.add_parser("baseline-random", help="random search with the config's budget and seeds")
    p.add_argument("config")
    p = sub.add_parser("aggregate", help="best-so-far statistics over record files")
    p.add_argument("pattern", help="glob matching record files, e.g. 'runs/env/seed_*.jsonl'")
    p.add_argument("-o", "--output", help="write CSV here instead of stdout")
    sub.add_parser("list-problems", help="list registered problem ids")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "baseline-random":
            return cmd_baseline_random(args.config)
        if args.command == "aggregate":
            return cmd_aggregate(args.pattern, args.output)
        return cmd_list_problems()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced as a runtime failure exit code
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
