"""Bayesian optimization with randomized-prior neural-network ensembles."""
from .acqopt import AcqOptConfig, BoxDomain, Reducer, optimize_batch
from .acquisition import AcquisitionSpec
from .bo import run_bo, run_constrained_mf_bo, run_random
from .problems import Problem, get_problem
from .records import RunRecord, read_record
from .surrogate import Dataset, EnsembleConfig, train_ensemble, train_mf

__version__ = "0.1.0"

__all__ = [
    "AcqOptConfig", "AcquisitionSpec", "BoxDomain", "Dataset", "EnsembleConfig", "Problem", "Reducer",
    "RunRecord", "get_problem", "optimize_batch", "read_record", "run_bo", "run_constrained_mf_bo",
    "run_random", "train_ensemble", "train_mf",
]
