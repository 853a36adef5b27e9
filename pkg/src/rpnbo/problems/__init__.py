"""Benchmark problems, registered by string id."""
from __future__ import annotations

from typing import Callable

from .base import Constraint, EvaluationError, Problem
from . import brusselator, doublewell, environmental, synthetic_mf

REGISTRY: dict[str, Callable[..., Problem]] = {
    "env": environmental.make_problem,
    "brusselator": brusselator.make_problem,
    "doublewell": doublewell.make_problem,
    "mfblade-synthetic": synthetic_mf.make_problem,
}


def get_problem(name: str, **options) -> Problem:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem id {name!r}; choose from {sorted(REGISTRY)}") from None
    return factory(**options)


__all__ = ["Constraint", "EvaluationError", "Problem", "REGISTRY", "get_problem"]
