from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..acqopt import BoxDomain, Reducer


class EvaluationError(RuntimeError):
    """A black-box evaluation failed; the point is recorded but not trained on."""


@dataclass
class Constraint:
    """Feasibility requires ``reducer(h(x)) >= 0``.

    ``black_box`` of None means the constraint reduces the objective's own
    output vector, so one surrogate serves both.
    """

    reducer: Reducer
    black_box: Optional[Callable[[np.ndarray], np.ndarray]] = None
    low_fidelity: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def shares_output(self) -> bool:
        return self.black_box is None


@dataclass
class Problem:
    name: str
    domain: BoxDomain
    black_box: Callable[[np.ndarray], np.ndarray]
    objective: Reducer
    constraints: list[Constraint] = field(default_factory=list)
    low_fidelity: Optional[Callable[[np.ndarray], np.ndarray]] = None
    output_coords: Optional[np.ndarray] = None
    description: str = ""

    @property
    def dim(self) -> int:
        return self.domain.dim

    def evaluate(self, x) -> dict:
        """Run the high-fidelity black boxes at ``x``."""
        return self._evaluate(np.asarray(x, dtype=np.float64), high=True)

    def evaluate_low(self, x) -> dict:
        if self.low_fidelity is None:
            raise ValueError(f"problem {self.name!r} has no low-fidelity model")
        return self._evaluate(np.asarray(x, dtype=np.float64), high=False)

    def _evaluate(self, x, high: bool) -> dict:
        g = self.black_box if high else self.low_fidelity
        y = np.asarray(g(x), dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise EvaluationError("black box returned non-finite output")
        f = float(self.objective.value(y))
        outs, cvals = [], []
        for con in self.constraints:
            if con.shares_output:
                yc = y
            else:
                h = con.black_box if high else (con.low_fidelity or con.black_box)
                yc = np.asarray(h(x), dtype=np.float64)
                outs.append(yc)
            cvals.append(float(con.reducer.value(yc)))
        return {"y": y, "f": f, "c": cvals, "h": outs}
