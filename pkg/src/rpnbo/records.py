"""Run records: one JSON object per line, plus CSV aggregation.

Record file layout::

    {"type": "header", ...}            run configuration, seed, problem id
    {"type": "iteration", ...}         one line per BO iteration (0 = initial design)
    {"type": "end", "status": ...}     final status and incumbent

Wall-clock timings are kept out of the record so that reruns are
byte-identical; they go to a ``.summary.json`` file written next to it,
together with the header, final status and evaluation counts.
"""
from __future__ import annotations

import csv
import glob as globmod
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


@dataclass
class Batch:
    fidelity: str  # "H" or "L"
    x: list
    y: list  # None entries mark failed evaluations
    f: list
    c: list
    failed: list  # error message or None per point

    @property
    def n_ok(self) -> int:
        return sum(1 for e in self.failed if e is None)


@dataclass
class IterationLog:
    iteration: int
    batches: list
    best_feasible: Optional[float]
    n_evals_hf: int
    n_evals_lf: int
    n_trainings: int
    n_constraint_fits: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["type"] = "iteration"
        return d


@dataclass
class RunRecord:
    header: dict
    iterations: list = field(default_factory=list)
    status: str = "ok"  # ok | aborted | no_feasible
    message: str = ""
    timings: list = field(default_factory=list)

    @property
    def best_so_far(self) -> list:
        return [it.best_feasible for it in self.iterations]

    @property
    def final_best(self) -> Optional[float]:
        return self.iterations[-1].best_feasible if self.iterations else None

    @property
    def n_trainings(self) -> int:
        return self.iterations[-1].n_trainings if self.iterations else 0

    def evaluations(self, fidelity: str = "H"):
        """All successful evaluations at a fidelity: (x, f, c) arrays."""
        xs, fs, cs = [], [], []
        for it in self.iterations:
            for b in it.batches:
                if b.fidelity != fidelity:
                    continue
                for x, f, c, err in zip(b.x, b.f, b.c, b.failed):
                    if err is None:
                        xs.append(x)
                        fs.append(f)
                        cs.append(c)
        return np.array(xs), np.array(fs), np.array(cs)

    def dumps(self) -> str:
        lines = [json.dumps({"type": "header", **self.header}, sort_keys=True)]
        lines += [json.dumps(it.to_dict(), sort_keys=True) for it in self.iterations]
        lines.append(json.dumps({"type": "end", "status": self.status, "message": self.message,
                                 "final_best": self.final_best}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        last = self.iterations[-1] if self.iterations else None
        return {
            "header": self.header,
            "status": self.status,
            "message": self.message,
            "final_best": self.final_best,
            "n_evals_hf": last.n_evals_hf if last else 0,
            "n_evals_lf": last.n_evals_lf if last else 0,
            "n_trainings": self.n_trainings,
            "timings": self.timings,
        }

    def write(self, path) -> Path:
        """Write the record to ``path`` and its summary alongside; returns the summary path."""
        path = Path(path)
        path.write_text(self.dumps())
        summary = summary_path(path)
        summary.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return summary


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.json")


def read_record(path) -> RunRecord:
    header, iters, status, message = {}, [], "ok", ""
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("type")
            if kind == "header":
                header = obj
            elif kind == "iteration":
                obj["batches"] = [Batch(**b) for b in obj["batches"]]
                iters.append(IterationLog(**obj))
            elif kind == "end":
                status, message = obj["status"], obj.get("message", "")
    return RunRecord(header, iters, status, message)


CSV_COLUMNS = ("iteration", "n_evals_hf", "n_evals_lf", "median", "q25", "q75")


def aggregate(records: Iterable[RunRecord]) -> list[dict]:
    """Per-iteration median and quartiles of best-so-far across records.

    Undefined incumbents are skipped; an iteration with none defined gets
    empty statistics.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    length = max(len(r.iterations) for r in records)
    rows = []
    for t in range(length):
        present = [r.iterations[t] for r in records if t < len(r.iterations)]
        vals = np.array([it.best_feasible for it in present if it.best_feasible is not None], dtype=float)
        row = {"iteration": t, "n_evals_hf": present[0].n_evals_hf, "n_evals_lf": present[0].n_evals_lf}
        if vals.size:
            q25, med, q75 = np.percentile(vals, [25, 50, 75])
            row.update(median=float(med), q25=float(q25), q75=float(q75))
        else:
            row.update(median=None, q25=None, q75=None)
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def aggregate_glob(pattern: str) -> str:
    paths = sorted(p for p in globmod.glob(pattern) if not p.endswith(".json"))
    if not paths:
        raise FileNotFoundError(f"no record files match {pattern!r}")
    return rows_to_csv(aggregate(read_record(p) for p in paths))


__all__ = ["Batch", "IterationLog", "RunRecord", "read_record", "aggregate", "aggregate_glob",
           "rows_to_csv", "summary_path", "CSV_COLUMNS"]
