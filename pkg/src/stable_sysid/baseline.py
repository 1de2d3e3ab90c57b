"""Reference metrics and comparison tables.

The multi-step MSE here is a plain numpy re-implementation (no tape, no
shared code with the training objective) so that the two can be checked
against each other.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .data import TrajectorySet
from .errors import ContractError

QUANTILES = (0.25, 0.5, 0.75)


def multistep_mse(model, trajectories) -> np.ndarray:
    """Full-trajectory MSE of every trajectory over its non-missing targets.

    Output models start from ``x0`` (the trajectory's own, else zero) and are
    scored at every step; state models start from the first measured state
    and are scored from step 1 on.
    """
    mats = model.effective()
    A, B, C, D = mats["A"], mats["B"], mats["C"], mats["D"]
    out = []
    for t in trajectories:
        if t.x0 is not None:
            x = t.x0.copy()
        elif model.input_output:
            x = np.zeros(model.n)
        else:
            x = np.nan_to_num(t.targets[0], nan=0.0)
        sq, count = 0.0, 0
        for k in range(t.length):
            if model.input_output:
                pred = C @ x
                if D is not None:
                    pred = pred + D @ t.inputs[k]
            else:
                pred = x
            if model.input_output or k > 0:
                ok = np.isfinite(t.targets[k])
                sq += float(np.sum((t.targets[k][ok] - pred[ok]) ** 2))
                count += int(ok.sum())
            nxt = A @ x
            if B is not None:
                nxt = nxt + B @ t.inputs[k]
            x = nxt
        out.append(sq / count if count else math.nan)
    return np.array(out)


def improvement_pct(candidate_mse: float, reference_mse: float) -> float:
    """``100 (1 - candidate / reference)``."""
    if not reference_mse > 0:
        raise ContractError(f"reference MSE must be positive, got {reference_mse}")
    return 100.0 * (1.0 - candidate_mse / reference_mse)


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile (``x[lo] + (h - lo)(x[lo+1] - x[lo])``, ``h = (N-1) q``)."""
    x = sorted(float(v) for v in values if not math.isnan(v))
    if not x:
        return math.nan
    if not 0.0 <= q <= 1.0:
        raise ContractError(f"quantile level must lie in [0, 1], got {q}")
    h = (len(x) - 1) * q
    lo = int(math.floor(h))
    if lo + 1 >= len(x):
        return x[-1]
    return x[lo] + (h - lo) * (x[lo + 1] - x[lo])


@dataclass
class ComparisonTable:
    """Test MSE of several methods on several systems, normalized per system.

    ``mse[i, j]`` is method ``methods[i]`` on system ``systems[j]``; NaN marks
    a failed run.  ``best[j]`` is the winning method of system ``j`` (lowest
    MSE, ties broken by method name); tied methods all get a normalized value
    of 1.0.
    """

    methods: list
    systems: list
    mse: np.ndarray

    def __post_init__(self):
        self.mse = np.asarray(self.mse, dtype=np.float64)
        if self.mse.shape != (len(self.methods), len(self.systems)):
            raise ContractError("mse table shape does not match methods x systems")
        if len(self.methods) < 2:
            raise ContractError("a comparison needs at least two methods")

    @property
    def normalized(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            best = np.nanmin(np.where(np.isnan(self.mse), np.inf, self.mse), axis=0)
            best = np.where(np.isinf(best), np.nan, best)
            return self.mse / best[None, :]

    @property
    def best(self) -> list:
        out = []
        for j in range(len(self.systems)):
            col = self.mse[:, j]
            cands = [(col[i], self.methods[i]) for i in range(len(self.methods)) if not math.isnan(col[i])]
            out.append(min(cands)[1] if cands else None)
        return out

    def quantile_summary(self, levels=QUANTILES) -> dict:
        """Per method, quantiles of its normalized MSE across systems."""
        norm = self.normalized
        return {m: [quantile(norm[i], q) for q in levels] for i, m in enumerate(self.methods)}

    def rows(self) -> list:
        norm = self.normalized
        return [(s, m, float(self.mse[i, j]), float(norm[i, j]))
                for j, s in enumerate(self.systems) for i, m in enumerate(self.methods)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system_id", "method", "mse", "normalized_mse"])
        for s, m, v, nv in self.rows():
            w.writerow([s, m, repr(v), repr(nv)])
        return buf.getvalue()

    def quantiles_csv(self, levels=QUANTILES) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"q{int(round(100 * q))}" for q in levels])
        for m, qs in self.quantile_summary(levels).items():
            w.writerow([m] + [repr(v) for v in qs])
        return buf.getvalue()


def build_comparison(results: dict) -> ComparisonTable:
    """Table from ``{system_id: {method: mse}}``; missing cells become NaN."""
    systems = sorted(results)
    methods = sorted({m for per in results.values() for m in per})
    mse = np.full((len(methods), len(systems)), np.nan)
    for j, s in enumerate(systems):
        for i, m in enumerate(methods):
            v = results[s].get(m)
            if v is not None:
                mse[i, j] = v
    return ComparisonTable(methods, systems, mse)


def compare_models(models: dict, test_sets: dict) -> ComparisonTable:
    """Evaluate ``{system_id: {method: model}}`` on ``{system_id: TrajectorySet}``."""
    results = {}
    for s, per in models.items():
        tset: TrajectorySet = test_sets[s]
        results[s] = {m: float(np.nanmean(multistep_mse(model, tset))) for m, model in per.items()}
    return build_comparison(results)


__all__ = [
    "multistep_mse",
    "improvement_pct",
    "quantile",
    "ComparisonTable",
    "build_comparison",
    "compare_models",
    "QUANTILES",
]
