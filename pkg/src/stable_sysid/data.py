"""Trajectory containers, CSV I/O, segmentation, batching and standardization.

A trajectory stores its exogenous inputs (``l x m``) and its targets
(``l x q``), where targets are either measured outputs (``q = p``) or measured
states (``q = n``).  Missing targets are NaN; inputs must be complete.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParseError

TARGET_KINDS = ("output", "state")
_PREFIX = {"output": "y", "state": "x"}


@dataclass
class Trajectory:
    """One measured trajectory; ``x0`` overrides the default initial state."""

    id: str
    inputs: np.ndarray
    targets: np.ndarray
    x0: np.ndarray | None = None

    def __post_init__(self):
        self.id = str(self.id)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs.reshape(-1, 1)
        if self.targets.ndim == 1:
            self.targets = self.targets.reshape(-1, 1)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise DimensionError(f"trajectory {self.id}: inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionError(
                f"trajectory {self.id}: {self.inputs.shape[0]} input rows vs {self.targets.shape[0]} target rows"
            )
        if self.targets.shape[0] < 1:
            raise ContractError(f"trajectory {self.id} is empty")
        if not np.all(np.isfinite(self.inputs)):
            raise ContractError(f"trajectory {self.id}: inputs must be finite (no missing inputs)")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=np.float64).ravel()

    @property
    def length(self) -> int:
        return self.targets.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def q(self) -> int:
        return self.targets.shape[1]


@dataclass
class TrajectorySet:
    """Trajectories sharing the input dimension, target dimension and kind."""

    trajectories: list
    target_kind: str = "output"
    m: int | None = None
    q: int | None = None

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ContractError(f"target_kind must be one of {TARGET_KINDS}, got {self.target_kind!r}")
        self.trajectories = list(self.trajectories)
        for t in self.trajectories:
            if self.m is None:
                self.m = t.m
            if self.q is None:
                self.q = t.q
            if t.m != self.m or t.q != self.q:
                raise DimensionError(
                    f"trajectory {t.id} has m={t.m}, q={t.q}; the set has m={self.m}, q={self.q}"
                )
            if t.x0 is not None and self.target_kind == "state" and t.x0.size != self.q:
                raise DimensionError(f"trajectory {t.id}: x0 has {t.x0.size} entries, expected {self.q}")
        ids = [t.id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise ContractError("trajectory ids must be unique within a set")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    @property
    def lengths(self) -> list:
        return [t.length for t in self.trajectories]

    @property
    def ids(self) -> list:
        return [t.id for t in self.trajectories]

    def subset(self, trajectories: Sequence[Trajectory]) -> "TrajectorySet":
        return TrajectorySet(list(trajectories), self.target_kind, self.m, self.q)


# ---------------------------------------------------------------- CSV


def _header(kind: str, m: int, q: int) -> list:
    return ["traj_id", "step"] + [f"u_{i}" for i in range(m)] + [f"{_PREFIX[kind]}_{i}" for i in range(q)]


def _parse_header(header: list, m: int | None, q: int | None):
    if len(header) < 3 or header[0] != "traj_id" or header[1] != "step":
        raise ParseError("header must start with 'traj_id,step'", 1)
    cols = header[2:]
    n_u = 0
    while n_u < len(cols) and cols[n_u] == f"u_{n_u}":
        n_u += 1
    rest = cols[n_u:]
    if not rest:
        raise ParseError("header has no target columns (y_* or x_*)", 1)
    prefix = rest[0].split("_", 1)[0]
    kind = {"y": "output", "x": "state"}.get(prefix)
    if kind is None or rest != [f"{prefix}_{i}" for i in range(len(rest))]:
        raise ParseError(f"malformed target columns {rest}; expected y_0..y_[p-1] or x_0..x_[n-1]", 1)
    if m is not None and n_u != m:
        raise ParseError(f"header has {n_u} input columns, expected {m}", 1)
    if q is not None and len(rest) != q:
        raise ParseError(f"header has {len(rest)} target columns, expected {q}", 1)
    return kind, n_u, len(rest)


def _cell(text: str, line: int, col: str) -> float:
    s = text.strip()
    if s.lower() == "nan":
        return math.nan
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"column {col}: cannot parse {text!r} as a number", line) from None
    if math.isnan(v):
        return math.nan
    return v


def load_csv(path, target_kind: str | None = None, m: int | None = None, q: int | None = None) -> TrajectorySet:
    """Read a trajectory CSV; ``target_kind``, ``m``, ``q`` are checked when given.

    Rows of one trajectory may appear in any order but their steps must be
    exactly ``0, 1, ..., l-1``.
    """
    path = Path(path)
    rows: dict = {}
    order: list = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        kind, n_u, n_t = _parse_header([h.strip() for h in header], m, q)
        if target_kind is not None and kind != target_kind:
            raise ParseError(f"file holds {kind} targets, expected {target_kind}", 1)
        width = 2 + n_u + n_t
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != width:
                raise ParseError(f"expected {width} fields, got {len(rec)}", line)
            tid = rec[0].strip()
            try:
                step = int(rec[1])
            except ValueError:
                raise ParseError(f"step {rec[1]!r} is not an integer", line) from None
            vals = [_cell(c, line, header[2 + i]) for i, c in enumerate(rec[2:])]
            if any(math.isnan(v) for v in vals[:n_u]):
                raise ParseError("missing (NaN) input value; inputs must be complete", line)
            if any(math.isinf(v) for v in vals):
                raise ParseError("infinite value", line)
            if tid not in rows:
                rows[tid] = []
                order.append(tid)
            rows[tid].append((step, line, vals))
    trajectories = []
    for tid in order:
        recs = sorted(rows[tid], key=lambda r: r[0])
        for expect, (step, line, _) in enumerate(recs):
            if step != expect:
                raise ParseError(f"trajectory {tid}: steps are not contiguous from 0 (found {step}, expected {expect})", line)
        data = np.array([r[2] for r in recs], dtype=np.float64).reshape(len(recs), width - 2)
        trajectories.append(Trajectory(tid, data[:, :n_u], data[:, n_u:]))
    return TrajectorySet(trajectories, kind, n_u, n_t)


def _fmt(v: float) -> str:
    return "NaN" if math.isnan(v) else repr(float(v))


def save_csv(tset: TrajectorySet, path) -> None:
    """Write ``tset`` so that :func:`load_csv` reads it back bit-exactly.

    Per-trajectory ``x0`` overrides are not part of the format.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(tset.target_kind, tset.m, tset.q))
        for t in tset:
            for k in range(t.length):
                w.writerow([t.id, k] + [_fmt(v) for v in t.inputs[k]] + [_fmt(v) for v in t.targets[k]])


# ---------------------------------------------------------------- segmentation


@dataclass(frozen=True)
class SegmentationSpec:
    """Horizon/stride for training and validation segments (``None`` = whole trajectories)."""

    horizon: int | None = None
    stride: int = 1
    horizon_val: int | None = None
    stride_val: int = 1

    def __post_init__(self):
        for h in (self.horizon, self.horizon_val):
            if h is not None and h < 2:
                raise ContractError(f"horizon must be at least 2, got {h}")
        for s in (self.stride, self.stride_val):
            if s < 1:
                raise ContractError(f"stride must be at least 1, got {s}")

    def apply(self, train: TrajectorySet, val: TrajectorySet | None = None):
        """Segment the training set (and the validation set, if given)."""
        out_train = segment(train, self.horizon, self.stride)
        if val is None:
            return out_train
        return out_train, segment(val, self.horizon_val, self.stride_val)


def segment_count(length: int, horizon: int, stride: int) -> int:
    return 0 if horizon > length else (length - horizon) // stride + 1


def segment(tset: TrajectorySet, horizon: int | None, stride: int = 1) -> TrajectorySet:
    """Cut every state trajectory into windows of ``horizon`` samples.

    Window ``j`` starts at ``j * stride`` and takes its first (measured) state
    as initial condition.  Windows whose initial state is missing are
    skipped.
    """
    if horizon is None:
        return tset
    if tset.target_kind != "state":
        raise ContractError("only input-state trajectories can be segmented (intermediate states are unknown)")
    if horizon < 2 or stride < 1:
        raise ContractError(f"need horizon >= 2 and stride >= 1, got horizon={horizon}, stride={stride}")
    out = []
    for t in tset:
        count = segment_count(t.length, horizon, stride)
        if count == 0:
            warnings.warn(f"trajectory {t.id} (length {t.length}) is shorter than the horizon {horizon}; no segments")
        skipped = 0
        for j in range(count):
            s = j * stride
            x0 = t.targets[s]
            if not np.all(np.isfinite(x0)):
                skipped += 1
                continue
            out.append(Trajectory(f"{t.id}#{j}", t.inputs[s:s + horizon], t.targets[s:s + horizon], x0.copy()))
        if skipped:
            warnings.warn(f"trajectory {t.id}: skipped {skipped} segments whose initial state is missing")
    return TrajectorySet(out, "state", tset.m, tset.q)


def batches(tset: TrajectorySet, batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    """One epoch of shuffled batches (lists of trajectories); the last may be short."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be at least 1, got {batch_size}")
    perm = rng.permutation(len(tset))
    for start in range(0, len(perm), batch_size):
        yield [tset.trajectories[i] for i in perm[start:start + batch_size]]


# ---------------------------------------------------------------- standardization


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine maps ``(v - mean) / std`` for inputs and targets."""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def apply(self, tset: TrajectorySet) -> TrajectorySet:
        return self._map(tset, lambda v, mu, sd: (v - mu) / sd)

    def inverse(self, tset: TrajectorySet) -> TrajectorySet:
        return self._map(tset, lambda v, mu, sd: v * sd + mu)

    def _map(self, tset, f):
        out = []
        for t in tset:
            x0 = None
            if t.x0 is not None and tset.target_kind == "state":
                x0 = f(t.x0, self.target_mean, self.target_std)
            out.append(replace(
                t,
                inputs=f(t.inputs, self.input_mean, self.input_std),
                targets=f(t.targets, self.target_mean, self.target_std),
                x0=x0 if x0 is not None else t.x0,
            ))
        return tset.subset(out)


def _stats(blocks, what):
    data = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mu = np.nanmean(data, axis=0)
        sd = np.nanstd(data, axis=0)
    flat = ~(sd >= 1e-12)  # also catches all-NaN columns
    if np.any(flat):
        warnings.warn(f"{what} dimensions {np.flatnonzero(flat).tolist()} have (near) zero variance; left unscaled")
        mu = np.where(flat, 0.0, mu)
        sd = np.where(flat, 1.0, sd)
    return mu, sd


def fit_standardizer(tset: TrajectorySet) -> Standardizer:
    """Statistics of ``tset`` (missing targets ignored)."""
    in_mu, in_sd = _stats([t.inputs for t in tset], "input")
    tg_mu, tg_sd = _stats([t.targets for t in tset], "target")
    return Standardizer(in_mu, in_sd, tg_mu, tg_sd)


def standardize(tset: TrajectorySet):
    """Rescale to zero mean and unit std per dimension; returns ``(scaled, standardizer)``."""
    st = fit_standardizer(tset)
    return st.apply(tset), st


__all__ = [
    "Trajectory",
    "TrajectorySet",
    "TARGET_KINDS",
    "load_csv",
    "save_csv",
    "SegmentationSpec",
    "segment",
    "segment_count",
    "batches",
    "Standardizer",
    "fit_standardizer",
    "standardize",
]
