"""Linear state-space models, rollouts and the masked multi-step objectives.

The model is ``x_{k+1} = A x_k + B u_k`` and ``y_k = C x_k + D u_k``, where
any of ``B``, ``C``, ``D`` may be absent (autonomous systems, state
measurements, no feedthrough) and every matrix may carry a binary sparsity
mask.  ``A`` is either a free (optionally masked) parameter or the output of a
:class:`~stable_sysid.schur.StableAParametrization`.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    GradientTape,
    Parameter,
    Tensor,
    absolute,
    apply_mask,
    as_tensor,
    hadamard,
    hstack,
    record,
    total,
)
from .data import Trajectory, TrajectorySet
from .errors import ContractError, DimensionError
from .schur import DEFAULT_EPSILON, StableAParametrization

LOSS_KINDS = ("mse", "mae", "mape", "custom")
NORMALIZATIONS = ("retained", "length")
MAPE_FLOOR = 1e-8
FORMAT = "stable_sysid.model"


def resolve_mode(naive_A: bool, LMI_A: bool, delta, mask_A) -> str:
    """Parametrization mode selected by the model flags."""
    if naive_A:
        return "scaled"
    if not LMI_A:
        raise ContractError("stable_A needs naive_A or LMI_A")
    if delta is not None and mask_A is not None:
        raise ContractError("delta (near-identity) and mask_A (sparse LMI) cannot be combined in LMI mode")
    if delta is not None:
        return "near_identity"
    if mask_A is not None:
        return "sparse_lmi"
    return "generic"


def _mask(mask, shape, name):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != shape:
        raise DimensionError(f"mask_{name} has shape {mask.shape}, expected {shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError(f"mask_{name} entries must be 0 or 1")
    return mask


class StateSpaceModel:
    """Container for the matrices, masks, flags and learned initial states."""

    def __init__(
        self,
        n: int,
        m: int,
        p: int | None = None,
        *,
        input_output: bool = True,
        autonomous: bool = False,
        id_D: bool = False,
        learn_x0: bool = False,
        stable_A: bool = True,
        naive_A: bool = False,
        LMI_A: bool = True,
        delta: float | None = None,
        max_eigenvalue: float = 1.0,
        epsilon: float = DEFAULT_EPSILON,
        mask_A=None,
        mask_B=None,
        mask_C=None,
        mask_D=None,
        learn_A: bool = True,
        learn_B: bool = True,
        learn_C: bool = True,
        learn_D: bool = True,
        A=None,
        B=None,
        C=None,
        D=None,
        parametrization: StableAParametrization | None = None,
        rng: np.random.Generator | None = None,
        init_std: float = 0.1,
    ):
        if n < 1 or m < 0:
            raise ContractError(f"need n >= 1 and m >= 0, got n={n}, m={m}")
        self.n, self.m = int(n), int(m)
        self.p = int(p) if input_output else self.n
        if input_output and (p is None or p < 1):
            raise ContractError("input-output models need p >= 1")
        if not autonomous and self.m == 0:
            raise ContractError("non-autonomous models need m >= 1")
        self.input_output = bool(input_output)
        self.autonomous = bool(autonomous)
        self.id_D = bool(id_D) and self.input_output and not self.autonomous
        self.learn_x0 = bool(learn_x0)
        self.stable_A = bool(stable_A)
        self.naive_A = bool(naive_A)
        self.LMI_A = bool(LMI_A)
        self.delta = delta
        self.max_eigenvalue = float(max_eigenvalue)
        self.epsilon = float(epsilon)
        n, m, p = self.n, self.m, self.p
        self.mask_A = _mask(mask_A, (n, n), "A")
        self.mask_B = _mask(mask_B, (n, m), "B") if not self.autonomous else None
        self.mask_C = _mask(mask_C, (p, n), "C") if self.input_output else None
        self.mask_D = _mask(mask_D, (p, m), "D") if self.id_D else None
        rng = np.random.default_rng() if rng is None else rng

        self.mode = None
        self.parametrization = None
        self.A_raw = None
        if self.stable_A:
            self.mode = resolve_mode(self.naive_A, self.LMI_A, delta, self.mask_A)
            gamma = self.max_eigenvalue
            if self.mode in ("near_identity", "sparse_lmi") and gamma < 1.0:
                warnings.warn(f"max_eigenvalue={gamma} is not supported in {self.mode} mode; the bound is 1")
                gamma = 1.0
            if parametrization is None:
                parametrization = StableAParametrization(
                    self.mode, n, gamma=gamma, epsilon=self.epsilon, delta=delta, mask=self.mask_A,
                    rng=rng, init_std=init_std,
                )
            elif parametrization.mode != self.mode or parametrization.n != n:
                raise ContractError(
                    f"parametrization is {parametrization.mode} with n={parametrization.n}, "
                    f"model needs {self.mode} with n={n}"
                )
            self.parametrization = parametrization
            self.parametrization.set_trainable(learn_A)
            self.A_init = None if A is None else np.asarray(A, dtype=np.float64)
        else:
            A = rng.normal(0.0, 1.0 / np.sqrt(n), (n, n)) if A is None else A
            self.A_raw = Parameter(A, trainable=learn_A, name="A")
            self.A_init = None
        self.B = self.C = self.D = None
        if not self.autonomous:
            self.B = Parameter(rng.normal(0.0, init_std, (n, m)) if B is None else B, learn_B, "B")
        if self.input_output:
            self.C = Parameter(rng.normal(0.0, init_std, (p, n)) if C is None else C, learn_C, "C")
        if self.id_D:
            self.D = Parameter(rng.normal(0.0, init_std, (p, m)) if D is None else D, learn_D, "D")
        for name, prm, shape in (("A", self.A_raw, (n, n)), ("B", self.B, (n, m)),
                                 ("C", self.C, (p, n)), ("D", self.D, (p, m))):
            if prm is not None and prm.shape != shape:
                raise DimensionError(f"{name} has shape {prm.shape}, expected {shape}")
        self.x0_table: dict = {}

    # ------------------------------------------------------------ parameters

    @property
    def target_dim(self) -> int:
        return self.p

    @property
    def target_kind(self) -> str:
        return "output" if self.input_output else "state"

    @property
    def bound(self) -> float | None:
        """Guaranteed spectral-radius bound of A, or ``None`` for a free A."""
        return self.parametrization.bound if self.stable_A else None

    def register_x0(self, ids: Sequence[str], rng: np.random.Generator | None = None):
        """Create learnable initial states (zeros) for trajectories not yet in the table."""
        for tid in ids:
            if tid not in self.x0_table:
                self.x0_table[tid] = Parameter(np.zeros((self.n, 1)), name=f"x0[{tid}]")

    def named_parameters(self) -> list:
        out = []
        if self.stable_A:
            out += [(f"A.{p.name}", p) for p in self.parametrization.parameters()]
        else:
            out.append(("A", self.A_raw))
        for name in ("B", "C", "D"):
            prm = getattr(self, name)
            if prm is not None:
                out.append((name, prm))
        out += [(p.name, p) for p in self.x0_table.values()]
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.trainable]

    def snapshot(self) -> list:
        return [p.value.copy() for p in self.parameters()]

    def restore(self, snap: list):
        params = self.parameters()
        if len(snap) != len(params):
            raise ContractError("snapshot does not match the parameter list")
        for p, v in zip(params, snap):
            p.value = v.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------ matrices

    def _enter(self, prm: Parameter, tape):
        return tape.watch(prm) if tape is not None else prm.constant()

    def matrices(self, tape: GradientTape | None = None) -> dict:
        """Effective (masked / materialized) matrices as tensors; absent ones are ``None``."""
        if self.stable_A:
            A = self.parametrization.materialize(tape)
        else:
            A = self._enter(self.A_raw, tape)
            if self.mask_A is not None:
                A = apply_mask(self.mask_A, A)
        out = {"A": A}
        for name in ("B", "C", "D"):
            prm = getattr(self, name)
            if prm is None:
                out[name] = None
                continue
            t = self._enter(prm, tape)
            mask = getattr(self, f"mask_{name}")
            out[name] = apply_mask(mask, t) if mask is not None else t
        return out

    def effective(self) -> dict:
        """Effective matrices as numpy arrays (``None`` for absent ones)."""
        return {k: (None if v is None else v.numpy()) for k, v in self.matrices().items()}

    def spectral_radius(self) -> float:
        from .autodiff import spectral_radius_value

        return spectral_radius_value(self.matrices()["A"].value)

    # ------------------------------------------------------------ serialization

    def flags(self) -> dict:
        return {
            "input_output": self.input_output,
            "autonomous": self.autonomous,
            "id_D": self.id_D,
            "learn_x0": self.learn_x0,
            "stable_A": self.stable_A,
            "naive_A": self.naive_A,
            "LMI_A": self.LMI_A,
            "delta": self.delta,
            "max_eigenvalue": self.max_eigenvalue,
            "epsilon": self.epsilon,
        }

    def to_dict(self) -> dict:
        eff = self.effective()
        d = {
            "format": FORMAT,
            "version": 1,
            "n": self.n,
            "m": self.m,
            "p": self.p,
            "flags": self.flags(),
            "mode": self.mode,
            "masks": {k: (None if v is None else v.tolist()) for k, v in
                      (("A", self.mask_A), ("B", self.mask_B), ("C", self.mask_C), ("D", self.mask_D))},
            "matrices": {k: (None if v is None else v.tolist()) for k, v in eff.items()},
            "free": {
                "A": None if self.A_raw is None else self.A_raw.value.tolist(),
                "B": None if self.B is None else self.B.value.tolist(),
                "C": None if self.C is None else self.C.value.tolist(),
                "D": None if self.D is None else self.D.value.tolist(),
            },
            "learn": {name: prm.trainable for name, prm in self._learnable().items()},
            "parametrization": None if self.parametrization is None else self.parametrization.to_dict(),
            "x0": {tid: p.value.ravel().tolist() for tid, p in self.x0_table.items()},
        }
        return d

    def _learnable(self) -> dict:
        out = {"A": self.parametrization.V if self.stable_A else self.A_raw}
        for name in ("B", "C", "D"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpaceModel":
        if d.get("format") != FORMAT:
            raise ContractError("not a serialized state-space model")
        f = d["flags"]
        masks = d["masks"]
        free = d["free"]
        learn = d.get("learn", {})
        par = d.get("parametrization")
        model = cls(
            d["n"], d["m"], d["p"] if f["input_output"] else None,
            input_output=f["input_output"], autonomous=f["autonomous"], id_D=f["id_D"],
            learn_x0=f["learn_x0"], stable_A=f["stable_A"], naive_A=f["naive_A"], LMI_A=f["LMI_A"],
            delta=f["delta"], max_eigenvalue=f["max_eigenvalue"], epsilon=f["epsilon"],
            mask_A=masks["A"], mask_B=masks["B"], mask_C=masks["C"], mask_D=masks["D"],
            learn_A=learn.get("A", True), learn_B=learn.get("B", True), learn_C=learn.get("C", True),
            learn_D=learn.get("D", True),
            A=free["A"], B=free["B"], C=free["C"], D=free["D"],
            parametrization=None if par is None else StableAParametrization.from_dict(par),
            rng=np.random.default_rng(0),
        )
        if par is not None:
            model.parametrization.set_trainable(learn.get("A", True))
        for tid, v in d.get("x0", {}).items():
            model.x0_table[tid] = Parameter(np.reshape(v, (-1, 1)), name=f"x0[{tid}]")
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "StateSpaceModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def copy(self) -> "StateSpaceModel":
        return StateSpaceModel.from_dict(self.to_dict())

    def __repr__(self):
        return (f"StateSpaceModel(n={self.n}, m={self.m}, p={self.p}, mode={self.mode or 'free'}, "
                f"input_output={self.input_output})")


# ---------------------------------------------------------------- rollout


def rollout_states(A, B, X0, U: np.ndarray | None, steps: int) -> Tensor:
    """States ``x_0 .. x_{steps-1}`` of a batch of trajectories, as one tape node.

    ``X0`` is ``n x b`` (one column per trajectory) and ``U`` has shape
    ``(steps, m, b)``; the last input row is never used.  The result is
    ``n x (steps * b)`` with column ``k * b + s`` holding ``x_k`` of
    trajectory ``s``.  The backward pass is the discrete adjoint recursion
    ``lam_k = g_k + A^T lam_{k+1}``.
    """
    A, X0 = as_tensor(A), as_tensor(X0)
    n, b = X0.shape
    if A.shape != (n, n):
        raise DimensionError(f"rollout: A is {A.shape}, X0 is {X0.shape}")
    if steps < 1:
        raise ContractError("rollout needs at least one step")
    av = A.value
    X = np.empty((steps, n, b))
    X[0] = X0.value
    inputs: tuple = (A, X0)
    drive = None
    if B is not None:
        B = as_tensor(B)
        if U is None or U.shape[0] < steps or U.shape[1] != B.cols or U.shape[2] != b:
            raise DimensionError(f"rollout: inputs of shape {None if U is None else U.shape} do not match "
                                 f"B {B.shape}, {steps} steps and batch {b}")
        if B.rows != n:
            raise DimensionError(f"rollout: B is {B.shape}, expected {n} rows")
        drive = B.value @ U[:steps - 1]
        inputs = (A, X0, B)
    for k in range(steps - 1):
        X[k + 1] = av @ X[k]
        if drive is not None:
            X[k + 1] += drive[k]
    out = X.transpose(1, 0, 2).reshape(n, steps * b)

    def vjp(g):
        G = g.reshape(n, steps, b).transpose(1, 0, 2)
        lam = np.empty_like(G)
        lam[-1] = G[-1]
        at = av.T
        for k in range(steps - 2, -1, -1):
            lam[k] = G[k] + at @ lam[k + 1]
        gA = np.tensordot(lam[1:], X[:-1], axes=([0, 2], [0, 2]))
        grads = [gA, lam[0].copy()]
        if drive is not None:
            grads.append(np.tensordot(lam[1:], U[:steps - 1], axes=([0, 2], [0, 2])))
        return tuple(grads)

    return record("rollout", out, inputs, vjp)


def rollout_states_reference(A, B, X0, U: np.ndarray | None, steps: int) -> Tensor:
    """Same as :func:`rollout_states`, built from elementary tape operations."""
    A, X0 = as_tensor(A), as_tensor(X0)
    cols = [X0]
    x = X0
    for k in range(steps - 1):
        x = A @ x
        if B is not None:
            x = x + as_tensor(B) @ Tensor(U[k])
        cols.append(x)
    return hstack(cols)


def _stack_time(arr: np.ndarray) -> np.ndarray:
    """``(K, d, b)`` to ``d x (K b)`` with column ``k b + s``."""
    K, d, b = arr.shape
    return arr.transpose(1, 0, 2).reshape(d, K * b)


def simulate(model: StateSpaceModel, u=None, x0=None, steps: int | None = None, tape: GradientTape | None = None):
    """Roll the model out from ``x0`` (zero by default).

    ``u`` is ``l x m`` (ignored for autonomous models, where ``steps`` gives
    ``l``).  Returns ``(states, outputs)`` as tensors: states is
    ``n x (l + 1)`` holding ``x_0 .. x_l`` and outputs is ``p x l`` holding
    ``y_0 .. y_{l-1}`` (for state models the outputs are the states
    ``x_0 .. x_{l-1}``).
    """
    if model.autonomous:
        if steps is None:
            if u is None:
                raise ContractError("autonomous simulation needs steps")
            steps = np.asarray(u).shape[0]
        U = None
    else:
        if u is None:
            raise ContractError("simulation needs inputs u")
        u = np.asarray(u, dtype=np.float64)
        if u.ndim == 1:
            u = u.reshape(-1, 1) if model.m == 1 else u.reshape(1, -1)
        if u.ndim != 2 or u.shape[1] != model.m:
            raise DimensionError(f"inputs have shape {u.shape}, model needs l x {model.m}")
        steps = u.shape[0]
        U = np.concatenate([u, np.zeros((1, model.m))])[:, :, None]
    if steps < 1:
        raise ContractError("simulation needs at least one step")
    x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=np.float64).ravel()
    if x0.size != model.n:
        raise DimensionError(f"x0 has {x0.size} entries, expected {model.n}")
    mats = model.matrices(tape)
    X = rollout_states(mats["A"], mats["B"], Tensor(x0.reshape(-1, 1)), U, steps + 1)
    head = X[0:model.n, 0:steps]
    if not model.input_output:
        return X, head
    Y = mats["C"] @ head
    if mats["D"] is not None:
        Y = Y + mats["D"] @ Tensor(u.T)
    return X, Y


def predict(model: StateSpaceModel, u=None, x0=None, steps: int | None = None) -> np.ndarray:
    """Predicted targets as an ``l x p`` array (no tape)."""
    _, Y = simulate(model, u, x0, steps)
    return Y.value.T.copy()


# ---------------------------------------------------------------- losses


@dataclass
class LossSpec:
    """Elementwise loss, training dropout and per-trajectory normalization.

    ``hook(target, prediction)`` (for ``kind="custom"``) receives two tensors
    of equal shape and must return the elementwise loss as a tensor of that
    shape, built from tape operations.  ``normalization="retained"`` divides
    each trajectory's sum by its number of retained entries;
    ``"length"`` divides by its number of time points.
    """

    kind: str = "mse"
    dropout_p: float = 0.0
    hook: Callable | None = None
    normalization: str = "retained"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ContractError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.kind == "custom" and self.hook is None:
            raise ContractError("custom losses need a hook")
        if self.normalization not in NORMALIZATIONS:
            raise ContractError(f"normalization must be one of {NORMALIZATIONS}")


@dataclass
class LossStats:
    """Counters filled by :func:`masked_multistep_loss`."""

    empty_trajectories: int = 0
    retained: int = 0
    calls: int = 0


@dataclass
class _Batch:
    pred: Tensor          # q x (K b)
    target: np.ndarray    # q x (K b), NaN where missing or padded
    valid: np.ndarray     # bool, q x (K b): finite target inside the trajectory
    K: int
    b: int
    time_points: np.ndarray  # per trajectory: number of scored time steps


def _initial_states(model, trajs, mats_tape, use_x0_table):
    cols = []
    for t in trajs:
        if use_x0_table and model.learn_x0 and t.id in model.x0_table:
            prm = model.x0_table[t.id]
            cols.append(mats_tape.watch(prm) if mats_tape is not None else prm.constant())
        elif t.x0 is not None:
            cols.append(Tensor(t.x0.reshape(-1, 1)))
        elif model.input_output:
            cols.append(Tensor(np.zeros((model.n, 1))))
        else:
            x0 = t.targets[0]
            if not np.all(np.isfinite(x0)):
                warnings.warn(f"trajectory {t.id}: missing initial state entries replaced by 0")
                x0 = np.nan_to_num(x0, nan=0.0)
            cols.append(Tensor(x0.reshape(-1, 1)))
    return hstack(cols) if len(cols) > 1 else cols[0]


def _assemble(model: StateSpaceModel, trajs: Sequence[Trajectory], tape, use_x0_table: bool) -> _Batch:
    if len(trajs) == 0:
        raise ContractError("empty batch")
    q = model.target_dim
    for t in trajs:
        if t.q != q:
            raise DimensionError(f"trajectory {t.id} has {t.q} targets, model predicts {q}")
        if not model.autonomous and t.m != model.m:
            raise DimensionError(f"trajectory {t.id} has {t.m} inputs, model needs {model.m}")
    b = len(trajs)
    lens = np.array([t.length for t in trajs])
    K = int(lens.max())
    target = np.full((K, q, b), np.nan)
    U = None if model.autonomous else np.zeros((K, model.m, b))
    for s, t in enumerate(trajs):
        target[:t.length, :, s] = t.targets
        if U is not None:
            U[:t.length, :, s] = t.inputs
    if not model.input_output:
        target[0] = np.nan  # the initial state is given, not predicted
    mats = model.matrices(tape)
    X0 = _initial_states(model, trajs, tape, use_x0_table)
    X = rollout_states(mats["A"], mats["B"], X0, U, K)
    if model.input_output:
        pred = mats["C"] @ X
        if mats["D"] is not None:
            pred = pred + mats["D"] @ Tensor(_stack_time(U))
    else:
        pred = X
    flat = _stack_time(target)
    points = lens if model.input_output else lens - 1
    return _Batch(pred, flat, np.isfinite(flat), K, b, points)


def _elementwise(kind: str, hook, target: np.ndarray, pred: Tensor, keep: np.ndarray):
    """Elementwise loss tensor and the (possibly reduced) keep-mask."""
    filled = np.where(keep, target, 0.0)
    if kind == "custom":
        e = as_tensor(hook(Tensor(filled), pred))
        if e.shape != pred.shape:
            raise DimensionError(f"custom loss hook returned shape {e.shape}, expected {pred.shape}")
        return e, keep
    r = pred - Tensor(filled)
    if kind == "mse":
        return hadamard(r, r), keep
    if kind == "mae":
        return absolute(r), keep
    keep = keep & (np.abs(filled) >= MAPE_FLOOR)
    inv = np.where(keep, 1.0 / np.where(keep, np.abs(filled), 1.0), 0.0)
    return hadamard(absolute(r), Tensor(inv)), keep


def _weights(keep: np.ndarray, batch: _Batch, normalization: str, stats: LossStats | None):
    per = keep.reshape(keep.shape[0], batch.K, batch.b).sum(axis=(0, 1))
    empty = per == 0
    if np.any(empty):
        warnings.warn(f"{int(empty.sum())} trajectories have no retained targets and contribute zero")
    if stats is not None:
        stats.empty_trajectories += int(empty.sum())
        stats.retained += int(per.sum())
        stats.calls += 1
    denom = per if normalization == "retained" else batch.time_points
    scale = np.where(empty, 0.0, 1.0 / np.maximum(denom, 1)) / batch.b
    cols = np.tile(scale, batch.K)
    return np.where(keep, cols[None, :], 0.0)


def masked_multistep_loss(
    model: StateSpaceModel,
    batch: Sequence[Trajectory],
    loss: LossSpec | None = None,
    rng: np.random.Generator | None = None,
    tape: GradientTape | None = None,
    stats: LossStats | None = None,
) -> Tensor:
    """Multi-step prediction loss of a batch, recorded on ``tape``.

    Each trajectory contributes the mean elementwise loss over its retained
    targets; the batch loss is the average over trajectories.  A target is
    dropped when it is missing (NaN) or, with probability ``dropout_p``, when
    its whole time point is dropped.  Learned initial states are used for
    trajectories present in ``model.x0_table``.
    """
    loss = LossSpec() if loss is None else loss
    tape = GradientTape() if tape is None else tape
    if isinstance(batch, TrajectorySet):
        batch = batch.trajectories
    bt = _assemble(model, batch, tape, use_x0_table=True)
    keep = bt.valid
    if loss.dropout_p > 0.0:
        if rng is None:
            raise ContractError("dropout needs an rng")
        kept_points = rng.random((bt.K, bt.b)) >= loss.dropout_p
        keep = keep & kept_points.reshape(1, -1)
    e, keep = _elementwise(loss.kind, loss.hook, bt.target, bt.pred, keep)
    w = _weights(keep, bt, loss.normalization, stats)
    return total(hadamard(e, Tensor(w)))


def per_trajectory_loss(model: StateSpaceModel, trajectories, loss_kind: str = "mse", hook=None,
                        use_x0_table: bool = False, normalization: str = "retained") -> np.ndarray:
    """Loss of every trajectory (no dropout, no tape)."""
    if isinstance(trajectories, TrajectorySet):
        trajectories = trajectories.trajectories
    bt = _assemble(model, trajectories, None, use_x0_table)
    e, keep = _elementwise(loss_kind, hook, bt.target, bt.pred, bt.valid)
    ev = np.where(keep, e.value, 0.0).reshape(-1, bt.K, bt.b).sum(axis=(0, 1))
    per = keep.reshape(-1, bt.K, bt.b).sum(axis=(0, 1))
    denom = per if normalization == "retained" else bt.time_points
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(per > 0, ev / np.maximum(denom, 1), np.nan)


def evaluate(model: StateSpaceModel, trajectories, loss_kind: str = "mse", hook=None,
             use_x0_table: bool = False):
    """``(per_trajectory, mean)`` loss without dropout and without a tape.

    Initial states default to the trajectory's own (or zero); pass
    ``use_x0_table=True`` to use learned initial states of training
    trajectories.  Trajectories without any target are ignored in the mean.
    """
    per = per_trajectory_loss(model, trajectories, loss_kind, hook, use_x0_table)
    finite = per[~np.isnan(per)]
    return per, float(finite.mean()) if finite.size else float("nan")


__all__ = [
    "StateSpaceModel",
    "LossSpec",
    "LossStats",
    "resolve_mode",
    "rollout_states",
    "rollout_states_reference",
    "simulate",
    "predict",
    "masked_multistep_loss",
    "per_trajectory_loss",
    "evaluate",
]
