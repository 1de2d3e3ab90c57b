"""Training loop, adaptive-moment optimizer, LS initialization and A projection."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .autodiff import GradientTape, Tensor, absolute, hadamard, mean, spectral_radius_value
from .data import SegmentationSpec, TrajectorySet, batches, segment
from .errors import ContractError, NumericalError, StabilityViolation
from .model import LossSpec, LossStats, StateSpaceModel, evaluate, masked_multistep_loss
from .schur import (
    StableAParametrization,
    construct_generic_params,
    construct_near_identity_params,
    generic_certificate,
    logit,
    near_identity_certificate,
    unit_alpha,
)

STABILITY_TOL = 1e-9


@dataclass
class TrainConfig:
    """Optimization settings; the model itself carries the stability flags."""

    max_epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    init_learning_rate: float = 1e-3
    init_epochs: int = 1000
    grad_clip: float = 100.0
    init_grad_clip: float = 0.1
    train_loss: LossSpec = field(default_factory=LossSpec)
    val_loss: LossSpec = field(default_factory=LossSpec)
    init_loss: str = "mse"
    init_from_ls: bool = False
    seed: int = 0
    horizon: int | None = None
    stride: int = 1
    horizon_val: int | None = None
    stride_val: int = 1
    patience: int | None = None
    stability_check_every: int = 1

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be at least 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        for name in ("learning_rate", "init_learning_rate", "grad_clip", "init_grad_clip"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.init_epochs < 0:
            raise ContractError("init_epochs must be non-negative")
        if self.init_loss not in ("mse", "mae"):
            raise ContractError("init_loss must be 'mse' or 'mae'")
        if self.patience is not None and self.patience < 1:
            raise ContractError("patience must be at least 1")

    @property
    def segmentation(self) -> SegmentationSpec:
        return SegmentationSpec(self.horizon, self.stride, self.horizon_val, self.stride_val)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    """Moment estimates and step counter, one slot per parameter (by position)."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adaptive_moment_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected adaptive-moment update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.value.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.value.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        p.value = p.value - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return state


def clip(grad: np.ndarray, bound: float) -> np.ndarray:
    return np.clip(grad, -bound, bound)


# ---------------------------------------------------------------- LS init


def ls_initialize(tset: TrajectorySet, n: int | None = None):
    """Least-squares ``(A*, B*)`` from all transitions ``x(k) -> x(k+1)``.

    Transitions touching a missing state are skipped.  A rank-deficient
    regressor yields the minimum-norm solution and a warning.
    """
    if tset.target_kind != "state":
        raise ContractError("LS initialization needs input-state data")
    n = tset.q if n is None else n
    m = tset.m
    rows_x, rows_y = [], []
    for t in tset:
        X, U = t.targets, t.inputs
        ok = np.all(np.isfinite(X[:-1]), axis=1) & np.all(np.isfinite(X[1:]), axis=1)
        rows_x.append(np.hstack([X[:-1], U[:-1]])[ok])
        rows_y.append(X[1:][ok])
    Phi = np.concatenate(rows_x) if rows_x else np.zeros((0, n + m))
    Y = np.concatenate(rows_y) if rows_y else np.zeros((0, n))
    if Phi.shape[0] < n + m:
        raise ContractError(f"LS initialization needs at least {n + m} complete transitions, got {Phi.shape[0]}")
    theta, _, rank, _ = scipy.linalg.lstsq(Phi, Y, lapack_driver="gelsy")
    if rank < n + m:
        warnings.warn(f"LS regressor is rank deficient (rank {rank} < {n + m}); using the minimum-norm solution")
    theta = theta.T
    return theta[:, :n].copy(), theta[:, n:].copy()


# ---------------------------------------------------------------- projection


@dataclass
class ProjectionResult:
    parametrization: StableAParametrization
    relative_error: float
    steps: int
    exact: bool


def _rel_error(A, A_star):
    denom = np.linalg.norm(A_star)
    return float(np.linalg.norm(A - A_star) / (denom if denom > 0 else 1.0))


def _warm_start(A_star: np.ndarray, template: StableAParametrization):
    """Constructive parameters for ``A*`` (shrunk inside the bound if needed)."""
    bound = template.bound
    rho = spectral_radius_value(A_star)
    A0 = A_star if rho < 0.999 * bound else A_star * (0.999 * bound / rho)
    if template.mode == "generic":
        w = np.linalg.eigvalsh(generic_certificate(A0, template.gamma))
        alpha = unit_alpha(w.min(), w.max(), template.epsilon)
        return construct_generic_params(A0, template.epsilon, template.gamma, alpha)
    if template.mode == "near_identity":
        w = np.linalg.eigvalsh(near_identity_certificate(A0)[0])
        alpha = unit_alpha(w.min(), w.max(), template.epsilon)
        return construct_near_identity_params(A0, template.epsilon, alpha, template.delta)
    return None


def project_A_to_parametrization(A_star, template: StableAParametrization, config: TrainConfig | None = None,
                                 rng: np.random.Generator | None = None) -> ProjectionResult:
    """Parameters of ``template``'s mode whose A approximates ``A_star``.

    Scaled mode is solved exactly when ``rho(M * A*) < gamma``.  Generic and
    near-identity modes start from the constructive inverse (exact when
    ``A*`` is inside the bound, otherwise of a shrunk copy); sparse LMI
    starts from ``template``.  Gradient descent then runs for
    ``init_epochs`` steps and the best iterate is returned.
    """
    config = TrainConfig() if config is None else config
    A_star = np.asarray(A_star, dtype=np.float64)
    n = template.n
    if A_star.shape != (n, n):
        raise ContractError(f"A* has shape {A_star.shape}, expected {n}x{n}")
    if template.mode == "scaled":
        MA = template.mask * A_star
        rho = spectral_radius_value(MA) if np.any(MA) else 0.0
        if 1e-12 < rho < template.gamma:
            p = StableAParametrization("scaled", n, V=MA, eta=logit(rho / template.gamma), gamma=template.gamma,
                                       epsilon=template.epsilon, mask=template.mask)
            return ProjectionResult(p, _rel_error(p.matrix(), A_star), 0, True)
        p = template.copy()
        if rho > 1e-12:
            p.V.value = MA.copy()
            p.eta.value = np.array([[logit(0.999)]])
    else:
        p = template.copy()
        warm = _warm_start(A_star, template)
        if warm is not None:
            p.W.value = warm.W.value.copy()
            p.V.value = warm.V.value.copy()

    params = p.parameters()
    target = Tensor(A_star)
    best_err = _rel_error(p.matrix(), A_star)
    best = [q.value.copy() for q in params]
    state = AdamState()
    steps = 0
    for steps in range(1, config.init_epochs + 1):
        if best_err < 1e-14:
            break
        tape = GradientTape()
        r = p.materialize(tape) - target
        e = hadamard(r, r) if config.init_loss == "mse" else absolute(r)
        loss = mean(e)
        grads = tape.backward(loss)
        adaptive_moment_step(params, [clip(grads[q], config.init_grad_clip) for q in params], state,
                             config.init_learning_rate)
        err = _rel_error(p.matrix(), A_star)
        if err < best_err:
            best_err = err
            best = [q.value.copy() for q in params]
    for q, v in zip(params, best):
        q.value = v
    return ProjectionResult(p, best_err, steps, best_err < 1e-12)


def initialize_A(model: StateSpaceModel, A_star, config: TrainConfig) -> float:
    """Set the model's A to (an approximation of) ``A_star``; returns the relative error."""
    A_star = np.asarray(A_star, dtype=np.float64)
    if not model.stable_A:
        model.A_raw.value = A_star.copy()
        eff = model.matrices()["A"].value
        return _rel_error(eff, A_star)
    res = project_A_to_parametrization(A_star, model.parametrization, config)
    trainable = model.parametrization.V.trainable
    for dst, src in zip(model.parametrization.parameters(), res.parametrization.parameters()):
        dst.value = src.value.copy()
    model.parametrization.set_trainable(trainable)
    if res.relative_error > 1e-3:
        warnings.warn(f"initial A approximated with relative error {res.relative_error:.3e}")
    return res.relative_error


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    """Validation-selected model plus the training record."""

    model: StateSpaceModel
    history: list
    timings: list
    best_epoch: int
    best_val_loss: float
    best_time_s: float
    train_loss: float
    val_loss: float
    test_loss: float | None
    init_error: float | None = None
    stats: LossStats = field(default_factory=LossStats)

    @property
    def matrices(self) -> dict:
        return self.model.effective()


def _norms(model):
    return ", ".join(f"{name}={np.linalg.norm(p.value):.3e}" for name, p in model.named_parameters())


def _check_stability(model: StateSpaceModel, where: str):
    rho = model.spectral_radius()
    if not rho < model.bound + STABILITY_TOL:
        raise StabilityViolation(f"{where}: spectral radius {rho!r} exceeds the bound {model.bound}")


def fit(model: StateSpaceModel, train: TrajectorySet, val: TrajectorySet | None = None,
        test: TrajectorySet | None = None, config: TrainConfig | None = None) -> FitResult:
    """Train ``model`` in place and leave it at its best validation snapshot."""
    config = TrainConfig() if config is None else config
    if train.target_kind != model.target_kind:
        raise ContractError(f"model predicts {model.target_kind} targets, data holds {train.target_kind}")
    t_start = time.perf_counter()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    dropout_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))

    init_error = None
    if config.init_from_ls:
        A_star, B_star = ls_initialize(train, model.n)
        if model.B is not None:
            model.B.value = B_star.copy()
        init_error = initialize_A(model, A_star, config)
    elif model.stable_A and model.A_init is not None:
        init_error = initialize_A(model, model.A_init, config)

    if train.target_kind == "state":
        spec = config.segmentation
        seg_train = segment(train, spec.horizon, spec.stride)
        seg_val = None if val is None else segment(val, spec.horizon_val, spec.stride_val)
    else:
        seg_train, seg_val = train, val
    if len(seg_train) == 0:
        raise ContractError("no training trajectories (after segmentation)")
    if model.learn_x0:
        model.register_x0(seg_train.ids)
    selection = seg_val if seg_val is not None and len(seg_val) else None

    params = model.trainable_parameters()
    state = AdamState()
    stats = LossStats()
    history, timings = [], []
    best_val, best_epoch, best_time, best_snap = math.inf, 0, 0.0, model.snapshot()
    since_best = 0
    step = 0
    if model.stable_A:
        _check_stability(model, "initialization")
    for epoch in range(1, config.max_epochs + 1):
        losses, sizes = [], []
        for bi, batch in enumerate(batches(seg_train, config.batch_size, shuffle_rng)):
            tape = GradientTape()
            loss = masked_multistep_loss(model, batch, config.train_loss, dropout_rng, tape, stats)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss {value} at epoch {epoch}, batch {bi}; "
                                     f"parameter norms: {_norms(model)}")
            grads = tape.backward(loss)
            adaptive_moment_step(params, [clip(grads[p], config.grad_clip) for p in params], state,
                                 config.learning_rate)
            step += 1
            if model.stable_A and step % config.stability_check_every == 0:
                _check_stability(model, f"epoch {epoch}, batch {bi}")
            losses.append(value)
            sizes.append(len(batch))
        train_loss = float(np.dot(losses, sizes) / np.sum(sizes))
        if selection is not None:
            _, val_loss = evaluate(model, selection, config.val_loss.kind, config.val_loss.hook)
        else:
            _, val_loss = evaluate(model, seg_train, config.val_loss.kind, config.val_loss.hook, use_x0_table=True)
        wall = time.perf_counter() - t_start
        if not math.isfinite(val_loss):
            val_loss = math.inf
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        timings.append({"epoch": epoch, "wall_time_s": wall})
        if val_loss < best_val:
            best_val, best_epoch, best_time, best_snap = val_loss, epoch, wall, model.snapshot()
            since_best = 0
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                break
    model.restore(best_snap)
    _, final_train = evaluate(model, seg_train, config.val_loss.kind, config.val_loss.hook, use_x0_table=True)
    final_val = best_val if selection is not None else math.nan
    test_loss = None
    if test is not None and len(test):
        _, test_loss = evaluate(model, test, config.val_loss.kind, config.val_loss.hook)
    return FitResult(model, history, timings, best_epoch, best_val, best_time, final_train, final_val,
                     test_loss, init_error, stats)


def history_csv(result: FitResult) -> str:
    """Deterministic per-epoch history (timings are kept separately)."""
    lines = ["epoch,train_loss,val_loss"]
    for row in result.history:
        lines.append(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r}")
    return "\n".join(lines) + "\n"


def timings_csv(result: FitResult) -> str:
    lines = ["epoch,train_loss,val_loss,wall_time_s"]
    for row, t in zip(result.history, result.timings):
        lines.append(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},{t['wall_time_s']:.6f}")
    return "\n".join(lines) + "\n"


__all__ = [
    "TrainConfig",
    "AdamState",
    "adaptive_moment_step",
    "clip",
    "ls_initialize",
    "ProjectionResult",
    "project_A_to_parametrization",
    "initialize_A",
    "FitResult",
    "fit",
    "history_csv",
    "timings_csv",
]
