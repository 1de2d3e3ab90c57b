"""Seeded random systems, sparsification, binary-noise excitation and datasets.

Every function is a pure function of its arguments and seed.  Random
streams come from numpy's ``PCG64`` generator; independent sub-streams are
derived with ``SeedSequence(seed, spawn_key=(k,))`` so the system, the
sparsity pattern, each split's input and the noise never share draws.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import spectral_radius_value
from .data import Trajectory, TrajectorySet
from .errors import ContractError

# sub-stream ids
_SYSTEM, _SPARSITY, _TRAIN, _VAL, _TEST, _NOISE = range(6)


def stream(seed: int, key: int) -> np.random.Generator:
    """Independent generator number ``key`` derived from ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(key),)))


@dataclass(frozen=True)
class GeneratorSpec:
    """How to draw one benchmark system and its train/val/test trajectories."""

    n: int
    m: int
    p: int
    target_spectral_radius: float = 0.9
    sparsity_fraction: float = 0.0
    noise_std: float = 0.0
    gbn_switch_prob: float = 0.1
    trajectory_length: int = 300
    seed: int = 0
    target_kind: str = "output"
    feedthrough: bool = True
    train_trajectories: int = 1

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.p < 1:
            raise ContractError(f"dimensions must be positive, got n={self.n}, m={self.m}, p={self.p}")
        if not 0.0 < self.target_spectral_radius < 1.0:
            raise ContractError("target_spectral_radius must lie in (0, 1)")
        if not 0.0 <= self.sparsity_fraction < 1.0:
            raise ContractError("sparsity_fraction must lie in [0, 1)")
        if not self.noise_std >= 0.0:
            raise ContractError("noise_std must be non-negative")
        if not 0.0 < self.gbn_switch_prob < 1.0:
            raise ContractError("gbn_switch_prob must lie in (0, 1)")
        if self.trajectory_length < 2:
            raise ContractError("trajectory_length must be at least 2")
        if not 0 <= self.seed < 2**64:
            raise ContractError("seed must be a 64-bit unsigned integer")
        if self.target_kind not in ("output", "state"):
            raise ContractError("target_kind must be 'output' or 'state'")
        if self.train_trajectories < 1:
            raise ContractError("train_trajectories must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LinearSystem:
    """Ground-truth matrices ``(A, B, C, D)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __iter__(self):
        return iter((self.A, self.B, self.C, self.D))

    @property
    def masks(self) -> dict:
        """Sparsity patterns (1 where an entry is nonzero)."""
        return {k: (v != 0).astype(np.float64) for k, v in zip("ABCD", self)}

    def to_model(self, input_output: bool = True):
        """The system as a free-A :class:`~stable_sysid.model.StateSpaceModel`."""
        from .model import StateSpaceModel

        n, m = self.B.shape
        return StateSpaceModel(
            n, m, self.C.shape[0] if input_output else None, input_output=input_output,
            id_D=input_output, stable_A=False, A=self.A, B=self.B, C=self.C, D=self.D,
            rng=np.random.default_rng(0),
        )


def random_stable_system(spec: GeneratorSpec) -> LinearSystem:
    """Gaussian matrices with A rescaled to the target spectral radius."""
    rng = stream(spec.seed, _SYSTEM)
    n, m, p = spec.n, spec.m, spec.p
    while True:
        A = rng.standard_normal((n, n))
        rho = spectral_radius_value(A)
        if rho > 1e-8:
            break
    A *= spec.target_spectral_radius / rho
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    D = rng.standard_normal((p, m)) if spec.feedthrough else np.zeros((p, m))
    return LinearSystem(A, B, C, D)


def _zero_count(fraction: float, size: int) -> int:
    return int(np.floor(fraction * size + 0.5))


def _sparsify_one(M: np.ndarray, fraction: float, rng) -> np.ndarray:
    k = _zero_count(fraction, M.size)
    out = M.copy()
    if k:
        idx = rng.choice(M.size, size=k, replace=False)
        out.flat[idx] = 0.0
    return out


def sparsify(system: LinearSystem, fraction: float, seed: int, max_attempts: int = 1000,
             min_spectral_radius: float = 0.0) -> LinearSystem:
    """Zero ``round(fraction * size)`` uniformly chosen entries of every matrix.

    The pattern of A is redrawn until ``min_spectral_radius < rho(A) < 1``
    (``min_spectral_radius = 0`` keeps only the stability requirement); after
    ``max_attempts`` failures A is rescaled to spectral radius 0.99 instead.
    """
    if not 0.0 <= fraction < 1.0:
        raise ContractError(f"fraction must lie in [0, 1), got {fraction}")
    if fraction == 0.0:
        return LinearSystem(*(M.copy() for M in system))
    rng = stream(seed, _SPARSITY)
    A = None
    for _ in range(max_attempts):
        cand = _sparsify_one(system.A, fraction, rng)
        rho = spectral_radius_value(cand) if np.any(cand) else 0.0
        if rho < 1.0 and (min_spectral_radius == 0.0 or rho > min_spectral_radius):
            A = cand
            break
    if A is None:
        warnings.warn(f"no admissible sparsity pattern in {max_attempts} attempts; rescaling A")
        A = cand
        rho = spectral_radius_value(A) if np.any(A) else 0.0
        if rho >= 1.0:
            A = A * (0.99 / rho)
    B, C, D = (_sparsify_one(M, fraction, rng) for M in (system.B, system.C, system.D))
    return LinearSystem(A, B, C, D)


def gbn_input(length: int, m: int, switch_prob: float, seed=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Generalized binary noise: +-1 per channel, flipping sign with probability ``switch_prob``."""
    if not 0.0 < switch_prob < 1.0:
        raise ContractError(f"switch_prob must lie in (0, 1), got {switch_prob}")
    if rng is None:
        rng = np.random.default_rng(seed)
    start = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    flips = rng.random((length - 1, m)) < switch_prob
    sign = np.concatenate([np.zeros((1, m), dtype=np.int64), np.cumsum(flips, axis=0)])
    return start * np.where(sign % 2 == 0, 1.0, -1.0)


def simulate_system(system: LinearSystem, u: np.ndarray, x0=None):
    """Plain numpy rollout: states ``x_0..x_{l-1}`` and outputs ``y_0..y_{l-1}``."""
    A, B, C, D = system
    n = A.shape[0]
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64)
    X = np.empty((u.shape[0], n))
    for k in range(u.shape[0]):
        X[k] = x
        x = A @ x + B @ u[k]
    return X, X @ C.T + u @ D.T


def generate_dataset(system: LinearSystem, spec: GeneratorSpec):
    """``(train, val, test)`` trajectory sets simulated from ``x0 = 0``.

    Each split gets its own GBN input stream; Gaussian noise with std
    ``noise_std`` is added to the training targets only.
    """
    noise_rng = stream(spec.seed, _NOISE)
    sets = []
    for name, key, count in (("train", _TRAIN, spec.train_trajectories), ("val", _VAL, 1), ("test", _TEST, 1)):
        rng = stream(spec.seed, key)
        trajs = []
        for i in range(count):
            u = gbn_input(spec.trajectory_length, spec.m, spec.gbn_switch_prob, rng=rng)
            X, Y = simulate_system(system, u)
            targets = X if spec.target_kind == "state" else Y
            if name == "train" and spec.noise_std > 0:
                targets = targets + noise_rng.normal(0.0, spec.noise_std, targets.shape)
            trajs.append(Trajectory(f"{name}{i}", u, targets))
        sets.append(TrajectorySet(trajs, spec.target_kind))
    return tuple(sets)


def make_benchmark(spec: GeneratorSpec):
    """System (sparsified if requested) and its three splits."""
    system = random_stable_system(spec)
    if spec.sparsity_fraction > 0:
        system = sparsify(system, spec.sparsity_fraction, spec.seed)
    return system, generate_dataset(system, spec)


__all__ = [
    "GeneratorSpec",
    "LinearSystem",
    "random_stable_system",
    "sparsify",
    "gbn_input",
    "simulate_system",
    "generate_dataset",
    "make_benchmark",
    "stream",
]
