"""Free parametrizations of Schur matrices and their constructive inverses.

Four maps from unconstrained parameters to matrices with spectral radius
below a known bound:

``generic``
    ``A = S12 [ (S11/gamma^2 + S22)/2 + V - V^T ]^-1``, radius < gamma.
``near_identity``
    ``A = I - 2 (S11 + V - V^T)^-1 S12 S22^-1 S21``, radius < 1, biased
    towards the identity (forward-Euler discretizations, slow systems).
``sparse_lmi``
    ``A = M * (S12 [N * ((S11 + S22)/2 + V - V^T)]^-1)`` for a binary mask M
    and a diagonal scaling N, radius < 1, exact sparsity; conservative.
``scaled``
    ``A = sigmoid(eta) gamma / rho(M * V) * (M * V)``, radius < gamma, exact
    sparsity.

In every LMI mode ``S = W^T W + eps I`` with ``W`` of size 2n x 2n.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    GradientTape,
    Parameter,
    Tensor,
    apply_mask,
    as_tensor,
    hadamard,
    inverse,
    matmul,
    record,
    reciprocal,
    scalar_mul,
    scale,
    sigmoid,
    spectral_radius,
    spectral_radius_value,
)
from .errors import ContractError, NumericalError, SingularMatrixError

MODES = ("generic", "near_identity", "sparse_lmi", "scaled")
DEFAULT_EPSILON = 1e-6


def build_S(W, epsilon: float) -> Tensor:
    """``W^T W + epsilon I``, symmetric positive definite for epsilon > 0."""
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    W = as_tensor(W)
    return W.T @ W + Tensor(epsilon * np.eye(W.cols))


def blocks(S: Tensor):
    """The four n x n blocks ``S11, S12, S21, S22`` of a 2n x 2n matrix."""
    n = S.rows // 2
    if S.shape != (2 * n, 2 * n):
        raise ContractError(f"expected an even square matrix, got {S.shape}")
    return (
        S[0:n, 0:n],
        S[0:n, n:2 * n],
        S[n:2 * n, 0:n],
        S[n:2 * n, n:2 * n],
    )


def _skew(V: Tensor) -> Tensor:
    return V - V.T


@dataclass(frozen=True)
class SparsityScaling:
    """Diagonal scaling ``N`` used by the sparse LMI parametrization."""

    N: np.ndarray

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.N).copy()


def _check_mask(mask, n=None) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ContractError(f"mask must be square, got shape {mask.shape}")
    if n is not None and mask.shape[0] != n:
        raise ContractError(f"mask is {mask.shape}, expected {n}x{n}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask entries must be 0 or 1")
    return mask


def admits_only_nilpotent(mask) -> bool:
    """True if every matrix with this sparsity pattern is nilpotent (acyclic support graph)."""
    m = _check_mask(mask) != 0
    power = m.copy()
    for _ in range(m.shape[0]):
        if not power.any():
            return True
        power = (power.astype(np.int64) @ m.astype(np.int64)) > 0
    return not power.any()


def sparsity_scaling(mask, epsilon: float = DEFAULT_EPSILON, count_diagonal: bool = False) -> SparsityScaling:
    """``N_ii = max(sum_{j!=i} M_ij, sum_{j!=i} M_ji) + epsilon``.

    With ``count_diagonal=True`` the sums also include ``M_ii``.  That is the
    variant :func:`materialize_sparse_lmi` uses: the block matrix
    ``[[N, M], [M^T, N]]`` has ``M_ii`` off its diagonal, and it is only
    strictly diagonally dominant (hence positive definite, which the
    stability argument needs) if those entries are counted.
    """
    mask = _check_mask(mask)
    n = mask.shape[0]
    m = mask if count_diagonal else mask * (1.0 - np.eye(n))
    return SparsityScaling(np.diag(np.maximum(m.sum(axis=1), m.sum(axis=0)) + epsilon))


def _diag_inverse(t: Tensor, site: str) -> Tensor:
    d = np.diag(t.value).copy()
    if np.any(np.abs(d) < 1e-12):
        raise SingularMatrixError(f"diagonal entry {d[np.argmin(np.abs(d))]:.3e} is numerically zero", site)
    inv_d = 1.0 / d
    return record("diag_inverse", np.diag(inv_d), (t,), lambda g: (np.diag(-np.diag(g) * inv_d * inv_d),))


def generic_schur(W, V, gamma: float = 1.0, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    S11, S12, _, S22 = blocks(build_S(W, epsilon))
    inner = scale(scale(S11, 1.0 / gamma**2) + S22, 0.5) + _skew(as_tensor(V))
    return S12 @ inverse(inner, site="generic: (S11/g^2 + S22)/2 + V - V^T")


def near_identity_schur(W, V, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    S11, S12, S21, S22 = blocks(build_S(W, epsilon))
    n = S11.rows
    left = inverse(S11 + _skew(as_tensor(V)), site="near_identity: S11 + V - V^T")
    core = left @ (S12 @ (inverse(S22, site="near_identity: S22") @ S21))
    return Tensor(np.eye(n)) - scale(core, 2.0)


def sparse_lmi_schur(W, V, mask, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    mask = _check_mask(mask)
    S11, S12, _, S22 = blocks(build_S(W, epsilon))
    N = sparsity_scaling(mask, epsilon, count_diagonal=True).N
    H = scale(S11 + S22, 0.5) + _skew(as_tensor(V))
    return apply_mask(mask, S12 @ _diag_inverse(hadamard(Tensor(N), H), site="sparse_lmi: N * H"))


def scaled_schur(V, eta, mask, gamma: float = 1.0) -> Tensor:
    mask = _check_mask(mask)
    MV = apply_mask(mask, V)
    if not np.any(MV.value):
        raise NumericalError("scaled parametrization: mask * V is the zero matrix")
    rho = spectral_radius(MV)
    if rho.item() <= 1e-12 * np.abs(MV.value).max():
        raise NumericalError("scaled parametrization: mask * V is (numerically) nilpotent")
    factor = hadamard(scale(sigmoid(eta), gamma), reciprocal(rho))
    return scalar_mul(factor, MV)


class StableAParametrization:
    """Free parameters ``(W, V, eta)`` plus the constants of one mode.

    ``materialize(tape)`` rebuilds A from the current parameter values; pass a
    :class:`GradientTape` to record the computation for backpropagation.
    """

    def __init__(
        self,
        mode: str,
        n: int,
        W=None,
        V=None,
        eta=None,
        gamma: float = 1.0,
        epsilon: float = DEFAULT_EPSILON,
        delta: float | None = None,
        mask=None,
        rng: np.random.Generator | None = None,
        init_std: float = 0.1,
    ):
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
        if not epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {epsilon}")
        if not 0 < gamma <= 1:
            raise ContractError(f"gamma must lie in (0, 1], got {gamma}")
        if delta is not None and not delta > 0:
            raise ContractError(f"delta must be positive, got {delta}")
        self.mode = mode
        self.n = int(n)
        self.gamma = float(gamma)
        self.epsilon = float(epsilon)
        self.delta = delta
        self.mask = _check_mask(np.ones((n, n)) if mask is None else mask, self.n)
        rng = np.random.default_rng() if rng is None else rng
        if W is None and mode != "scaled":
            W = rng.normal(0.0, init_std, (2 * n, 2 * n))
        if V is None:
            V = rng.normal(0.0, init_std, (n, n))
        if eta is None and mode == "scaled":
            eta = 0.0
        if mode == "scaled" and admits_only_nilpotent(self.mask):
            raise ContractError("scaled mode needs a mask whose support graph has a cycle; "
                                "this mask only admits nilpotent matrices")
        self.W = None if mode == "scaled" else Parameter(W, name="W")
        self.V = Parameter(V, name="V")
        self.eta = Parameter(np.reshape(eta, (1, 1)), name="eta") if mode == "scaled" else None
        if self.W is not None and self.W.shape != (2 * n, 2 * n):
            raise ContractError(f"W must be {2 * n}x{2 * n}, got {self.W.shape}")
        if self.V.shape != (n, n):
            raise ContractError(f"V must be {n}x{n}, got {self.V.shape}")

    @property
    def bound(self) -> float:
        """Upper bound on the spectral radius of the materialized matrix."""
        return self.gamma if self.mode in ("generic", "scaled") else 1.0

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.W, self.V, self.eta) if p is not None]

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.trainable = flag

    def _entered(self, tape: GradientTape | None):
        def enter(p):
            if p is None:
                return None
            return tape.watch(p) if tape is not None else p.constant()

        return enter(self.W), enter(self.V), enter(self.eta)

    def materialize(self, tape: GradientTape | None = None) -> Tensor:
        return _MATERIALIZERS[self.mode](self, tape)

    def matrix(self) -> np.ndarray:
        """Current A as a plain array."""
        return self.materialize().numpy()

    def copy(self) -> "StableAParametrization":
        return StableAParametrization.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "n": self.n,
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "mask": self.mask.tolist(),
            "V": self.V.value.tolist(),
        }
        if self.W is not None:
            d["W"] = self.W.value.tolist()
        if self.eta is not None:
            d["eta"] = float(self.eta.value[0, 0])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StableAParametrization":
        return cls(
            d["mode"], d["n"], W=d.get("W"), V=d["V"], eta=d.get("eta"), gamma=d["gamma"],
            epsilon=d["epsilon"], delta=d.get("delta"), mask=d["mask"],
        )

    def __repr__(self):
        return f"StableAParametrization(mode={self.mode!r}, n={self.n}, gamma={self.gamma}, epsilon={self.epsilon})"


def _require(p: StableAParametrization, mode: str):
    if p.mode != mode:
        raise ContractError(f"parametrization is in mode {p.mode!r}, not {mode!r}")


def materialize_generic(p: StableAParametrization, tape: GradientTape | None = None) -> Tensor:
    _require(p, "generic")
    W, V, _ = p._entered(tape)
    return generic_schur(W, V, p.gamma, p.epsilon)


def materialize_near_identity(p: StableAParametrization, tape: GradientTape | None = None) -> Tensor:
    _require(p, "near_identity")
    W, V, _ = p._entered(tape)
    return near_identity_schur(W, V, p.epsilon)


def materialize_sparse_lmi(p: StableAParametrization, tape: GradientTape | None = None) -> Tensor:
    _require(p, "sparse_lmi")
    W, V, _ = p._entered(tape)
    return sparse_lmi_schur(W, V, p.mask, p.epsilon)


def materialize_scaled(p: StableAParametrization, tape: GradientTape | None = None) -> Tensor:
    _require(p, "scaled")
    _, V, eta = p._entered(tape)
    return scaled_schur(V, eta, p.mask, p.gamma)


_MATERIALIZERS = {
    "generic": materialize_generic,
    "near_identity": materialize_near_identity,
    "sparse_lmi": materialize_sparse_lmi,
    "scaled": materialize_scaled,
}


# ---------------------------------------------------------------------------
# constructive inverses


def _require_schur(A0: np.ndarray, bound: float = 1.0) -> float:
    A0 = np.asarray(A0, dtype=np.float64)
    if A0.ndim != 2 or A0.shape[0] != A0.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {A0.shape}")
    rho = spectral_radius_value(A0)
    if not rho < bound:
        raise ContractError(f"matrix has spectral radius {rho:.6g}, needs < {bound:g}")
    return rho


def solve_discrete_lyapunov(A, rhs) -> np.ndarray:
    """Solve ``Q - A Q A^T = rhs`` by Kronecker vectorization.

    Cost is O(n^6); intended for n up to a few dozen.
    """
    A = np.asarray(A, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    _require_schur(A)
    if rhs.shape != A.shape:
        raise ContractError(f"rhs shape {rhs.shape} does not match A {A.shape}")
    if not np.allclose(rhs, rhs.T, rtol=0, atol=1e-12 * max(1.0, np.abs(rhs).max())):
        raise ContractError("rhs must be symmetric")
    n = A.shape[0]
    # row-major vec: vec(A Q A^T) = (A kron A) vec(Q)
    q = np.linalg.solve(np.eye(n * n) - np.kron(A, A), rhs.reshape(-1))
    Q = q.reshape(n, n)
    return 0.5 * (Q + Q.T)


def _spd_sqrt(M: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    if w.min() <= 0:
        raise NumericalError(f"matrix is not positive definite (min eigenvalue {w.min():.3e})")
    return (U * np.sqrt(w)) @ U.T


def _w_from_gamma(Gam: np.ndarray, epsilon: float, alpha: float | None) -> tuple[np.ndarray, float]:
    w = np.linalg.eigvalsh(0.5 * (Gam + Gam.T))
    if w.min() <= 0:
        raise NumericalError("certificate matrix is not positive definite")
    floor = 2.0 * epsilon / w.min()
    alpha = floor if alpha is None else float(alpha)
    if not alpha * w.min() > epsilon:
        raise ContractError(f"alpha={alpha:.3e} too small: need alpha > {epsilon / w.min():.3e}")
    return _spd_sqrt(alpha * Gam - epsilon * np.eye(Gam.shape[0])), alpha


def unit_alpha(Gam_min: float, Gam_max: float, epsilon: float) -> float:
    """A scale that puts the constructed ``S`` at unit size (never below the safe floor)."""
    return max(2.0 * epsilon / Gam_min, 1.0 / Gam_max)


def generic_certificate(A0, gamma: float = 1.0) -> np.ndarray:
    """The positive definite block matrix behind the generic parametrization."""
    A0 = np.asarray(A0, dtype=np.float64)
    n = A0.shape[0]
    At = A0 / gamma
    Q = solve_discrete_lyapunov(At, np.eye(n))
    Gam = np.block([[Q, At @ Q], [Q @ At.T, Q]])
    D = np.diag(np.r_[np.full(n, gamma), np.ones(n)])
    return D @ Gam @ D


def construct_generic_params(A0, epsilon: float = DEFAULT_EPSILON, gamma: float = 1.0,
                             alpha: float | None = None) -> StableAParametrization:
    """Parameters ``(W, V=0)`` whose generic materialization equals ``A0``.

    ``alpha`` rescales the certificate; the default ``2 eps / lambda_min``
    gives ``lambda_min(W^T W) = eps``.
    """
    _require_schur(A0, gamma)
    A0 = np.asarray(A0, dtype=np.float64)
    n = A0.shape[0]
    W, _ = _w_from_gamma(generic_certificate(A0, gamma), epsilon, alpha)
    return StableAParametrization("generic", n, W=W, V=np.zeros((n, n)), gamma=gamma, epsilon=epsilon)


def near_identity_certificate(A0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(Gamma, P, F)`` with ``F = A0 - I`` and ``P - A0^T P A0 = I``."""
    A0 = np.asarray(A0, dtype=np.float64)
    n = A0.shape[0]
    P = solve_discrete_lyapunov(A0.T, np.eye(n))
    F = A0 - np.eye(n)
    Gam = np.block([[-P @ F - F.T @ P, F.T], [F, np.linalg.inv(P)]])
    return 0.5 * (Gam + Gam.T), P, F


def construct_near_identity_params(A0, epsilon: float = DEFAULT_EPSILON, alpha: float | None = None,
                                   delta: float | None = None) -> StableAParametrization:
    """Parameters ``(W, V)`` whose near-identity materialization equals ``A0``.

    The discretization step is folded into ``F = A0 - I``; ``delta`` is only
    stored as metadata.
    """
    _require_schur(A0)
    A0 = np.asarray(A0, dtype=np.float64)
    n = A0.shape[0]
    Gam, P, F = near_identity_certificate(A0)
    W, alpha = _w_from_gamma(Gam, epsilon, alpha)
    # skew part that turns (S11 + V - V^T) into -2 alpha F^T P
    V = 0.5 * alpha * (P @ F - F.T @ P)
    return StableAParametrization("near_identity", n, W=W, V=V, epsilon=epsilon, delta=delta)


def logit(q: float) -> float:
    return math.log(q / (1.0 - q))


def construct_scaled_params(A0) -> StableAParametrization:
    """Exact scaled-mode parameters: mask = sparse(A0), V = A0, gamma = (1 + rho)/2."""
    rho = _require_schur(A0)
    if rho == 0.0:
        raise ContractError("a matrix with zero spectral radius has no scaled representation")
    A0 = np.asarray(A0, dtype=np.float64)
    gamma = min((1.0 + rho) / 2.0, 1.0)
    mask = (A0 != 0).astype(np.float64)
    return StableAParametrization("scaled", A0.shape[0], V=A0.copy(), eta=logit(rho / gamma), gamma=gamma, mask=mask)
