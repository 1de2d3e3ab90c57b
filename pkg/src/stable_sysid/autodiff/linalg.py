"""Matrix inverse and spectral radius, with their reverse-mode rules.

Eigenvalues are computed from scratch: Householder reduction to upper
Hessenberg form, then the implicit Francis double-shift QR iteration with
deflation.  Only eigenvalues are produced; the eigenvectors needed for the
spectral-radius gradient come from a few steps of complex inverse iteration.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError, DimensionError, NumericalError, SingularMatrixError
from .tensor import Tensor, as_tensor, record

__all__ = [
    "inverse",
    "spectral_radius",
    "balance",
    "hessenberg",
    "hessenberg_eigenvalues",
    "eigenvalues",
    "spectral_radius_value",
    "RCOND_MIN",
]

RCOND_MIN = 1e-12
DEGENERACY_RTOL = 1e-8
_EPS = np.finfo(np.float64).eps


def _square(a: Tensor, what: str):
    if a.rows != a.cols:
        raise DimensionError(f"{what} needs a square matrix, got {a.shape}")


def inverse(a, site: str = "inverse") -> Tensor:
    """LU-based inverse; raises :class:`SingularMatrixError` when rcond < 1e-12.

    ``site`` names the calling expression so the error says where it happened.
    """
    a = as_tensor(a)
    _square(a, "inverse")
    try:
        inv = np.linalg.inv(a.value)  # getrf/getri: LU with partial pivoting
    except np.linalg.LinAlgError:
        raise SingularMatrixError("matrix is exactly singular", site) from None
    norm_a = np.abs(a.value).sum(axis=0).max()
    norm_inv = np.abs(inv).sum(axis=0).max()
    if not np.isfinite(norm_inv) or norm_a == 0.0:
        raise SingularMatrixError("matrix is singular", site)
    rcond = 1.0 / (norm_a * norm_inv)
    if rcond < RCOND_MIN:
        raise SingularMatrixError(f"reciprocal condition number {rcond:.3e} below {RCOND_MIN:g}", site)
    inv_t = inv.T
    return record("inverse", inv, (a,), lambda g: (-(inv_t @ g @ inv_t),))


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Upper Hessenberg matrix similar to ``a`` (Householder reflections)."""
    h = np.array(a, dtype=np.float64)
    n = h.shape[0]
    for k in range(n - 2):
        v = _reflector(h[k + 1:, k].copy())
        if v is None:
            continue
        h[k + 1:, k:] -= 2.0 * np.outer(v, v @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h


def balance(a: np.ndarray, max_rounds: int = 100) -> np.ndarray:
    """Diagonal similarity with power-of-two factors that evens out row and column norms.

    Graded matrices otherwise produce QR shifts many orders of magnitude away
    from the eigenvalues and the iteration stalls.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_rounds):
        converged = True
        for i in range(n):
            c = np.abs(a[:, i]).sum() - abs(a[i, i])
            r = np.abs(a[i, :]).sum() - abs(a[i, i])
            if c == 0.0 or r == 0.0:
                continue
            total = c + r
            e = 0
            # exponent that brings c * 2**e closest to r / 2**e
            while c < r / 2.0 and e < 1000:
                c *= 4.0
                e += 1
            while c >= 2.0 * r and e > -1000:
                c /= 4.0
                e -= 1
            f = math.ldexp(1.0, e)
            if e != 0 and (c + r) / f < 0.95 * total:
                converged = False
                a[i, :] = np.ldexp(a[i, :], -e)
                a[:, i] = np.ldexp(a[:, i], e)
        if converged:
            break
    return a


def _eig2(b: np.ndarray):
    a11, a12, a21, a22 = b[0, 0], b[0, 1], b[1, 0], b[1, 1]
    mid = 0.5 * (a11 + a22)
    half = 0.5 * (a11 - a22)
    disc = half * half + a12 * a21
    if disc >= 0.0:
        root = math.sqrt(disc)
        big = mid + math.copysign(root, mid)
        # the smaller root either directly or through the determinant, whichever cancels less
        direct = mid - math.copysign(root, mid)
        via_det_err = (abs(a11 * a22) + abs(a12 * a21)) / abs(big) if big != 0.0 else math.inf
        if abs(mid) + root <= via_det_err:
            small = direct
        else:
            small = (a11 * a22 - a12 * a21) / big
        return [complex(big), complex(small)]
    im = math.sqrt(-disc)
    return [complex(mid, im), complex(mid, -im)]


def _reflector(x: np.ndarray):
    big = np.abs(x).max()
    if big == 0.0 or not np.isfinite(big):
        return None
    v = x / big  # the shift vector is quadratic in the entries; squaring it again could underflow
    alpha = np.linalg.norm(v)
    v[0] += math.copysign(alpha, v[0])
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return None
    return v / nv


def _francis_step(w: np.ndarray, exceptional: bool):
    """One implicit double-shift QR sweep on the unreduced Hessenberg window ``w``."""
    p = w.shape[0]
    if exceptional:
        s = abs(w[p - 1, p - 2]) + abs(w[p - 2, p - 3])
        h11 = 0.75 * s + w[p - 1, p - 1]
        pair = np.array([[h11, -0.4375 * s], [s, h11]])
    else:
        pair = w[p - 2:, p - 2:]
    rt1, rt2 = _eig2(pair)
    if rt1.imag == 0.0:
        # two real shifts: use the one nearer the corner entry twice
        near = rt1 if abs(rt1.real - w[p - 1, p - 1]) <= abs(rt2.real - w[p - 1, p - 1]) else rt2
        rt1 = rt2 = near
    # first column of (W - rt1)(W - rt2), divided by s so nothing underflows
    s = abs(w[0, 0] - rt2.real) + abs(rt2.imag) + abs(w[1, 0])
    if s == 0.0:
        return
    h21s = w[1, 0] / s
    x = h21s * w[0, 1] + (w[0, 0] - rt1.real) * ((w[0, 0] - rt2.real) / s) - rt1.imag * (rt2.imag / s)
    y = h21s * (w[0, 0] + w[1, 1] - rt1.real - rt2.real)
    z = h21s * w[2, 1]
    for k in range(p - 2):
        v = _reflector(np.array([x, y, z]))
        if v is not None:
            q = max(0, k - 1)
            w[k:k + 3, q:] -= 2.0 * np.outer(v, v @ w[k:k + 3, q:])
            r = min(k + 4, p)
            w[:r, k:k + 3] -= 2.0 * np.outer(w[:r, k:k + 3] @ v, v)
            if k > 0:
                w[k + 1:k + 3, k - 1] = 0.0
        x = w[k + 1, k]
        y = w[k + 2, k]
        if k < p - 3:
            z = w[k + 3, k]
    v = _reflector(np.array([x, y]))
    if v is not None:
        w[p - 2:p, p - 3:] -= 2.0 * np.outer(v, v @ w[p - 2:p, p - 3:])
        w[:p, p - 2:p] -= 2.0 * np.outer(w[:p, p - 2:p] @ v, v)
        w[p - 1, p - 3] = 0.0


def hessenberg_eigenvalues(h: np.ndarray, max_sweeps: int | None = None) -> np.ndarray:
    """Eigenvalues of an upper Hessenberg matrix by shifted QR with deflation."""
    h = np.array(h, dtype=np.float64)
    n = h.shape[0]
    if max_sweeps is None:
        max_sweeps = 100 * max(n, 1)
    scale_ref = np.abs(h).sum() or 1.0
    found: list[complex] = []
    hi = n - 1
    its = 0
    sweeps = 0
    while hi >= 0:
        lo = hi
        while lo > 0:
            s = abs(h[lo - 1, lo - 1]) + abs(h[lo, lo])
            if s == 0.0:
                s = scale_ref
            if abs(h[lo, lo - 1]) <= _EPS * s:
                h[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            found.append(complex(h[hi, hi]))
            hi -= 1
            its = 0
        elif lo == hi - 1:
            found.extend(_eig2(h[hi - 1:hi + 1, hi - 1:hi + 1]))
            hi -= 2
            its = 0
        else:
            if sweeps >= max_sweeps:
                raise NumericalError(f"QR iteration did not converge after {sweeps} sweeps (n={n})")
            its += 1
            sweeps += 1
            _francis_step(h[lo:hi + 1, lo:hi + 1], exceptional=its % 10 == 0)
    return np.array(found[::-1], dtype=np.complex128)


def eigenvalues(a) -> np.ndarray:
    """All (complex) eigenvalues of a real square matrix."""
    a = np.asarray(a.value if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"eigenvalues need a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix has non-finite entries")
    big = np.abs(a).max() if a.size else 0.0
    if big == 0.0:
        return np.zeros(a.shape[0], dtype=np.complex128)
    # exact power-of-two scalings keep squares away from under/overflow
    shift = -math.frexp(big)[1]
    a = balance(np.ldexp(a, shift))
    rescale = -math.frexp(np.abs(a).max())[1]
    shift += rescale
    vals = hessenberg_eigenvalues(hessenberg(np.ldexp(a, rescale)))
    return np.ldexp(vals.real, -shift) + 1j * np.ldexp(vals.imag, -shift)


def spectral_radius_value(a) -> float:
    """Plain float spectral radius (no tape)."""
    return float(np.max(np.abs(eigenvalues(a))))


def _inverse_iteration(a: np.ndarray, lam: complex, steps: int = 3) -> np.ndarray:
    n = a.shape[0]
    z = np.ones(n, dtype=np.complex128) + 1e-3 * np.arange(n)
    z /= np.linalg.norm(z)
    delta = 1e-10 * max(1.0, abs(lam))
    for attempt in range(6):
        m = a - (lam + delta) * np.eye(n)
        try:
            for _ in range(steps):
                z = np.linalg.solve(m, z)
                z /= np.linalg.norm(z)
            if np.all(np.isfinite(z)):
                return z
        except np.linalg.LinAlgError:
            pass
        delta *= 100.0
        z = np.ones(n, dtype=np.complex128) / math.sqrt(n)
    raise NumericalError(f"inverse iteration failed for eigenvalue {lam}")


def _dominant(vals: np.ndarray):
    mods = np.abs(vals)
    i = int(np.argmax(mods))
    lam = vals[i]
    rho = float(mods[i])
    rest = np.delete(vals, i)
    if rest.size and abs(lam.imag) > 1e-12 * max(1.0, rho):
        # the conjugate partner shares the modulus but is not a competitor
        rest = np.delete(rest, int(np.argmin(np.abs(rest - np.conj(lam)))))
    degenerate = rho == 0.0 or (rest.size > 0 and (rho - np.abs(rest).max()) < DEGENERACY_RTOL * rho)
    return lam, rho, degenerate


def _modulus_gradient(a: np.ndarray, lam: complex) -> np.ndarray:
    v = _inverse_iteration(a, lam)
    w = _inverse_iteration(a.T, lam)
    return np.real(np.conj(lam) * np.outer(w, v) / (w @ v)) / abs(lam)


def _tied_gradient(a: np.ndarray, vals: np.ndarray, rho: float):
    """Common modulus gradient of the eigenvalues tied at ``rho``, or ``None``.

    Ties are structural for periodic sparsity patterns (the spectrum is
    invariant under a rotation), and then every tied modulus is the same
    smooth function along perturbations that keep the zero pattern of ``a``.
    Requires distinct tied eigenvalues whose gradients agree on that pattern;
    off the pattern the mean is returned (the masked composites never use it).
    """
    tied = vals[np.abs(vals) >= rho * (1.0 - DEGENERACY_RTOL)]
    tied = tied[tied.imag >= -1e-12 * rho]  # one member per conjugate pair
    gaps = np.abs(tied[:, None] - tied[None, :]) + np.eye(tied.size) * rho
    if gaps.min() < 1e-6 * rho:
        return None
    grads = [_modulus_gradient(a, lam) for lam in tied]
    support = a != 0
    scale = max(float(np.abs(g[support]).max()) for g in grads)
    if any(np.abs(g - grads[0])[support].max() > 1e-6 * scale for g in grads[1:]):
        return None
    return np.mean(grads, axis=0)


def spectral_radius(a) -> Tensor:
    """Largest eigenvalue modulus as a 1x1 tensor.

    The gradient is ``Re(conj(lam) * w v^T / (w^T v)) / |lam|`` for the
    dominant eigenpair (``A v = lam v``, ``A^T w = lam w``).  When another
    eigenvalue, other than the conjugate partner, has a modulus within 1e-8
    relative of the largest one, the tied moduli are differentiated one by
    one; if they agree on the nonzero pattern of ``a`` (as for periodic
    sparsity patterns) that common gradient is used.  Otherwise the result is treated as a constant and the
    tape gets the ``"spectral_radius_degenerate"`` flag.
    """
    a = as_tensor(a)
    _square(a, "spectral_radius")
    if not np.any(a.value):
        raise ContractError("spectral_radius of the zero matrix")
    av = a.value
    vals = eigenvalues(av)
    lam, rho, degenerate = _dominant(vals)
    tied_grad = None
    if degenerate and rho > 0.0:
        tied_grad = _tied_gradient(av, vals, rho)
        degenerate = tied_grad is None
    if degenerate and a.tape is not None:
        a.tape.flags.add("spectral_radius_degenerate")

    def vjp(g):
        if degenerate:
            return (np.zeros(av.shape),)
        grad = tied_grad if tied_grad is not None else _modulus_gradient(av, lam)
        return (g[0, 0] * grad,)

    return record("spectral_radius", np.array([[rho]]), (a,), vjp)
