"""Stable A matrices from unconstrained parameters.

Run:  python3 demos/01_stable_parametrizations.py
"""
# %%
import numpy as np

from stable_sysid.autodiff import spectral_radius_value
from stable_sysid.schur import (
    StableAParametrization,
    construct_generic_params,
    construct_near_identity_params,
    construct_scaled_params,
)

rng = np.random.default_rng(0)
n = 4

# %% Any (W, V) gives a matrix inside the unit circle (or inside gamma for the
# generic and scaled modes).  Large random parameters make no difference.
for mode, extra in [("generic", {"gamma": 0.8}), ("near_identity", {}),
                    ("sparse_lmi", {"mask": np.triu(np.ones((n, n)))}),
                    ("scaled", {"gamma": 0.5, "mask": np.roll(np.eye(n), 1, axis=1) + np.eye(n)})]:
    radii = []
    for _ in range(200):
        p = StableAParametrization(mode, n, W=5 * rng.standard_normal((2 * n, 2 * n)),
                                   V=5 * rng.standard_normal((n, n)), eta=rng.standard_normal(), **extra)
        radii.append(spectral_radius_value(p.matrix()))
    print(f"{mode:14s} bound {p.bound:.2f}   largest radius seen {max(radii):.6f}")

# %% Masked modes put exact zeros where the mask is zero.
p = StableAParametrization("sparse_lmi", n, mask=np.triu(np.ones((n, n))), rng=rng, init_std=1.0)
print("\nsparse_lmi A with an upper-triangular mask:")
print(np.round(p.matrix(), 4))

# %% Going the other way: every stable matrix has parameters that reproduce it.
A0 = rng.standard_normal((n, n))
A0 *= 0.95 / spectral_radius_value(A0)
for build in (construct_generic_params, construct_near_identity_params, construct_scaled_params):
    p = build(A0)
    err = np.linalg.norm(p.matrix() - A0) / np.linalg.norm(A0)
    print(f"{build.__name__:32s} relative error {err:.2e}")
