"""Identification with a known sparsity pattern.

60 % of the entries of the true A, B, C and D are zero.  Passing the true
masks to the scaled parametrization keeps those entries exactly zero.

Run:  python3 demos/03_sparse_identification.py
"""
# %%
import numpy as np

from stable_sysid.baseline import multistep_mse
from stable_sysid.model import StateSpaceModel
from stable_sysid.synth import GeneratorSpec, make_benchmark
from stable_sysid.trainer import TrainConfig, fit

spec = GeneratorSpec(n=7, m=6, p=5, sparsity_fraction=0.6, noise_std=0.5, trajectory_length=500, seed=2)
truth, (train, val, test) = make_benchmark(spec)
masks = {f"mask_{k}": v for k, v in truth.masks.items()}
print("zeros per matrix:", {k: int((v == 0).sum()) for k, v in truth.masks.items()})

# %%
config = TrainConfig(max_epochs=400, batch_size=1, learning_rate=1e-2, seed=0)
fitted = {}
for name, flags in [("scaled + masks", {"naive_A": True, **masks}), ("generic, no masks", {})]:
    model = fitted[name] = StateSpaceModel(7, 6, 5, id_D=True, rng=np.random.default_rng(2), **flags)
    fit(model, train, val, None, config)
    eff = model.effective()
    kept = all(np.all(eff[k][truth.masks[k] == 0] == 0.0) for k in "ABCD")
    print(f"{name:18s} test MSE {np.mean(multistep_mse(model, test)):.4f}   "
          f"radius {model.spectral_radius():.3f}   true zeros kept: {kept}")

# %% The fitted A of the masked run next to the truth.
np.set_printoptions(precision=3, suppress=True, linewidth=120)
print("\ntrue A\n", truth.A)
print("fitted A (scaled + masks)\n", fitted["scaled + masks"].effective()["A"])
