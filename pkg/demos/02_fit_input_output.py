"""Identify a 5-state system from noisy input-output data.

A free A matrix and the stable generic parametrization are trained on the
same data; the stable one cannot leave the unit circle during training.

Run:  python3 demos/02_fit_input_output.py
"""
# %%
import numpy as np

from stable_sysid.baseline import build_comparison, multistep_mse
from stable_sysid.model import StateSpaceModel
from stable_sysid.synth import GeneratorSpec, make_benchmark
from stable_sysid.trainer import TrainConfig, fit

spec = GeneratorSpec(n=5, m=3, p=3, target_spectral_radius=0.9, noise_std=0.5, trajectory_length=300, seed=1)
truth, (train, val, test) = make_benchmark(spec)
print("true spectral radius", round(truth.to_model().spectral_radius(), 4))

# %% Train both models for a few hundred epochs (batch of one trajectory).
config = TrainConfig(max_epochs=300, batch_size=1, learning_rate=1e-2, seed=0)
results = {}
for name, flags in [("free A", {"stable_A": False}), ("stable A", {})]:
    model = StateSpaceModel(5, 3, 3, id_D=True, rng=np.random.default_rng(0), **flags)
    res = fit(model, train, val, test, config)
    results[name] = float(np.mean(multistep_mse(model, test)))
    print(f"{name:9s} best epoch {res.best_epoch:4d}  test MSE {results[name]:.4f}  "
          f"radius {model.spectral_radius():.4f}")

# %% Normalized MSE is relative to the best method on each system.
table = build_comparison({"system 1": results})
print()
print(table.to_csv())
