import numpy as np
import pytest

from stable_sysid.autodiff import spectral_radius_value
from stable_sysid.errors import ContractError
from stable_sysid.model import predict
from stable_sysid.synth import (
    GeneratorSpec,
    LinearSystem,
    gbn_input,
    generate_dataset,
    make_benchmark,
    random_stable_system,
    simulate_system,
    sparsify,
    stream,
)


def test_target_spectral_radius_is_hit():
    system = random_stable_system(GeneratorSpec(5, 3, 3, target_spectral_radius=0.9, seed=7))
    assert abs(spectral_radius_value(system.A) - 0.9) <= 1e-9
    assert abs(max(abs(np.linalg.eigvals(system.A))) - 0.9) <= 1e-9
    assert system.B.shape == (5, 3) and system.C.shape == (3, 5) and system.D.shape == (3, 3)


def test_same_seed_same_system():
    spec = GeneratorSpec(4, 2, 2, seed=11)
    a, b = random_stable_system(spec), random_stable_system(spec)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    c = random_stable_system(GeneratorSpec(4, 2, 2, seed=12))
    assert not np.array_equal(a.A, c.A)


def test_slow_system_stays_bounded():
    system = random_stable_system(GeneratorSpec(5, 3, 3, target_spectral_radius=0.99, seed=3))
    x = np.ones(5)
    peak = 0.0
    for _ in range(10_000):
        x = system.A @ x
        peak = max(peak, np.linalg.norm(x))
    assert np.isfinite(peak) and np.linalg.norm(x) < 1e-10 * max(peak, 1.0) + 1e-30


def test_no_feedthrough_option():
    system = random_stable_system(GeneratorSpec(3, 2, 2, feedthrough=False))
    assert not np.any(system.D)


@pytest.mark.parametrize("kwargs", [
    {"n": 0}, {"target_spectral_radius": 1.0}, {"sparsity_fraction": 1.0}, {"noise_std": -1.0},
    {"gbn_switch_prob": 0.0}, {"trajectory_length": 1}, {"seed": -1}, {"target_kind": "both"},
])
def test_spec_contract(kwargs):
    base = {"n": 2, "m": 1, "p": 1}
    with pytest.raises(ContractError):
        GeneratorSpec(**{**base, **kwargs})


# ---------------------------------------------------------------- sparsify


def test_sparsify_zero_fraction_is_identity():
    system = random_stable_system(GeneratorSpec(4, 2, 3, seed=1))
    out = sparsify(system, 0.0, seed=1)
    for a, b in zip(system, out):
        assert np.array_equal(a, b)


def test_sparsify_zero_counts():
    system = random_stable_system(GeneratorSpec(7, 6, 5, seed=0))
    out = sparsify(system, 0.6, seed=0)
    assert int(np.sum(out.A == 0)) == 29
    assert int(np.sum(out.B == 0)) == int(np.floor(0.6 * 42 + 0.5))
    assert int(np.sum(out.C == 0)) == 21
    assert int(np.sum(out.D == 0)) == 18
    # untouched entries keep their values
    keep = out.A != 0
    assert np.array_equal(out.A[keep], system.A[keep])


def test_sparsify_counts_existing_zeros_as_eligible():
    system = LinearSystem(np.diag([0.5, 0.0, 0.0]), np.ones((3, 1)), np.ones((1, 3)), np.zeros((1, 1)))
    out = sparsify(system, 0.5, seed=4)
    assert int(np.sum(out.A == 0)) >= 5


def test_sparsified_systems_stay_stable():
    for seed in range(100):
        spec = GeneratorSpec(7, 6, 5, target_spectral_radius=0.9, sparsity_fraction=0.6, seed=seed)
        system, _ = make_benchmark(spec)
        assert spectral_radius_value(system.A) < 1.0


def test_sparsify_fallback_rescales():
    # removing one entry of 3 * ones leaves a triangular matrix with eigenvalue 3
    system = LinearSystem(np.full((2, 2), 3.0), np.ones((2, 1)), np.ones((1, 2)), np.zeros((1, 1)))
    with pytest.warns(UserWarning, match="rescaling"):
        out = sparsify(system, 0.25, seed=0, max_attempts=5)
    assert spectral_radius_value(out.A) == pytest.approx(0.99, abs=1e-12)
    assert int(np.sum(out.A == 0)) == 1


def test_sparsify_minimum_radius():
    system = random_stable_system(GeneratorSpec(7, 6, 5, seed=2))
    out = sparsify(system, 0.6, seed=2, min_spectral_radius=0.3)
    assert 0.3 < spectral_radius_value(out.A) < 1.0


def test_sparsify_rejects_bad_fraction():
    system = random_stable_system(GeneratorSpec(2, 1, 1))
    with pytest.raises(ContractError):
        sparsify(system, 1.0, seed=0)


# ---------------------------------------------------------------- GBN


def test_gbn_values_and_determinism():
    u = gbn_input(500, 3, 0.1, seed=5)
    assert u.shape == (500, 3)
    assert set(np.unique(u)) <= {-1.0, 1.0}
    assert np.array_equal(u, gbn_input(500, 3, 0.1, seed=5))
    assert not np.array_equal(u, gbn_input(500, 3, 0.1, seed=6))


def test_gbn_flip_count_follows_binomial():
    inside = 0
    for seed in range(100):
        u = gbn_input(10_000, 1, 0.1, seed=seed)
        flips = int(np.sum(u[1:] != u[:-1]))
        inside += 900 <= flips <= 1100
    assert inside >= 95


def test_gbn_start_is_equiprobable():
    starts = np.array([gbn_input(2, 1, 0.1, seed=s)[0, 0] for s in range(2000)])
    assert abs(np.mean(starts == 1.0) - 0.5) < 0.05


# ---------------------------------------------------------------- datasets


def test_noise_free_training_targets_are_exact():
    spec = GeneratorSpec(3, 2, 2, seed=8, trajectory_length=50)
    system = random_stable_system(spec)
    train, val, test = generate_dataset(system, spec)
    t = train[0]
    _, Y = simulate_system(system, t.inputs)
    assert np.array_equal(t.targets, Y)
    assert np.allclose(predict(system.to_model(), t.inputs), Y, rtol=1e-12, atol=1e-12)


def test_training_noise_std():
    spec = GeneratorSpec(5, 3, 3, noise_std=0.5, seed=9)
    system = random_stable_system(spec)
    train, val, test = generate_dataset(system, spec)
    t = train[0]
    _, clean = simulate_system(system, t.inputs)
    resid = t.targets - clean
    assert resid.size == 300 * 3
    assert abs(resid.std() - 0.5) <= 0.05
    # validation and test stay clean
    for s in (val[0], test[0]):
        assert np.array_equal(s.targets, simulate_system(system, s.inputs)[1])


def test_splits_have_distinct_inputs():
    spec = GeneratorSpec(3, 2, 2, seed=10, train_trajectories=2)
    train, val, test = generate_dataset(random_stable_system(spec), spec)
    assert train.ids == ["train0", "train1"] and val.ids == ["val0"] and test.ids == ["test0"]
    inputs = [train[0].inputs, train[1].inputs, val[0].inputs, test[0].inputs]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(inputs[i], inputs[j])


def test_state_datasets_hold_states():
    spec = GeneratorSpec(3, 2, 2, seed=11, target_kind="state", trajectory_length=20)
    system = random_stable_system(spec)
    train, _, _ = generate_dataset(system, spec)
    assert train.target_kind == "state" and train.q == 3
    assert np.array_equal(train[0].targets[0], np.zeros(3))


def test_benchmark_is_deterministic():
    spec = GeneratorSpec(4, 2, 2, seed=12, sparsity_fraction=0.5, noise_std=0.1, trajectory_length=30)
    (s1, d1), (s2, d2) = make_benchmark(spec), make_benchmark(spec)
    for a, b in zip(s1, s2):
        assert np.array_equal(a, b)
    for x, y in zip(d1, d2):
        assert np.array_equal(x[0].targets, y[0].targets)


def test_streams_are_independent():
    a = stream(5, 0).random(8)
    assert np.array_equal(a, stream(5, 0).random(8))
    assert not np.array_equal(a, stream(5, 1).random(8))
    assert not np.array_equal(a, stream(6, 0).random(8))


def test_system_masks():
    system = LinearSystem(np.array([[0.5, 0.0], [0.1, 0.0]]), np.ones((2, 1)), np.zeros((1, 2)), np.ones((1, 1)))
    masks = system.masks
    assert masks["A"].tolist() == [[1, 0], [1, 0]] and not masks["C"].any()
