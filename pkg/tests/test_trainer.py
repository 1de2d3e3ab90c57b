import numpy as np
import pytest

import stable_sysid.trainer as trainer
from stable_sysid.autodiff import Parameter, spectral_radius_value
from stable_sysid.data import Trajectory, TrajectorySet
from stable_sysid.errors import ContractError, NumericalError
from stable_sysid.model import LossSpec, StateSpaceModel, evaluate
from stable_sysid.schur import StableAParametrization
from stable_sysid.synth import GeneratorSpec, gbn_input, make_benchmark, simulate_system
from stable_sysid.trainer import (
    AdamState,
    TrainConfig,
    adaptive_moment_step,
    clip,
    fit,
    history_csv,
    initialize_A,
    ls_initialize,
    project_A_to_parametrization,
    timings_csv,
)


def state_set(A, B, length, seed=0, k=1, prefix="s"):
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    trajs = []
    for i in range(k):
        u = gbn_input(length, B.shape[1], 0.1, seed=seed + i)
        x = np.zeros((length + 1, A.shape[0]))
        for t in range(length):
            x[t + 1] = A @ x[t] + B @ u[t]
        trajs.append(Trajectory(f"{prefix}{i}", np.vstack([u, np.zeros((1, B.shape[1]))]), x))
    return TrajectorySet(trajs, "state")


def small_benchmark(seed=0, noise=0.1):
    spec = GeneratorSpec(3, 2, 2, noise_std=noise, trajectory_length=60, train_trajectories=4, seed=seed)
    return make_benchmark(spec)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [{"max_epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0},
                                {"init_learning_rate": -1.0}, {"grad_clip": 0.0}, {"init_grad_clip": 0.0},
                                {"init_loss": "huber"}, {"patience": 0}])
def test_config_contract(kw):
    with pytest.raises(ContractError):
        TrainConfig(**kw)


def test_config_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.init_learning_rate, c.grad_clip, c.init_grad_clip) == (1e-3, 1e-3, 100.0, 0.1)
    assert c.patience is None


# ---------------------------------------------------------------- optimizer


def test_first_step_is_lr_sized():
    p = Parameter(np.zeros((1, 1)))
    adaptive_moment_step([p], [np.ones((1, 1))], AdamState(), 1e-3)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + 1e-8)
    assert p.value[0, 0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_zero_gradient_is_a_fixed_point():
    p = Parameter(np.array([[1.5, -2.0]]))
    state = AdamState()
    for _ in range(10):
        adaptive_moment_step([p], [np.zeros((1, 2))], state, 0.1)
    assert np.array_equal(p.value, [[1.5, -2.0]])


def test_constant_gradient_step_tends_to_lr_sign():
    p = Parameter(np.zeros((1, 2)))
    state = AdamState()
    g = np.array([[3.0, -0.2]])
    prev = p.value.copy()
    for _ in range(500):
        adaptive_moment_step([p], [g], state, 1e-2)
        step = p.value - prev
        prev = p.value.copy()
    assert np.allclose(step, -1e-2 * np.sign(g), rtol=1e-6)


def test_moments_match_hand_recursion():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 2, 2))
    p = Parameter(np.zeros((2, 2)))
    state = AdamState()
    m = v = np.zeros((2, 2))
    x = np.zeros((2, 2))
    for t, g in enumerate(grads, start=1):
        adaptive_moment_step([p], [g], state, 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g**2
        x = x - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.value, x, rtol=1e-14, atol=1e-16)


def test_optimizer_shape_mismatch():
    with pytest.raises(ContractError):
        adaptive_moment_step([Parameter(np.zeros((2, 2)))], [np.zeros((2, 1))], AdamState(), 1e-3)


def test_clip_saturates_elementwise():
    assert clip(np.array([-5.0, 0.05, 2.0]), 0.1).tolist() == [-0.1, 0.05, 0.1]


# ---------------------------------------------------------------- LS


def test_ls_recovers_noiseless_system():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((3, 3))
    A *= 0.8 / spectral_radius_value(A)
    B = rng.standard_normal((3, 2))
    A_hat, B_hat = ls_initialize(state_set(A, B, 300))
    assert np.max(np.abs(A_hat - A)) <= 1e-8 and np.max(np.abs(B_hat - B)) <= 1e-8


def test_ls_scalar_ratio():
    ts = TrajectorySet([Trajectory("a", np.zeros((2, 0)), [[1.0], [0.7]])], "state")
    A_hat, B_hat = ls_initialize(ts)
    assert A_hat[0, 0] == pytest.approx(0.7, abs=1e-15) and B_hat.shape == (1, 0)


def test_ls_zero_states_warn():
    ts = TrajectorySet([Trajectory("a", np.zeros((5, 0)), np.zeros((5, 2)))], "state")
    with pytest.warns(UserWarning, match="rank deficient"):
        A_hat, _ = ls_initialize(ts)
    assert np.array_equal(A_hat, np.zeros((2, 2)))


def test_ls_skips_missing_states():
    ts = state_set([[0.6]], [[1.0]], 50)
    x = ts[0].targets.copy()
    x[20] = 1e6  # a corrupted sample ...
    bad = TrajectorySet([Trajectory("a", ts[0].inputs, x.copy())], "state")
    x[20] = np.nan  # ... is harmless once marked missing
    gap = TrajectorySet([Trajectory("a", ts[0].inputs, x)], "state")
    assert abs(ls_initialize(bad)[0][0, 0] - 0.6) > 1e-3
    assert ls_initialize(gap)[0][0, 0] == pytest.approx(0.6, abs=1e-12)


def test_ls_requires_states_and_enough_transitions():
    out = TrajectorySet([Trajectory("a", np.zeros((5, 1)), np.zeros((5, 1)))], "output")
    with pytest.raises(ContractError):
        ls_initialize(out)
    short = TrajectorySet([Trajectory("a", np.zeros((2, 1)), np.ones((2, 2)))], "state")
    with pytest.raises(ContractError):
        ls_initialize(short)


# ---------------------------------------------------------------- projection


def test_scaled_projection_is_exact():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((4, 4))
    A *= 0.9 / spectral_radius_value(A)
    tpl = StableAParametrization("scaled", 4, rng=rng)
    res = project_A_to_parametrization(A, tpl)
    assert res.exact and res.steps == 0
    assert np.max(np.abs(res.parametrization.matrix() - A)) <= 1e-12


def test_generic_projection_of_diagonal():
    tpl = StableAParametrization("generic", 2, rng=np.random.default_rng(0))
    res = project_A_to_parametrization(np.diag([0.5, 0.3]), tpl, TrainConfig(init_epochs=150_000))
    A = res.parametrization.matrix()
    assert np.linalg.norm(A - np.diag([0.5, 0.3])) / np.linalg.norm(np.diag([0.5, 0.3])) <= 1e-3
    assert res.relative_error <= 1e-3


@pytest.mark.parametrize("mode", ["generic", "near_identity"])
def test_projection_of_exterior_target_stays_stable(mode):
    target = np.array([[1.5, 0.2], [0.0, 0.3]])
    tpl = StableAParametrization(mode, 2, delta=0.1 if mode == "near_identity" else None,
                                 rng=np.random.default_rng(0))
    res = project_A_to_parametrization(target, tpl, TrainConfig(init_epochs=300))
    A = res.parametrization.matrix()
    assert spectral_radius_value(A) < 1.0
    assert 0 < res.relative_error < 1.0 and not res.exact
    assert res.relative_error == pytest.approx(np.linalg.norm(A - target) / np.linalg.norm(target), rel=1e-12)


def test_projection_returns_best_iterate():
    # no constructive start exists for sparse LMI, so GD runs the full budget
    tpl = StableAParametrization("sparse_lmi", 3, mask=np.eye(3), rng=np.random.default_rng(3))
    target = np.diag([0.4, -0.2, 0.1])
    start = np.linalg.norm(tpl.matrix() - target) / np.linalg.norm(target)
    res = project_A_to_parametrization(target, tpl, TrainConfig(init_epochs=200, init_learning_rate=1e-2))
    assert res.relative_error < start and res.steps == 200


def test_projection_shape_contract():
    with pytest.raises(ContractError):
        project_A_to_parametrization(np.eye(3), StableAParametrization("generic", 2))


def test_initialize_free_A():
    model = StateSpaceModel(2, 1, 1, stable_A=False, rng=np.random.default_rng(0))
    err = initialize_A(model, np.diag([2.0, 0.1]), TrainConfig())
    assert err == 0.0 and np.array_equal(model.effective()["A"], np.diag([2.0, 0.1]))


# ---------------------------------------------------------------- fit


def test_scalar_system_is_recovered():
    ts = state_set([[0.5]], [[1.0]], 100)
    model = StateSpaceModel(1, 1, input_output=False, stable_A=False, A=[[0.0]], B=[[0.0]],
                            rng=np.random.default_rng(0))
    res = fit(model, ts, config=TrainConfig(max_epochs=2000, batch_size=1, learning_rate=1e-2))
    A_ls, _ = ls_initialize(ts)
    assert abs(res.matrices["A"][0, 0] - 0.5) <= 1e-3
    assert abs(A_ls[0, 0] - 0.5) <= 1e-12


def test_single_epoch_history(monkeypatch):
    system, (train, val, test) = small_benchmark()
    calls = []
    real = trainer.adaptive_moment_step
    monkeypatch.setattr(trainer, "adaptive_moment_step", lambda *a: calls.append(1) or real(*a))
    model = StateSpaceModel(3, 2, 2, id_D=True, rng=np.random.default_rng(0))
    res = fit(model, train, val, test, TrainConfig(max_epochs=1, batch_size=len(train)))
    assert len(res.history) == 1 and len(calls) == 1
    assert res.best_epoch == 1 and res.test_loss is not None


def test_fit_is_deterministic():
    system, (train, val, test) = small_benchmark(seed=4)

    def run():
        model = StateSpaceModel(3, 2, 2, id_D=True, rng=np.random.default_rng(5))
        cfg = TrainConfig(max_epochs=5, batch_size=2, learning_rate=1e-2, seed=3,
                          train_loss=LossSpec(dropout_p=0.3))
        return fit(model, train, val, test, cfg)

    a, b = run(), run()
    assert history_csv(a) == history_csv(b)
    for k in ("A", "B", "C", "D"):
        assert np.array_equal(a.matrices[k], b.matrices[k])
    assert a.test_loss == b.test_loss


@pytest.mark.parametrize("flags", [{}, {"delta": 0.1}, {"naive_A": True},
                                   {"mask_A": np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1]])}])
def test_stability_holds_after_every_step(monkeypatch, flags):
    system, (train, val, test) = small_benchmark(seed=6, noise=0.5)
    model = StateSpaceModel(3, 2, 2, id_D=True, rng=np.random.default_rng(1), **flags)
    radii = []
    real = trainer.adaptive_moment_step

    def step(*a):
        out = real(*a)
        radii.append(model.spectral_radius())
        return out

    monkeypatch.setattr(trainer, "adaptive_moment_step", step)
    fit(model, train, val, None, TrainConfig(max_epochs=10, batch_size=1, learning_rate=0.05))
    assert len(radii) == 40 and max(radii) < model.bound


def test_no_gradient_exceeds_the_clip(monkeypatch):
    system, (train, val, test) = small_benchmark(seed=7)
    seen = []
    real = trainer.adaptive_moment_step
    monkeypatch.setattr(trainer, "adaptive_moment_step",
                        lambda params, grads, *a: seen.append(max(np.abs(g).max() for g in grads))
                        or real(params, grads, *a))
    model = StateSpaceModel(3, 2, 2, id_D=True, stable_A=False, rng=np.random.default_rng(0), init_std=3.0)
    fit(model, train, val, None, TrainConfig(max_epochs=3, batch_size=4, grad_clip=0.01))
    assert max(seen) <= 0.01 and max(seen) == 0.01


def test_snapshot_reproduces_best_validation_loss():
    system, (train, val, test) = small_benchmark(seed=8)
    model = StateSpaceModel(3, 2, 2, id_D=True, rng=np.random.default_rng(2))
    res = fit(model, train, val, test, TrainConfig(max_epochs=15, batch_size=2, learning_rate=3e-2))
    _, again = evaluate(res.model, val)
    assert again == res.best_val_loss
    vals = [h["val_loss"] for h in res.history]
    assert res.best_val_loss == min(vals) and vals[res.best_epoch - 1] == res.best_val_loss
    assert vals.index(min(vals)) == res.best_epoch - 1  # strict improvement keeps the first minimum
    best_so_far = np.minimum.accumulate(vals)
    assert np.all(np.diff(best_so_far) <= 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    ts = state_set([[0.5]], [[1.0]], 100)
    model = StateSpaceModel(1, 1, input_output=False, stable_A=False, A=[[1e10]], B=[[1.0]],
                            rng=np.random.default_rng(0))
    with pytest.raises(NumericalError, match="epoch 1, batch 0"):
        fit(model, ts, config=TrainConfig(max_epochs=1))


def test_target_kind_mismatch():
    ts = state_set([[0.5]], [[1.0]], 10)
    with pytest.raises(ContractError):
        fit(StateSpaceModel(1, 1, 1, rng=np.random.default_rng(0)), ts)


def test_ls_initialization_in_fit():
    rng = np.random.default_rng(9)
    A = rng.standard_normal((3, 3))
    A *= 0.7 / spectral_radius_value(A)
    B = rng.standard_normal((3, 2))
    train, val = state_set(A, B, 200, seed=0), state_set(A, B, 200, seed=50, prefix="v")
    model = StateSpaceModel(3, 2, input_output=False, rng=np.random.default_rng(0))
    res = fit(model, train, val, config=TrainConfig(max_epochs=1, init_from_ls=True, horizon=10,
                                                   learning_rate=1e-9, init_epochs=10))
    assert res.init_error < 1e-6
    assert np.allclose(res.matrices["A"], A, atol=1e-5)


def test_patience_stops_early():
    system, (train, val, test) = small_benchmark(seed=10)
    # nothing is trainable, so validation never strictly improves after epoch 1
    model = StateSpaceModel(3, 2, 2, rng=np.random.default_rng(0), learn_A=False, learn_B=False, learn_C=False)
    res = fit(model, train, val, config=TrainConfig(max_epochs=200, patience=2))
    assert len(res.history) == 3 and res.best_epoch == 1


def test_history_and_timings_csv():
    system, (train, val, test) = small_benchmark(seed=11)
    model = StateSpaceModel(3, 2, 2, rng=np.random.default_rng(0))
    res = fit(model, train, val, config=TrainConfig(max_epochs=3))
    lines = history_csv(res).splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 4
    rows = timings_csv(res).splitlines()
    assert rows[0].endswith(",wall_time_s")
    times = [float(r.split(",")[-1]) for r in rows[1:]]
    assert times == sorted(times) and res.best_time_s == pytest.approx(times[res.best_epoch - 1], abs=1e-6)
