import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stable_sysid.data import (
    SegmentationSpec,
    Trajectory,
    TrajectorySet,
    batches,
    fit_standardizer,
    load_csv,
    save_csv,
    segment,
    segment_count,
    standardize,
)
from stable_sysid.errors import ContractError, DimensionError, ParseError


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def csv_rows(tid, length, m, q):
    return "".join(f"{tid},{k}," + ",".join(["0.5"] * m + [str(k)] * q) + "\n" for k in range(length))


# ---------------------------------------------------------------- containers


def test_trajectory_rejects_missing_inputs():
    with pytest.raises(ContractError):
        Trajectory("a", [[np.nan]], [[1.0]])


def test_trajectory_rejects_row_mismatch():
    with pytest.raises(DimensionError):
        Trajectory("a", np.zeros((3, 1)), np.zeros((2, 1)))


def test_set_requires_shared_dimensions_and_unique_ids():
    a = Trajectory("a", np.zeros((3, 1)), np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        TrajectorySet([a, Trajectory("b", np.zeros((3, 2)), np.zeros((3, 2)))])
    with pytest.raises(ContractError):
        TrajectorySet([a, Trajectory("a", np.zeros((3, 1)), np.zeros((3, 2)))])
    with pytest.raises(ContractError):
        TrajectorySet([a], "velocity")


# ---------------------------------------------------------------- CSV


def test_load_two_trajectories(tmp_path):
    p = write(tmp_path / "d.csv", "traj_id,step,u_0,y_0,y_1\n" + csv_rows("a", 5, 1, 2) + csv_rows("b", 7, 1, 2))
    tset = load_csv(p)
    assert tset.lengths == [5, 7] and tset.ids == ["a", "b"]
    assert tset.target_kind == "output" and tset.m == 1 and tset.q == 2


def test_nan_target_is_missing(tmp_path):
    p = write(tmp_path / "d.csv", "traj_id,step,u_0,y_0,y_1\na,0,1.0,2.0,NaN\na,1,1.0,nan,3.0\n")
    t = load_csv(p)[0]
    assert math.isnan(t.targets[0, 1]) and math.isnan(t.targets[1, 0])
    assert t.targets[1, 1] == 3.0


def test_nan_input_is_a_parse_error_with_line(tmp_path):
    p = write(tmp_path / "d.csv", "traj_id,step,u_0,y_0\na,0,1.0,2.0\na,1,NaN,2.0\n")
    with pytest.raises(ParseError) as info:
        load_csv(p)
    assert info.value.line == 3
    assert "line 3" in str(info.value)


@pytest.mark.parametrize("header", [
    "id,step,u_0,y_0",
    "traj_id,step,u_0",
    "traj_id,step,u_0,z_0",
    "traj_id,step,u_0,y_1",
    "traj_id,step,u_0,y_0,x_1",
])
def test_malformed_header(tmp_path, header):
    p = write(tmp_path / "d.csv", header + "\n")
    with pytest.raises(ParseError) as info:
        load_csv(p)
    assert info.value.line == 1


def test_non_contiguous_steps(tmp_path):
    p = write(tmp_path / "d.csv", "traj_id,step,u_0,y_0\na,0,1,1\na,2,1,1\n")
    with pytest.raises(ParseError, match="contiguous"):
        load_csv(p)


def test_steps_not_starting_at_zero(tmp_path):
    p = write(tmp_path / "d.csv", "traj_id,step,u_0,y_0\na,1,1,1\n")
    with pytest.raises(ParseError):
        load_csv(p)


def test_rows_may_be_interleaved(tmp_path):
    p = write(tmp_path / "d.csv", "traj_id,step,u_0,x_0\na,1,1,11\nb,0,2,20\na,0,1,10\n")
    tset = load_csv(p)
    assert tset.target_kind == "state"
    assert tset[0].targets[:, 0].tolist() == [10.0, 11.0]


@pytest.mark.parametrize("row,line", [("a,0,1,abc", 2), ("a,x,1,1", 2), ("a,0,1", 2), ("a,0,1,inf", 2)])
def test_bad_cells(tmp_path, row, line):
    p = write(tmp_path / "d.csv", "traj_id,step,u_0,y_0\n" + row + "\n")
    with pytest.raises(ParseError) as info:
        load_csv(p)
    assert info.value.line == line


def test_expected_dimensions_are_checked(tmp_path):
    p = write(tmp_path / "d.csv", "traj_id,step,u_0,y_0\na,0,1,1\n")
    with pytest.raises(ParseError):
        load_csv(p, m=2)
    with pytest.raises(ParseError):
        load_csv(p, q=3)
    with pytest.raises(ParseError):
        load_csv(p, target_kind="state")


def test_empty_file(tmp_path):
    with pytest.raises(ParseError):
        load_csv(write(tmp_path / "d.csv", ""))


def test_parse_error_is_a_value_error(tmp_path):
    with pytest.raises(ValueError):
        load_csv(write(tmp_path / "d.csv", "bad\n"))


_finite = st.floats(allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.booleans()), min_size=1, max_size=4), st.integers(1, 3),
       st.integers(1, 3), st.sampled_from(["output", "state"]), st.data())
def test_csv_round_trip_is_bit_exact(tmp_path_factory, shapes, m, q, kind, data):
    trajs = []
    for s, (length, with_nan) in enumerate(shapes):
        u = data.draw(arrays(np.float64, (length, m), elements=_finite))
        y = data.draw(arrays(np.float64, (length, q), elements=_finite))
        if with_nan:
            y[0, 0] = np.nan
        trajs.append(Trajectory(f"t{s}", u, y))
    tset = TrajectorySet(trajs, kind)
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    save_csv(tset, path)
    back = load_csv(path)
    assert back.target_kind == kind and back.ids == tset.ids
    for a, b in zip(tset, back):
        assert np.array_equal(a.inputs.view(np.uint64), b.inputs.view(np.uint64))
        assert np.array_equal(np.isnan(a.targets), np.isnan(b.targets))
        fin = ~np.isnan(a.targets)
        assert np.array_equal(a.targets[fin].view(np.uint64), b.targets[fin].view(np.uint64))


# ---------------------------------------------------------------- segmentation


def state_set(lengths, n=2, m=1, seed=0):
    rng = np.random.default_rng(seed)
    return TrajectorySet([Trajectory(f"s{i}", rng.standard_normal((L, m)), rng.standard_normal((L, n)))
                          for i, L in enumerate(lengths)], "state")


def test_segment_count_examples():
    assert len(segment(state_set([400]), 10, 1)) == 391
    assert len(segment(state_set([10]), 10, 1)) == 1


def test_too_short_trajectory_warns():
    with pytest.warns(UserWarning, match="shorter"):
        assert len(segment(state_set([9]), 10, 1)) == 0


def test_segment_count_matches_enumeration():
    for length in range(1, 51):
        for horizon in range(2, 52):
            for stride in range(1, 12):
                brute = sum(1 for s in range(0, length) if s % stride == 0 and s + horizon <= length)
                assert segment_count(length, horizon, stride) == brute


def test_segments_carry_their_initial_state():
    tset = state_set([12])
    segs = segment(tset, 4, 3)
    t = tset[0]
    assert segs.ids == ["s0#0", "s0#1", "s0#2"]
    for j, s in enumerate(segs):
        assert np.array_equal(s.x0, t.targets[3 * j])
        assert np.array_equal(s.targets, t.targets[3 * j:3 * j + 4])
        assert np.array_equal(s.inputs, t.inputs[3 * j:3 * j + 4])


def test_segment_without_horizon_is_identity():
    tset = state_set([5])
    assert segment(tset, None) is tset


def test_output_sets_are_not_segmented():
    tset = TrajectorySet([Trajectory("a", np.zeros((5, 1)), np.zeros((5, 1)))], "output")
    with pytest.raises(ContractError):
        segment(tset, 3)


def test_segment_with_missing_initial_state_is_skipped():
    tset = state_set([6])
    tset[0].targets[2, 0] = np.nan
    with pytest.warns(UserWarning, match="skipped 1"):
        segs = segment(tset, 3, 1)
    assert segs.ids == ["s0#0", "s0#1", "s0#3"]


def test_segmentation_spec():
    with pytest.raises(ContractError):
        SegmentationSpec(horizon=1)
    with pytest.raises(ContractError):
        SegmentationSpec(stride=0)
    train, val = SegmentationSpec(horizon=5, stride=5, horizon_val=None).apply(state_set([20]), state_set([20]))
    assert len(train) == 4 and len(val) == 1


# ---------------------------------------------------------------- batches


def test_batch_sizes():
    tset = state_set([3] * 10)
    sizes = [len(b) for b in batches(tset, 4, np.random.default_rng(0))]
    assert sizes == [4, 4, 2]
    assert [len(b) for b in batches(tset, 50, np.random.default_rng(0))] == [10]


def test_batches_deterministic_per_seed():
    tset = state_set([3] * 10)

    def ids(seed):
        return [t.id for b in batches(tset, 3, np.random.default_rng(seed)) for t in b]

    assert ids(1) == ids(1)
    assert ids(1) != ids(2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_epoch_covers_the_set_exactly(n, bs, seed):
    tset = state_set([2] * n)
    got = sorted(t.id for b in batches(tset, bs, np.random.default_rng(seed)) for t in b)
    assert got == sorted(tset.ids)


def test_batch_size_must_be_positive():
    with pytest.raises(ContractError):
        list(batches(state_set([2]), 0, np.random.default_rng(0)))


# ---------------------------------------------------------------- standardization


def test_standardize_zero_mean_unit_std():
    rng = np.random.default_rng(3)
    tset = TrajectorySet([Trajectory(f"a{i}", 3 + 2 * rng.standard_normal((50, 2)), -1 + 5 * rng.standard_normal((50, 3)))
                          for i in range(3)])
    scaled, st_ = standardize(tset)
    u = np.concatenate([t.inputs for t in scaled])
    y = np.concatenate([t.targets for t in scaled])
    assert np.allclose(u.mean(0), 0, atol=1e-12) and np.allclose(u.std(0), 1, atol=1e-12)
    assert np.allclose(y.mean(0), 0, atol=1e-12) and np.allclose(y.std(0), 1, atol=1e-12)
    again, _ = standardize(scaled)
    assert np.allclose(np.concatenate([t.targets for t in again]), y, atol=1e-12)


def test_standardize_inverse_round_trip():
    rng = np.random.default_rng(4)
    tset = TrajectorySet([Trajectory("a", rng.standard_normal((20, 1)) * 7, rng.standard_normal((20, 2)) + 100)])
    scaled, st_ = standardize(tset)
    back = st_.inverse(scaled)
    assert np.allclose(back[0].inputs, tset[0].inputs, rtol=0, atol=1e-12)
    assert np.allclose(back[0].targets, tset[0].targets, rtol=0, atol=1e-12)


def test_constant_dimension_left_unscaled():
    u = np.column_stack([np.full(10, 4.0), np.arange(10.0)])
    tset = TrajectorySet([Trajectory("a", u, np.arange(10.0).reshape(-1, 1))])
    with pytest.warns(UserWarning, match="zero variance"):
        scaled, st_ = standardize(tset)
    assert np.array_equal(scaled[0].inputs[:, 0], u[:, 0])
    assert st_.input_std[0] == 1.0 and st_.input_mean[0] == 0.0


def test_standardize_ignores_missing_targets():
    y = np.array([[1.0], [np.nan], [3.0]])
    st_ = fit_standardizer(TrajectorySet([Trajectory("a", np.arange(3.0).reshape(-1, 1), y)]))
    assert st_.target_mean[0] == 2.0 and st_.target_std[0] == 1.0


def test_standardize_maps_segment_initial_states():
    segs = segment(state_set([10]), 5, 5)
    scaled, st_ = standardize(segs)
    for s in scaled:
        assert np.allclose(s.x0, s.targets[0])
