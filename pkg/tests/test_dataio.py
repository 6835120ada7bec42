import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rffslam.dataio import (
    Dataset,
    load_dataset,
    load_landmarks_csv,
    load_trajectory_csv,
    save_dataset,
    save_results,
    subsample_landmarks,
)
from rffslam.errors import InvalidArgument, ParseError, ValidationError
from rffslam.metrics import evaluate
from rffslam.observation import Landmark2D, Measurement, Trajectory
from rffslam.priors import OdometryControl

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
positive = st.floats(1e-6, 1e3)
angle = st.floats(-math.pi, math.pi).filter(lambda a: a > -math.pi)


@st.composite
def measurements(draw):
    kind = draw(st.sampled_from(["range", "bearing", "range_bearing"]))
    if kind == "range":
        value, sig = [draw(positive)], [draw(positive)]
    elif kind == "bearing":
        value, sig = [draw(angle)], [draw(positive)]
    else:
        value, sig = [draw(positive), draw(angle)], [draw(positive), draw(positive)]
    weight = draw(st.none() | st.floats(0, 10))
    return kind, draw(st.integers(0, 1000)), value, sig, weight


@st.composite
def datasets(draw):
    times = sorted(draw(st.lists(finite, max_size=15)))
    ms = [
        Measurement(t, lid, kind, value, np.diag(np.square(sig)), weight)
        for t, (kind, lid, value, sig, weight) in zip(times, draw(st.lists(measurements(), min_size=len(times), max_size=len(times))))
    ]
    gt = None
    if draw(st.booleans()):
        n = draw(st.integers(1, 10))
        t = sorted(draw(st.lists(finite, min_size=n, max_size=n)))
        gt = Trajectory(t, [[draw(finite), draw(finite), draw(angle)] for _ in range(n)])
    odo_t = sorted(draw(st.lists(finite, max_size=8)))
    odo = [OdometryControl(t, draw(finite), draw(finite)) for t in odo_t]
    lms = [Landmark2D(i, draw(finite), draw(finite)) for i in draw(st.lists(st.integers(0, 99), unique=True, max_size=5))]
    priors = {}
    for i in draw(st.lists(st.integers(0, 99), unique=True, max_size=4)):
        v = draw(positive)
        priors[i] = (np.array([draw(finite), draw(finite)]), np.array([[v, 0.1 * v], [0.1 * v, 2 * v]]))
    meta = draw(st.dictionaries(st.from_regex(r"[a-z_]{1,8}", fullmatch=True), st.from_regex(r"[a-z0-9.]{1,8}", fullmatch=True), max_size=3))
    return Dataset(ms, gt, odo, priors, lms, meta)


def assert_same(a: Dataset, b: Dataset):
    assert len(a.measurements) == len(b.measurements)
    for m, n in zip(a.measurements, b.measurements):
        assert (m.time, m.landmark_id, m.kind, m.weight) == (n.time, n.landmark_id, n.kind, n.weight)
        np.testing.assert_array_equal(m.value, n.value)
        np.testing.assert_array_equal(np.sqrt(np.diag(m.noise_cov)), np.sqrt(np.diag(n.noise_cov)))
    if a.ground_truth is None:
        assert b.ground_truth is None
    else:
        np.testing.assert_array_equal(a.ground_truth.times, b.ground_truth.times)
        np.testing.assert_array_equal(a.ground_truth.poses, b.ground_truth.poses)
    assert [(c.time, c.linear_velocity, c.angular_velocity) for c in a.odometry] == [
        (c.time, c.linear_velocity, c.angular_velocity) for c in b.odometry
    ]
    assert a.landmarks == b.landmarks
    assert sorted(a.landmark_priors) == sorted(b.landmark_priors)
    for k, (mean, cov) in a.landmark_priors.items():
        np.testing.assert_array_equal(mean, b.landmark_priors[k][0])
        np.testing.assert_array_equal(cov, b.landmark_priors[k][1])
    for k, v in a.metadata.items():
        assert b.metadata[k] == v


@settings(max_examples=100)
@given(ds=datasets())
def test_canonical_round_trip_is_exact(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("rt") / "data.txt"
    save_dataset(ds, path)
    assert_same(ds, load_dataset(path))


def test_three_measurements_sorted(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text(
        "# three records\n"
        "MEASUREMENT 0.5 1 range 3.0 0.1\n"
        "ODOMETRY 0.1 1.0 0.0\n"
        "MEASUREMENT 0.7 2 bearing 0.3 0.01\n"
        "MEASUREMENT 0.9 1 range_bearing 3.5 -0.2 0.1 0.01\n"
    )
    ds = load_dataset(path)
    assert [m.time for m in ds.measurements] == [0.5, 0.7, 0.9]
    assert ds.metadata["num_measurements"] == "3"
    assert ds.ground_truth is None


def test_parse_error_names_line(tmp_path):
    lines = [f"MEASUREMENT {k}.0 1 range 3.0 0.1" for k in range(10)]
    lines[6] = "MEASUREMENT 6.0 1 range abc 0.1"
    path = tmp_path / "bad.txt"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.line == 7
    assert "7" in str(info.value)


def test_lenient_loader_counts_every_row(tmp_path):
    path = tmp_path / "mixed.txt"
    path.write_text(
        "GROUNDTRUTH 0 0 0 0\n"
        "GROUNDTRUTH 1 1 0 0 9\n"
        "MEASUREMENT 0.5 1 range 3.0 0.1\n"
        "MEASUREMENT 0.6 1 range 3.0 -0.1\n"
        "BOGUS 1 2 3\n"
        "MEASUREMENT 0.7 1 bearing 0.1 0.1\n"
    )
    with pytest.raises(ParseError):
        load_dataset(path)
    ds = load_dataset(path, strict=False)
    parsed = len(ds.measurements) + len(ds.ground_truth)
    assert parsed + len(ds.malformed) == int(ds.metadata["rows_total"]) == 6
    assert [line for line, _ in ds.malformed] == [2, 4, 5]


def test_decreasing_timestamps_rejected(tmp_path):
    path = tmp_path / "order.txt"
    path.write_text("MEASUREMENT 1.0 1 range 3.0 0.1\nMEASUREMENT 0.5 1 range 3.0 0.1\n")
    with pytest.raises(ValidationError):
        load_dataset(path)


def test_empty_dataset_and_missing_sections(tmp_path):
    path = tmp_path / "empty.txt"
    save_dataset(Dataset(), path)
    ds = load_dataset(path)
    assert ds.measurements == [] and ds.ground_truth is None
    assert "GROUNDTRUTH" not in path.read_text()


def test_missing_file_and_bad_format(tmp_path):
    with pytest.raises(OSError):
        load_dataset(tmp_path / "nope.txt")
    with pytest.raises(InvalidArgument):
        load_dataset(tmp_path / "nope.txt", format="rosbag")


def test_correlated_noise_not_representable(tmp_path):
    m = Measurement(0.0, 1, "range_bearing", [1.0, 0.1], [[1.0, 0.1], [0.1, 1.0]])
    with pytest.raises(InvalidArgument):
        save_dataset(Dataset([m]), tmp_path / "x.txt")


def test_plaza_adapter(tmp_path):
    (tmp_path / "Plaza1_GT.txt").write_text("0 0 0\n1 1 0\n2 2 0\n")
    (tmp_path / "Plaza1_DR.txt").write_text("0 0 0\n1 1.0 0.0\n2 1.0 0.1\n")
    (tmp_path / "Plaza1_TD.txt").write_text("0.5 101 3.0\n1.5 0 102 4.0\n")
    (tmp_path / "Plaza1_TL.txt").write_text("101 3 0\n102 5 3\n")
    ds = load_dataset(tmp_path, "plaza", range_sigma=0.2)
    assert [m.landmark_id for m in ds.measurements] == [101, 102]
    assert ds.measurements[0].noise_cov[0, 0] == pytest.approx(0.04)
    assert [(c.linear_velocity, c.angular_velocity) for c in ds.odometry] == [(1.0, 0.0), (1.0, 0.1)]
    np.testing.assert_allclose(ds.ground_truth.headings, 0.0)
    assert len(ds.landmarks) == 2
    with pytest.raises(InvalidArgument):
        load_dataset(tmp_path, "plaza")


def test_bearing_csv_adapter(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("time,id,bearing,weight\n0.0,1,0.5,2.0\n0.1,2,-0.4,1.0\n0.2,x,0.1,1.0\n")
    with pytest.raises(ParseError) as info:
        load_dataset(path, "bearing_csv", bearing_sigma=0.01)
    assert info.value.line == 4
    ds = load_dataset(path, "bearing_csv", strict=False, bearing_sigma=0.01)
    assert len(ds.measurements) == 2 and len(ds.malformed) == 1
    assert ds.measurements[0].weight == 2.0


def test_landmark_subsampling_keeps_keyframe_minimum():
    rng = np.random.default_rng(0)
    ms = [
        Measurement(float(t), int(l), "bearing", [0.1], 0.01 * np.eye(1), float(rng.uniform(0.1, 1)))
        for t in range(5)
        for l in rng.choice(200, 20, replace=False)
    ]
    out = subsample_landmarks(Dataset(ms), target=60, min_per_keyframe=10)
    kept = {m.landmark_id for m in out.measurements}
    assert len(kept) == 60
    for t in range(5):
        assert sum(1 for m in out.measurements if m.time == t) >= 10
    with pytest.raises(InvalidArgument):
        subsample_landmarks(Dataset([Measurement(0.0, 1, "bearing", [0.1], np.eye(1))]), 1)


def test_save_results(tmp_path):
    t = np.arange(6) * 0.1
    traj = Trajectory(t, np.column_stack([t, 2 * t, 0 * t]))
    lms = [Landmark2D(3, 1.0, 2.0), Landmark2D(5, -1.0, 0.5)]
    report = evaluate(traj, traj)
    files = save_results(traj, lms, report, tmp_path / "out")
    again = load_trajectory_csv(files["trajectory"])
    np.testing.assert_array_equal(again.poses, traj.poses)
    assert load_landmarks_csv(files["landmarks"]) == lms
    metrics = json.loads(files["metrics"].read_text())
    assert {"ape_trans", "ape_rot", "rpe_trans", "rpe_rot"} <= set(metrics)
    assert len(metrics["ape_series"]["trans"]) == len(traj)
    assert set(save_results(traj, lms, None, tmp_path / "bare")) == {"trajectory", "landmarks"}
