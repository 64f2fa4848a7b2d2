import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geodesic_fields.policy import (
    FAR,
    NEAR,
    EvalRow,
    PairBucket,
    constrained_rollout,
    euclidean_method,
    euclidean_path,
    evaluate_table,
    make_buckets,
    nullspace_project,
    smooth_velocity,
    write_table,
)
from geodesic_fields.rfm import BacktrackError
from geodesic_fields.robots import PlanarArm, euclidean_metric_fields, forward_kinematics, jacobian, metric_fields

ARM = PlanarArm()
KIN = metric_fields(ARM, "kinetic")
vec = arrays(np.float64, 3, elements=st.floats(-5, 5))


def test_euclidean_path_examples():
    for n in (2, 7, 100):
        assert euclidean_path([0, 0], [3, 4], n).total_length == pytest.approx(5.0, rel=1e-14)
    assert euclidean_path([1, 1], [1, 1]).total_length == 0
    with pytest.raises(ValueError):
        euclidean_path([0, 0], [1, 1], 1)


def test_euclidean_path_refinement_on_kinetic_metric():
    rng = np.random.default_rng(0)
    for q_s, q_e in rng.uniform(-math.pi, math.pi, (10, 2, 2)):
        coarse = euclidean_path(q_s, q_e, 100, KIN[0]).total_length
        fine = euclidean_path(q_s, q_e, 1000, KIN[0]).total_length
        assert abs(fine - coarse) / fine < 0.005


def test_euclidean_path_accepts_either_role():
    a = euclidean_path([0, 0], [1, 2], 50, KIN[0]).total_length
    b = euclidean_path([0, 0], [1, 2], 50, KIN[1]).total_length
    assert a == b


# -- nullspace projection ----------------------------------------------------------------

def test_nullspace_example():
    assert np.allclose(nullspace_project([[1.0, 0.0]], [1.0, 1.0]), [0.0, 1.0], atol=1e-15)


def test_nullspace_leaves_null_vectors_unchanged():
    J = np.array([[1.0, 2.0, -1.0]])
    v = np.array([1.0, 0.0, 1.0])
    assert np.max(np.abs(nullspace_project(J, v) - v)) <= 1e-12


def test_nullspace_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m = int(rng.integers(1, 3))
        J = rng.normal(size=(m, 3))
        v = rng.normal(size=3)
        p = nullspace_project(J, v)
        assert np.max(np.abs(J @ p)) <= 1e-10
        assert np.max(np.abs(nullspace_project(J, p) - p)) <= 1e-12


@settings(max_examples=50)
@given(vec, vec)
def test_nullspace_idempotent(row, v):
    if np.linalg.norm(row) < 1e-3:
        return
    J = row[None]
    p = nullspace_project(J, v)
    assert np.max(np.abs(nullspace_project(J, p) - p)) <= 1e-12 * max(1.0, np.linalg.norm(v))


def test_nullspace_rank_deficient_uses_damping():
    J = np.array([[1.0, 0.0], [2.0, 0.0]])
    p = nullspace_project(J, [3.0, 4.0])
    assert np.allclose(p, [0.0, 4.0], atol=1e-6)


# -- smoothing ------------------------------------------------------------------------------

def test_smooth_velocity_examples():
    prev, new = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    assert np.array_equal(smooth_velocity(prev, new, 0.0, 10.0), new)
    assert np.array_equal(smooth_velocity(prev, new, 1.0, 10.0), prev)
    assert np.allclose(smooth_velocity(prev, new, 0.0, 1.0), [0.0, 1.0])
    with pytest.raises(ValueError):
        smooth_velocity(prev, new, 1.5, 1.0)
    with pytest.raises(ValueError):
        smooth_velocity(prev, new, 0.5, 0.0)


@given(vec, vec, st.floats(0, 1), st.floats(0.01, 10))
def test_smooth_velocity_norm_bound(prev, new, beta, cap):
    assert np.linalg.norm(smooth_velocity(prev, new, beta, cap)) <= cap * (1 + 1e-12)


# -- constrained motion ------------------------------------------------------------------------

def test_line_constraint_rollout_keeps_tip_height():
    # keep the end-effector's y coordinate while descending a quadratic bowl
    target = np.array([0.2, 1.4])
    start = np.array([0.9, 0.7])

    def flow(q):
        return q - target

    step = 0.005
    path = constrained_rollout(flow, lambda q: jacobian(ARM, q)[1:2], start, target, step=step, budget=400)
    y = forward_kinematics(ARM, path.points)[:, 1]
    assert len(path) > 10
    # Euler steps in the nullspace only drift at second order in the step
    assert np.max(np.abs(np.diff(y))) < 4 * step**2
    moved = forward_kinematics(ARM, path.points)[:, 0]
    assert abs(moved[-1] - moved[0]) > 20 * np.max(np.abs(y - y[0]))


# -- evaluation harness ------------------------------------------------------------------------

def test_bucket_invariants():
    near, far = make_buckets(0, 50)
    assert len(near) == len(far) == 50
    assert np.all(np.linalg.norm(near.pairs[:, 1] - near.pairs[:, 0], axis=1) < math.pi)
    assert np.all(np.linalg.norm(far.pairs[:, 1] - far.pairs[:, 0], axis=1) > 2 * math.pi)
    with pytest.raises(ValueError):
        PairBucket(NEAR, np.array([[[0.0, 0.0], [4.0, 0.0]]]))
    with pytest.raises(ValueError):
        PairBucket(FAR, np.array([[[0.0, 0.0], [1.0, 0.0]]]))


def test_buckets_deterministic():
    a, b = make_buckets(3, 20), make_buckets(3, 20)
    assert all(np.array_equal(x.pairs, y.pairs) for x, y in zip(a, b))


def test_repeated_pair_has_zero_std():
    pair = np.array([[0.1, 0.2], [1.0, -0.5]])
    rows = evaluate_table({"euclidean": euclidean_method()}, {"kinetic": KIN}, [PairBucket(NEAR, np.stack([pair] * 5))])
    assert rows[0].std == 0 and rows[0].count == 5


def test_euclidean_rows_far_exceed_near():
    rows = evaluate_table({"euclidean": euclidean_method()}, {"kinetic": KIN}, make_buckets(0, 30))
    by = {r.bucket: r for r in rows}
    assert by[FAR].mean > by[NEAR].mean


def test_failures_are_excluded_and_counted():
    calls = []

    def flaky(path_field, eik_field, q_s, q_e):
        calls.append(1)
        if len(calls) % 2:
            raise BacktrackError("stuck", None, "stagnation")
        return euclidean_path(q_s, q_e, 10, path_field)

    rows = evaluate_table({"flaky": flaky}, {"kinetic": KIN}, make_buckets(1, 10)[:1])
    assert rows[0].count == 5 and rows[0].failed == 5


def test_all_failed_bucket_raises():
    def broken(*args):
        raise BacktrackError("stuck", None, "stagnation")

    with pytest.raises(RuntimeError):
        evaluate_table({"broken": broken}, {"kinetic": KIN}, make_buckets(1, 3)[:1])


def test_per_metric_methods_and_table_export(tmp_path):
    ident = euclidean_metric_fields(2)
    methods = {"euclidean": euclidean_method(), "only_kin": {"kinetic": euclidean_method(), "identity": None}}
    rows = evaluate_table(methods, {"kinetic": KIN, "identity": ident}, make_buckets(2, 5))
    assert len(rows) == 2 * 2 + 2
    p1 = write_table(tmp_path / "a.csv", rows)
    p2 = write_table(tmp_path / "b.csv", evaluate_table(methods, {"kinetic": KIN, "identity": ident}, make_buckets(2, 5)))
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_text().splitlines()[1] == ",".join(EvalRow.COLUMNS)
