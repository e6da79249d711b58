import csv

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multipose import flow as fl
from multipose import quantizer as q
from multipose.regressor import HypothesisSet
from oracles import exhaustive_partition_energy


def line_poses(xs):
    """1-D values as single-joint poses (M, 1, 3)."""
    p = np.zeros((len(xs), 1, 3))
    p[:, 0, 0] = xs
    return p


def test_worked_1d_example():
    wp = q.WeightedPoses(line_poses([0, 1, 10]), np.array([0.45, 0.45, 0.10]))
    qs = q.quantize(wp, 2, seed=0)
    assert abs(qs.energy - 0.225) < 1e-12
    assert sorted(qs.centers[:, 0, 0].round(12)) == [0.5, 10.0]
    assert abs(exhaustive_partition_energy(wp.poses.reshape(3, -1), wp.weights, 2) - 0.225) < 1e-12


def test_n_equals_m_returns_poses(rng):
    wp = q.WeightedPoses(rng.normal(size=(6, 4, 3)), np.full(6, 1 / 6))
    qs = q.quantize(wp, 6)
    np.testing.assert_array_equal(qs.centers, wp.poses)
    assert qs.energy == 0.0


def test_single_center_is_weighted_mean(rng):
    pts = rng.normal(size=(9, 5, 3))
    w = q.normalize_log_weights(rng.normal(size=9))
    qs = q.quantize(q.WeightedPoses(pts, w), 1)
    mean = np.tensordot(w, pts, axes=1)
    np.testing.assert_allclose(qs.centers[0], mean, atol=1e-12)
    var = float(np.sum(w * np.sum((pts - mean).reshape(9, -1) ** 2, axis=1)))
    assert qs.energy == pytest.approx(var, rel=1e-12)


@pytest.mark.parametrize("n", [0, 7])
def test_n_out_of_range(rng, n):
    with pytest.raises(ValueError):
        q.quantize(q.WeightedPoses(rng.normal(size=(6, 2, 3)), np.full(6, 1 / 6)), n)


def test_weights_must_be_normalized():
    with pytest.raises(ValueError):
        q.WeightedPoses(np.zeros((2, 1, 3)), np.array([0.5, 0.6]))


@pytest.mark.parametrize("seed", range(20))
def test_lloyd_energy_monotone(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(10, 60))
    wp = q.WeightedPoses(rng.normal(size=(M, 17, 3)), q.normalize_log_weights(3 * rng.normal(size=M)))
    qs = q.quantize(wp, int(rng.integers(2, 8)), seed, record_trace=True)
    by_restart = {}
    for r, it, e in qs.trace:
        by_restart.setdefault(r, []).append((it, e))
    assert len(by_restart) == 10
    for seq in by_restart.values():
        es = [e for _, e in sorted(seq)]
        assert all(b <= a + 1e-12 for a, b in zip(es, es[1:]))


def test_final_state_consistent(rng):
    pts = rng.normal(size=(30, 17, 3))
    w = q.normalize_log_weights(rng.normal(size=30))
    qs = q.quantize(q.WeightedPoses(pts, w), 4, seed=3)
    flat = pts.reshape(30, -1)
    c = qs.centers.reshape(4, -1)
    d2 = ((flat[:, None] - c[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(qs.assignment, d2.argmin(1))
    assert qs.energy == pytest.approx(float((w * d2.min(1)).sum()), rel=1e-12)
    np.testing.assert_allclose(qs.cluster_weight, np.bincount(qs.assignment, weights=w, minlength=4))


def test_matches_exhaustive_optimum_on_small_sets():
    rng = np.random.default_rng(0)
    hits = 0
    for trial in range(100):
        M = int(rng.integers(3, 9))
        n = int(rng.integers(1, min(3, M) + 1))
        pts = rng.normal(size=(M, 2, 3))
        w = q.normalize_log_weights(rng.normal(size=M))
        e = q.quantize(q.WeightedPoses(pts, w), n, seed=trial).energy
        hits += abs(e - exhaustive_partition_energy(pts.reshape(M, -1), w, n)) < 1e-9
    assert hits >= 95


def test_empty_cluster_repair():
    pts = line_poses([0, 0, 0, 0, 5])
    qs = q.quantize(q.WeightedPoses(pts, np.full(5, 0.2)), 3, seed=0)
    assert np.all(np.isfinite(qs.centers))
    assert qs.energy == 0.0


def test_deterministic_given_seed(rng):
    wp = q.WeightedPoses(rng.normal(size=(40, 17, 3)), np.full(40, 1 / 40))
    a, b = q.quantize(wp, 5, seed=11), q.quantize(wp, 5, seed=11)
    assert a.centers.tobytes() == b.centers.tobytes() and a.energy == b.energy


def test_energy_non_increasing_in_n():
    rng = np.random.default_rng(5)
    sets = [(rng.normal(size=(25, 17, 3)), q.normalize_log_weights(rng.normal(size=25))) for _ in range(10)]
    means = [np.mean([q.quantize(q.WeightedPoses(p, w), n, seed=0).energy for p, w in sets])
             for n in (1, 2, 5, 10, 25)]
    assert all(b <= a for a, b in zip(means, means[1:]))


@given(st.lists(st.integers(-4000, 4000), min_size=5, max_size=12), st.integers(-50, 50))
def test_constant_density_factor_bit_identical(ints, c):
    # dyadic log-densities keep every shift exact, so the outputs must match bit for bit
    lp = np.array(ints, dtype=float) / 64.0
    M = lp.size
    pts = np.random.default_rng(M).normal(size=(M, 3, 3))
    w1, w2 = q.normalize_log_weights(lp), q.normalize_log_weights(lp + c)
    assert w1.tobytes() == w2.tobytes()
    a, b = q.quantize(q.WeightedPoses(pts, w1), 3), q.quantize(q.WeightedPoses(pts, w2), 3)
    assert a.centers.tobytes() == b.centers.tobytes()
    np.testing.assert_array_equal(a.assignment, b.assignment)


@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3))
def test_constant_density_factor_general(seed, c):
    rng = np.random.default_rng(seed)
    lp = 5 * rng.normal(size=10)
    pts = rng.normal(size=(10, 3, 3))
    w1, w2 = q.normalize_log_weights(lp), q.normalize_log_weights(lp + c)
    np.testing.assert_allclose(w1, w2, rtol=1e-12, atol=1e-300)
    a, b = q.quantize(q.WeightedPoses(pts, w1), 3), q.quantize(q.WeightedPoses(pts / 1.0, w2), 3)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    np.testing.assert_allclose(a.centers, b.centers, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_weights_match_high_precision(seed):
    lp = np.random.default_rng(seed).normal(size=12) * 200
    mpmath.mp.dps = 60
    e = [mpmath.exp(mpmath.mpf(float(v))) for v in lp]
    s = mpmath.fsum(e)
    ref = np.array([float(x / s) for x in e])
    assert np.abs(q.normalize_log_weights(lp) - ref).max() < 1e-10


def test_weigh_with_identity_flow(rng):
    flow = fl.init_flow(48, 2, 8)
    same = np.repeat(rng.normal(size=(1, 17, 3)), 4, axis=0)
    np.testing.assert_allclose(q.weigh(same, flow).weights, 0.25, rtol=1e-14)
    far = np.zeros((2, 17, 3))
    far[1, 1:] = 3.0
    wp = q.weigh(far + 7.0, flow)  # translation is removed before evaluation
    assert wp.weights[0] > 1 - 1e-12
    assert wp.log_prior is not None and wp.log_prior[0] > wp.log_prior[1]
    np.testing.assert_array_equal(q.weigh(far, flow, uniform=True).weights, [0.5, 0.5])


def test_temperature_flattens_weights():
    lp = np.array([0.0, -2.0, -4.0])
    w1, w3 = q.normalize_log_weights(lp), q.normalize_log_weights(lp, 3.0)
    assert w3.max() < w1.max()


def test_order_by_weight():
    qs = q.QuantizedSet(np.zeros((3, 1, 3)), np.zeros(5, int), 0.0, np.array([0.2, 0.5, 0.3]))
    np.testing.assert_array_equal(q.order_by_weight(qs), [1, 2, 0])


class FixedModel:
    def __init__(self, joints):
        self.joints = joints
        self.M = joints.shape[0]

    def predict(self, obs, M=None):
        return HypothesisSet(np.zeros((self.M, 1)), self.joints)


def test_n_best_of_m_endpoints(rng):
    J = rng.normal(size=(8, 17, 3)) * 0.1
    flow = fl.init_flow(48, 2, 8)
    model = FixedModel(J)
    one = q.n_best_of_m(None, model, flow, 8, 1)
    wp = q.weigh(J, flow)
    np.testing.assert_allclose(one[0], np.tensordot(wp.weights, wp.poses, axes=1), atol=1e-12)
    allm = q.n_best_of_m(None, model, flow, 8, 8)
    rel = J - J[:, :1]
    key = lambda a: sorted(map(tuple, a.reshape(8, -1).round(12)))
    assert key(allm) == key(rel)


def test_quantize_batch_matches_single(rng):
    J = rng.normal(size=(3, 12, 17, 3))
    flow = fl.init_flow(48, 2, 8)
    out = q.quantize_batch(J, flow, 4, seed=2)
    for i in range(3):
        qs = q.quantize(q.weigh(J[i], flow), 4, seed=2)
        np.testing.assert_array_equal(out[i], qs.centers[q.order_by_weight(qs)])


def test_write_trace(tmp_path, rng):
    qs = q.quantize(q.WeightedPoses(rng.normal(size=(10, 2, 3)), np.full(10, 0.1)), 3, record_trace=True)
    q.write_trace(tmp_path / "t.csv", qs)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["restart", "iteration", "energy"]
    assert len(rows) == len(qs.trace) + 1
