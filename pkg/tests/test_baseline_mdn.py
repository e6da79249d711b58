import mpmath
import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import GRAD_SEEDS
from multipose import baseline_mdn as bm
from multipose import data
from multipose import diffcore as dc
from multipose import kinematics as kin
from multipose import regressor as rg
from multipose.losses import LossWeights


@pytest.fixture(scope="module")
def small():
    return data.apply_ambiguity(data.generate(data.GenConfig(count=120, seed=2)), 3)


def test_single_component_returns_its_mean(rng):
    mix = bm.MixtureParams(rng.normal(size=(1, 6)))
    for _ in range(3):
        np.testing.assert_array_equal(bm.virtual_prediction(mix, rng.normal(size=6) * 100), mix.mu[0])


def test_posterior_collapses_onto_exact_mean(rng):
    mu = rng.normal(size=(4, 6)) * 5
    mix = bm.MixtureParams(mu, sigma=1e-6)
    for j in range(4):
        np.testing.assert_allclose(bm.virtual_prediction(mix, mu[j]), mu[j], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_virtual_prediction_high_precision(seed):
    rng = np.random.default_rng(seed)
    D, sigma = 5, 0.05
    mu = rng.normal(size=(3, D)) * 0.3
    x = rng.normal(size=D) * 0.3
    mpmath.mp.dps = 50
    dens = [mpmath.mpf(1) / 3 * (2 * mpmath.pi * sigma) ** (-mpmath.mpf(D) / 2)
            * mpmath.exp(-sum((mpmath.mpf(float(x[d])) - mpmath.mpf(float(m[d]))) ** 2 for d in range(D)) / (2 * sigma))
            for m in mu]
    tot = mpmath.fsum(dens)
    ref = [float(mpmath.fsum(dens[m] / tot * mpmath.mpf(float(mu[m, d])) for m in range(3))) for d in range(D)]
    assert np.abs(bm.virtual_prediction(bm.MixtureParams(mu, sigma), x) - ref).max() < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_virtual_prediction_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=(4, 3))
    xhat = bm.virtual_prediction(bm.MixtureParams(mu, 0.5), rng.normal(size=3) * 3)
    # feasibility LP: w >= 0, sum w = 1, mu^T w = xhat
    A = np.vstack([mu.T, np.ones(4)])
    res = linprog(np.zeros(4), A_eq=A, b_eq=np.r_[xhat, 1.0], bounds=[(0, None)] * 4)
    assert res.status == 0


def test_constant_density_factor_is_irrelevant(rng, monkeypatch):
    mix = bm.MixtureParams(rng.normal(size=(5, 4)), 0.1)
    x = rng.normal(size=4)
    base = bm.virtual_prediction(mix, x)
    orig = bm.log_components
    monkeypatch.setattr(bm, "log_components", lambda m, v: orig(m, v) + 512.0)
    np.testing.assert_allclose(bm.virtual_prediction(mix, x), base, rtol=1e-13, atol=1e-15)


def test_mixture_validation():
    with pytest.raises(ValueError):
        bm.MixtureParams(np.zeros((2, 3)), sigma=0.0)
    with pytest.raises(ValueError):
        bm.MixtureParams(np.zeros((2, 3)), alpha=np.array([0.7, 0.7]))


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_nll_and_virtual_gradients_fd(seed):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=(2, 3, 4)) * 0.2
    x = rng.normal(size=(2, 4)) * 0.2
    g = rng.normal(size=(2, 4))
    _, dmu = bm.mixture_nll(bm.MixtureParams(mu, 0.05), x)
    num = dc.numeric_grad(lambda: float(bm.mixture_nll(bm.MixtureParams(mu, 0.05), x)[0].sum()), mu)
    assert dc.rel_error(dmu, num) < 1e-6
    ana = bm.virtual_backward(bm.MixtureParams(mu, 0.05), x, g)
    num = dc.numeric_grad(lambda: float(np.sum(g * bm.virtual_prediction(bm.MixtureParams(mu, 0.05), x))), mu)
    assert dc.rel_error(ana, num) < 1e-6


def tiny_mdn(ds, seed, M=2, sigma=1e-3):
    cfg = bm.MDNConfig(M=M, hidden=(4,), seed=seed, head_init_std=0.05, sigma=sigma)
    return bm.init_mdn(cfg, 3 * 17 + 3, rg.mean_params(ds), kin.default_skeleton(), kin.Camera()), cfg


def objective(model, ds, idx, weights, need_grad=True):
    (mu, lb, t), tape = model.forward(rg.observation_features(ds.keypoints[idx], ds.vis[idx], ds.context[idx]))
    return bm.mdn_objective(model, mu, lb, t, rg.ground_truth(ds, idx), weights, 1.0, need_grad), tape


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_full_objective_trunk_gradient_fd(small, seed):
    model, _ = tiny_mdn(small, seed)
    idx = np.arange(seed, seed + 2)
    w = LossWeights()
    r, tape = objective(model, small, idx, w)
    up = np.concatenate([r.grad_mu.reshape(2, -1), r.grad_log_beta, r.grad_t], axis=1)
    grads = dc.flatten_grads(dc.mlp_backward(tape, up)[0])
    f = lambda: objective(model, small, idx, w, need_grad=False)[0].total
    for g, p in zip(grads, model.params()):
        assert dc.rel_error(g, dc.numeric_grad(f, p)) < 1e-4


def test_choose_modes():
    assert sorted(bm.choose_modes(6, 6, seed=0)) == list(range(6))
    a = bm.choose_modes(6, 1, seed=3, index=7)
    assert a.shape == (1,) and np.array_equal(a, bm.choose_modes(6, 1, seed=3, index=7))
    with pytest.raises(ValueError):
        bm.choose_modes(6, 7, seed=0)
    counts = np.bincount([bm.choose_modes(5, 1, 11, i)[0] for i in range(10_000)], minlength=5)
    assert np.abs(counts / 10_000 - 0.2).max() < 0.02


def test_mdn_hypotheses_are_mode_poses(small):
    model, _ = tiny_mdn(small, 0, M=4)
    obs = small.record(0).obs
    poses = bm.mdn_hypotheses(model, obs, 4, seed=1)
    full = model.predict(obs).joints
    assert sorted(map(lambda p: p.tobytes(), poses)) == sorted(map(lambda p: p.tobytes(), full))


def constant_input_fit(X, M, steps, lr, record=False):
    """NLL-only fit of mixture means on a constant observation; returns the means (and NLL trace)."""
    mu = X[0] + np.random.default_rng(0).normal(0, 1e-2, size=(M, X.shape[1]))
    adam = dc.AdamState.for_params([mu], lr=lr)
    trace = []
    for _ in range(steps):
        mix = bm.MixtureParams(np.broadcast_to(mu, (X.shape[0],) + mu.shape), 1e-3)
        nll, dmu = bm.mixture_nll(mix, X)
        trace.append(float(nll.mean()))
        (mu,) = dc.adam_step(adam, [mu], [dmu.sum(0) / X.shape[0]])
    return (mu, trace) if record else mu


def test_single_cluster_mean_recovered():
    ds = data.generate(data.GenConfig(count=400, seed=4, two_mode_fraction=0.0))
    sel = ds.cluster == ds.cluster[0]
    X = np.concatenate([ds.theta[sel], ds.gamma[sel]], axis=1)
    mu = constant_input_fit(X, 1, 2000, 1e-2)
    se = X.std(0, ddof=1) / np.sqrt(X.shape[0])
    assert np.all(np.abs(mu[0] - X.mean(0)) <= 3 * se + 1e-9)


def test_nll_only_full_batch_monotone():
    X = np.random.default_rng(1).normal(0.5, 0.1, size=(50, 6))
    _, trace = constant_input_fit(X, 3, 200, 1e-3, record=True)
    assert all(b <= a + 1e-9 * abs(a) for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_training_deterministic_and_round_trip(small, tmp_path):
    cfg = bm.MDNConfig(M=3, hidden=(8,), epochs=2, seed=4)
    a, b = bm.train_mdn(small, cfg), bm.train_mdn(small, cfg)
    for pa, pb in zip(a.model.params(), b.model.params()):
        assert pa.tobytes() == pb.tobytes()
    bm.save_mdn(tmp_path / "a.ckpt", a, cfg)
    back, cfg2 = bm.load_mdn(tmp_path / "a.ckpt")
    bm.save_mdn(tmp_path / "b.ckpt", back, cfg2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.model.predict_dataset(small)[0].tobytes() == a.model.predict_dataset(small)[0].tobytes()


def test_resume_matches_uninterrupted(small):
    cfg = bm.MDNConfig(M=2, hidden=(8,), epochs=3, seed=1)
    straight = bm.train_mdn(small, cfg)
    resumed = bm.train_mdn(small, cfg, resume=bm.train_mdn(small, cfg, stop_epoch=1))
    for pa, pb in zip(straight.model.params(), resumed.model.params()):
        assert pa.tobytes() == pb.tobytes()


def test_hypothesis_sets_shapes(small):
    model, _ = tiny_mdn(small, 0, M=5)
    sets = model.hypothesis_sets(small.subset(np.arange(7)), (1, 5), seed=2)
    assert sets[1].shape == (7, 1, 17, 3) and sets[5].shape == (7, 5, 17, 3)
