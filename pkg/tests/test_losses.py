from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import GRAD_SEEDS, random_params
from multipose import diffcore as dc
from multipose import kinematics as kin
from multipose import losses as L
from multipose.errors import NonFiniteError


def batch(seed, skel, n=3, M=4, hidden_frac=0.3):
    rng = np.random.default_rng(seed)
    th, lb, ga, t = random_params(rng, skel, n)
    X, _ = kin.fk_forward(th, lb, ga, skel)
    Y = kin.project_points(X, t, kin.Camera())
    vis = rng.random((n, skel.K)) > hidden_frac
    gt = L.GroundTruth(X=X, Y=Y, vis=vis, theta=th, log_beta=lb, gamma=ga)
    hyp = np.concatenate([np.concatenate(random_params(rng, skel, n * M), axis=1)]).reshape(n, M, -1)
    return gt, hyp, rng


def test_best_of_m_single_hypothesis_is_plain_distance(rng):
    a, b = rng.normal(size=(2, 17, 3)), rng.normal(size=(2, 17, 3))
    loss, m, _ = L.best_of_m(a, b[:, None])
    assert loss == pytest.approx(np.mean(np.linalg.norm((a - b).reshape(2, -1), axis=1)), rel=1e-14)
    assert np.all(m == 0)


def test_best_of_m_toy():
    gt = np.zeros((1, 1, 1))
    hyps = np.array([[[[-1.0]], [[2.0]]]])
    loss, m, _ = L.best_of_m(gt, hyps)
    assert loss == 1.0 and m[0] == 0


@pytest.mark.parametrize("seed", range(10))
def test_best_index_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    gt, hyp = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 6, 5, 3))
    _, m, _ = L.best_of_m(gt, hyp)
    for i in range(4):
        d = [np.sqrt(sum((hyp[i, j] - gt[i]).ravel() ** 2)) for j in range(6)]
        assert m[i] == min(range(6), key=lambda j: (d[j], j))


def test_exact_hypothesis_wins_with_lowest_index(rng):
    gt = rng.normal(size=(1, 17, 3))
    hyp = np.stack([gt[0] + 1, gt[0], gt[0], gt[0] - 1])[None]
    loss, m, _ = L.best_of_m(gt, hyp)
    assert loss == 0.0 and m[0] == 1


def test_reproj_all_invisible_is_zero(rng):
    Y = rng.normal(size=(2, 17, 2))
    Yh = rng.normal(size=(2, 3, 17, 2))
    loss, g = L.reproj_all(Y, np.zeros((2, 17), bool), Yh)
    assert loss == 0.0 and not g.any()
    loss, _ = L.reproj_all(Y, np.ones((2, 17), bool), Y[:, None])
    assert loss == 0.0


def test_reproj_all_hand_summed(rng):
    N, M, K = 3, 4, 17
    Y, Yh = rng.normal(size=(N, K, 2)), rng.normal(size=(N, M, K, 2))
    vis = rng.random((N, K)) > 0.4
    ref = 0.0
    for i in range(N):
        for m in range(M):
            ref += np.sqrt(sum((Yh[i, m, k, c] - Y[i, k, c]) ** 2 for k in range(K) if vis[i, k] for c in range(2)))
    assert abs(L.reproj_all(Y, vis, Yh)[0] - ref / N) < 1e-12


def test_smpl_losses_zero_at_ground_truth(skel):
    gt, _, _ = batch(0, skel)
    sl = kin.param_slices(skel)
    S, _ = kin.fk_forward(gt.theta, gt.log_beta, gt.gamma, skel)
    vals, _ = L.smpl_losses(gt.theta, gt.log_beta, S, gt.Y, gt.vis, gt.theta[:, None], gt.log_beta[:, None],
                            S[:, None], gt.Y[:, None], np.zeros(3, int))
    assert all(v == 0.0 for v in vals.values())


def test_theta_perturbation_gives_epsilon(skel):
    gt, _, _ = batch(1, skel)
    th = gt.theta.copy()[:, None]
    th[:, 0, 5] += 1e-3
    S, _ = kin.fk_forward(gt.theta, gt.log_beta, gt.gamma, skel)
    vals, _ = L.smpl_losses(gt.theta, gt.log_beta, S, gt.Y, gt.vis, th, gt.log_beta[:, None], S[:, None],
                            gt.Y[:, None], np.zeros(3, int))
    assert vals["theta"] == pytest.approx(1e-3, rel=1e-9)


def test_smpl_losses_recomputed_from_primitives(skel):
    gt, hyp, rng = batch(2, skel)
    sl = kin.param_slices(skel)
    m = rng.integers(0, 4, size=3)
    S_gt, _ = kin.fk_forward(gt.theta, gt.log_beta, gt.gamma, skel)
    flat = hyp.reshape(12, -1)
    S_hat = kin.fk_forward(flat[:, sl["theta"]], flat[:, sl["log_beta"]], flat[:, sl["gamma"]], skel)[0]
    S_hat = S_hat.reshape(3, 4, 17, 3)
    Y_hat = kin.project_points(S_hat, hyp[:, :, sl["t"]], kin.Camera())
    vals, _ = L.smpl_losses(gt.theta, gt.log_beta, S_gt, gt.Y, gt.vis, hyp[:, :, sl["theta"]],
                            hyp[:, :, sl["log_beta"]], S_hat, Y_hat, m)
    r = np.arange(3)
    ref = {
        "theta": np.mean([np.linalg.norm(hyp[i, m[i], sl["theta"]] - gt.theta[i]) for i in r]),
        "beta": np.mean([np.linalg.norm(hyp[i, m[i], sl["log_beta"]] - gt.log_beta[i]) for i in r]),
        "V": np.mean([np.linalg.norm(S_hat[i, m[i]] - S_gt[i]) for i in r]),
        "rb": np.mean([np.linalg.norm((Y_hat[i, m[i]] - gt.Y[i])[gt.vis[i]]) for i in r]),
    }
    for k in ref:
        assert abs(vals[k] - ref[k]) < 1e-12


def test_total_loss_weighting(skel):
    gt, hyp, _ = batch(3, skel)
    cam = kin.Camera()
    assert L.total_loss(hyp, gt, L.LossWeights.zeros(), skel, cam).total == 0.0
    only_best = L.LossWeights(0, 1, 0, 0, 0, 0)
    res = L.total_loss(hyp, gt, only_best, skel, cam)
    assert res.total == res.terms["best"]
    w = L.LossWeights()
    res = L.total_loss(hyp, gt, w, skel, cam)
    ref = sum(asdict(w)[k] * res.terms[k] for k in L.TERMS)
    assert abs(res.total - ref) < 1e-12


def test_default_weights():
    assert asdict(L.LossWeights()) == {"ri": 1.0, "best": 25.0, "theta": 1.0, "beta": 0.001, "V": 1.0, "rb": 1.0}
    with pytest.raises(ValueError):
        L.LossWeights(best=-1.0)


@given(st.floats(0.01, 100.0))
def test_total_loss_positively_homogeneous(skel, c):
    gt, hyp, _ = batch(4, skel)
    w = L.LossWeights()
    a = L.total_loss(hyp, gt, w, skel, kin.Camera(), need_grad=False).total
    b = L.total_loss(hyp, gt, w.scaled(c), skel, kin.Camera(), need_grad=False).total
    assert b == pytest.approx(c * a, rel=1e-12)


@pytest.mark.parametrize("seed", GRAD_SEEDS)
@pytest.mark.parametrize("ri", [1.0, 0.0])
def test_total_loss_gradient_fd(skel, seed, ri):
    gt, hyp, _ = batch(seed, skel, n=2, M=3)
    w = L.LossWeights(ri=ri)
    cam = kin.Camera()
    res = L.total_loss(hyp, gt, w, skel, cam)
    num = dc.numeric_grad(lambda: L.total_loss(hyp, gt, w, skel, cam, need_grad=False).total, hyp)
    assert dc.rel_error(res.grad, num) < 1e-5


def test_best_gradient_only_through_m_star(skel):
    gt, hyp, _ = batch(7, skel, n=2, M=4)
    w = L.LossWeights(0, 1, 0, 0, 0, 0)
    res = L.total_loss(hyp, gt, w, skel, kin.Camera())
    num = dc.numeric_grad(lambda: L.total_loss(hyp, gt, w, skel, kin.Camera(), need_grad=False).total, hyp)
    for i in range(2):
        for m in range(4):
            if m != res.m_star[i]:
                assert np.abs(num[i, m]).max() == 0.0
                assert not res.grad[i, m].any()
    assert np.abs(res.grad[np.arange(2), res.m_star]).max() > 0


def test_masking_completeness(skel):
    gt, hyp, rng = batch(8, skel, hidden_frac=0.5)
    base = L.total_loss(hyp, gt, L.LossWeights(), skel, kin.Camera())
    Y = gt.Y.copy()
    Y[~gt.vis] = rng.normal(size=(int((~gt.vis).sum()), 2)) * 1e3
    gt2 = L.GroundTruth(gt.X, Y, gt.vis, gt.theta, gt.log_beta, gt.gamma)
    other = L.total_loss(hyp, gt2, L.LossWeights(), skel, kin.Camera())
    assert other.terms["ri"] == base.terms["ri"] and other.terms["rb"] == base.terms["rb"]
    assert other.grad.tobytes() == base.grad.tobytes()
    Y[~gt.vis] = np.nan  # NaN at hidden joints never leaks
    gt3 = L.GroundTruth(gt.X, Y, gt.vis, gt.theta, gt.log_beta, gt.gamma)
    assert L.total_loss(hyp, gt3, L.LossWeights(), skel, kin.Camera()).total == base.total


def test_head_permutation_invariance(skel):
    gt, hyp, rng = batch(9, skel, M=5)
    perm = rng.permutation(5)
    a = L.total_loss(hyp, gt, L.LossWeights(), skel, kin.Camera(), need_grad=False).total
    b = L.total_loss(hyp[:, perm], gt, L.LossWeights(), skel, kin.Camera(), need_grad=False).total
    assert b == pytest.approx(a, rel=1e-13)


def test_non_finite_term_named(skel):
    gt, hyp, _ = batch(10, skel)
    bad = L.GroundTruth(gt.X, gt.Y, gt.vis, gt.theta + np.nan, gt.log_beta, gt.gamma, S=gt.X)
    with pytest.raises(NonFiniteError, match="L_theta"):
        L.total_loss(hyp, bad, L.LossWeights(), skel, kin.Camera())


def test_loss_curve_writer(tmp_path):
    p = tmp_path / "c.csv"
    with L.LossCurveWriter(p) as w:
        w.write(1, {"best": 0.5, "ri": 2.0})
    with L.LossCurveWriter(p, append=True) as w:
        w.write(2, {"best": 0.25})
    assert p.read_text().splitlines() == ["step,term,value", "1,best,0.5", "1,ri,2.0", "2,best,0.25"]
