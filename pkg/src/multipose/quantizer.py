"""n-quantized-best-of-M: prior-weighted K-means over a hypothesis set.

Hypotheses are weighted by the flow density normalized over the set, then
reduced to ``n`` centers by weighted Lloyd iterations minimizing

    E = sum_i w_i min_j |x_i - c_j|^2

on flattened root-relative poses.  All restarts run in lockstep as one batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import FlowModel, log_prob, pose_vectors


@dataclass
class WeightedPoses:
    poses: np.ndarray  # (M, K, 3)
    weights: np.ndarray  # (M,), sums to 1
    log_prior: np.ndarray | None = None

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.poses.shape[0] != self.weights.shape[0] or self.poses.shape[0] < 1:
            raise ValueError("need one weight per pose and at least one pose")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")

    @property
    def M(self) -> int:
        return self.poses.shape[0]


@dataclass
class QuantizedSet:
    centers: np.ndarray  # (n, K, 3) root-relative
    assignment: np.ndarray  # (M,)
    energy: float
    cluster_weight: np.ndarray  # (n,) total weight assigned to each center
    trace: list[tuple[int, int, float]] = field(default_factory=list)  # (restart, iteration, energy)


def normalize_log_weights(logp: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """``exp(l_i/T - logsumexp(l/T))`` computed with a max shift."""
    a = np.asarray(logp, dtype=np.float64) / temperature
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def weigh(joints: np.ndarray, flow: FlowModel | None, temperature: float = 1.0,
          uniform: bool = False) -> WeightedPoses:
    """Weight M hypothesis skeletons (M, K, 3) by their normalized prior density.

    ``uniform=True`` (or ``flow=None``) gives every hypothesis weight 1/M.
    """
    joints = np.asarray(joints, dtype=np.float64)
    rel = joints - joints[:, :1]
    M = joints.shape[0]
    if uniform or flow is None:
        return WeightedPoses(rel, np.full(M, 1.0 / M))
    lp = log_prob(flow, pose_vectors(joints))
    return WeightedPoses(rel, normalize_log_weights(lp, temperature), lp)


def energy(points: np.ndarray, weights: np.ndarray, centers: np.ndarray) -> tuple[float, np.ndarray]:
    """Quantization energy and nearest-center assignment, from explicit differences."""
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    a = np.argmin(d2, axis=1)
    return float(np.sum(weights * d2[np.arange(points.shape[0]), a])), a


def _sq_dists(pts: np.ndarray, pn: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (R, M, n) from |x|^2 - 2 x.c + |c|^2, clipped at 0
    cn = np.sum(centers * centers, axis=2)
    d2 = pn[None, :, None] - 2.0 * (pts @ centers.transpose(0, 2, 1)) + cn[:, None, :]
    return np.maximum(d2, 0.0)


def _kmeanspp(rng, pts, pn, w, n, R):
    M = pts.shape[0]
    pair = np.maximum(pn[:, None] + pn[None, :] - 2.0 * (pts @ pts.T), 0.0)
    rows = np.arange(R)
    chosen = np.empty((R, n), dtype=np.int64)
    cw = np.cumsum(w)
    chosen[:, 0] = np.minimum(np.searchsorted(cw, rng.random(R) * cw[-1], side="right"), M - 1)
    best = pair[chosen[:, 0]]  # (R, M)
    for k in range(1, n):
        score = w[None] * best
        score[rows[:, None], chosen[:, :k]] = 0.0
        cs = np.cumsum(score, axis=1)
        total = cs[:, -1]
        u = rng.random(R) * total
        pick = np.minimum((cs <= u[:, None]).sum(axis=1), M - 1)
        # all remaining mass zero: take the heaviest point not yet chosen
        dead = total <= 0.0
        if np.any(dead):
            for r in np.flatnonzero(dead):
                avail = np.ones(M, dtype=bool)
                avail[chosen[r, :k]] = False
                cand = np.flatnonzero(avail)
                pick[r] = cand[np.argmax(w[cand])]
        chosen[:, k] = pick
        best = np.minimum(best, pair[pick])
    return pts[chosen]


def quantize(wp: WeightedPoses, n: int, seed: int = 0, restarts: int = 10, max_iter: int = 100,
             record_trace: bool = False) -> QuantizedSet:
    """Weighted K-means with k-means++ seeding and ``restarts`` restarts; lowest energy wins
    (lowest restart index on ties).

    Raises:
        ValueError: ``n`` outside ``[1, M]``.
    """
    M = wp.M
    if not 1 <= n <= M:
        raise ValueError(f"n = {n} must lie in [1, M = {M}]")
    shape = wp.poses.shape[1:]
    pts = wp.poses.reshape(M, -1)
    w = wp.weights
    if n == M:
        wsum = w.copy()
        return QuantizedSet(wp.poses.copy(), np.arange(M), 0.0, wsum, [])
    rng = np.random.default_rng(seed)
    R = max(1, restarts)
    shift = pts.mean(axis=0)
    pts_c = pts - shift
    pn = np.sum(pts_c * pts_c, axis=1)
    centers = _kmeanspp(rng, pts_c, pn, w, n, R)
    rows = np.arange(R)
    trace = []
    prev_assign = None
    energies = np.full(R, np.inf)
    active = np.ones(R, dtype=bool)
    for it in range(max_iter):
        d2 = _sq_dists(pts_c, pn, centers)
        assign = np.argmin(d2, axis=2)  # (R, M)
        onehot = np.zeros((R, n, M))
        onehot[rows[:, None], assign, np.arange(M)[None]] = w[None]
        mass = onehot.sum(axis=2)  # (R, n)
        sums = onehot @ pts_c
        cost = w[None] * np.take_along_axis(d2, assign[:, :, None], axis=2)[:, :, 0]
        e_now = cost.sum(axis=1)
        energies = np.where(active, e_now, energies)
        if record_trace:
            for r in np.flatnonzero(active):
                trace.append((int(r), it, energy(pts_c, w, centers[r])[0]))
        if prev_assign is not None:
            active &= np.any(assign != prev_assign, axis=1)
        if not np.any(active):
            break
        prev_assign = assign
        occupied = np.zeros((R, n), dtype=bool)
        occupied[rows[:, None], assign] = True
        upd = active[:, None] & (mass > 0)
        centers = np.where(upd[:, :, None], sums / np.where(mass > 0, mass, 1.0)[:, :, None], centers)
        for r in np.flatnonzero(active):
            empty = np.flatnonzero(~occupied[r])
            if empty.size == 0:
                continue
            c = cost[r].copy()
            for j in empty:
                i = int(np.argmax(c))
                centers[r, j] = pts_c[i]
                c[i] = -1.0
            prev_assign[r] = -1  # repaired restarts keep iterating
    # re-score every restart at its final centers (the cap may stop mid-update)
    d2 = _sq_dists(pts_c, pn, centers)
    energies = np.sum(w[None] * d2.min(axis=2), axis=1)
    best_r = int(np.argmin(energies))
    final = centers[best_r] + shift
    e, assign = energy(pts, w, final)
    cw = np.bincount(assign, weights=w, minlength=n)
    return QuantizedSet(final.reshape((n,) + shape), assign, e, cw, trace)


def write_trace(path: str | Path, qs: QuantizedSet) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["restart", "iteration", "energy"])
        for r, it, e in qs.trace:
            out.writerow([r, it, repr(e)])


def order_by_weight(qs: QuantizedSet) -> np.ndarray:
    """Center indices by descending aggregate weight (stable)."""
    return np.argsort(-qs.cluster_weight, kind="stable")


def n_best_of_m(obs, model, flow: FlowModel | None, M: int, n: int, seed: int = 0, *,
                uniform: bool = False, temperature: float = 1.0, restarts: int = 10) -> np.ndarray:
    """Predict M hypotheses for ``obs``, weight them by the prior and quantize to n poses (n, K, 3),
    heaviest cluster first."""
    hyps = model.predict(obs, M)
    wp = weigh(hyps.joints, flow, temperature, uniform)
    hyps.log_prior = wp.log_prior
    qs = quantize(wp, n, seed, restarts)
    return qs.centers[order_by_weight(qs)]


def quantize_batch(joints: np.ndarray, flow: FlowModel | None, n: int, seed: int = 0, *,
                   uniform: bool = False, temperature: float = 1.0, restarts: int = 10,
                   log_prior: np.ndarray | None = None) -> np.ndarray:
    """Quantize hypothesis sets (N, M, K, 3) -> (N, n, K, 3), heaviest cluster first.

    ``log_prior`` (N, M) may be passed to avoid re-evaluating the flow.
    """
    N, M = joints.shape[:2]
    if log_prior is None and flow is not None and not uniform:
        log_prior = log_prob(flow, pose_vectors(joints).reshape(N * M, -1)).reshape(N, M)
    out = np.empty((N, n) + joints.shape[2:])
    for i in range(N):
        rel = joints[i] - joints[i][:, :1]
        if uniform or log_prior is None:
            w = np.full(M, 1.0 / M)
        else:
            w = normalize_log_weights(log_prior[i], temperature)
        qs = quantize(WeightedPoses(rel, w), n, seed, restarts)
        out[i] = qs.centers[order_by_weight(qs)]
    return out
