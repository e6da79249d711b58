"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np


def exhaustive_partition_energy(points: np.ndarray, weights: np.ndarray, n: int) -> float:
    """Global optimum of the weighted K-means energy by enumerating every labelling.

    Each labelling's optimal centers are the weighted means of its groups; only
    labellings that use all ``n`` groups are admissible (same as n nonempty clusters).
    """
    M = points.shape[0]
    best = np.inf
    for labels in itertools.product(range(n), repeat=M):
        if labels[0] != 0 or len(set(labels)) != n:
            continue  # fix the first label to skip relabelled duplicates
        lab = np.array(labels)
        e = 0.0
        for j in range(n):
            sel = lab == j
            w = weights[sel]
            if w.sum() == 0:
                continue
            c = (w[:, None] * points[sel]).sum(0) / w.sum()
            e += float(np.sum(w * np.sum((points[sel] - c) ** 2, axis=1)))
        best = min(best, e)
    return best


def rotation_grid(steps: int) -> np.ndarray:
    """Rotation matrices from a ZYZ Euler grid covering SO(3)."""
    a = np.linspace(0, 2 * np.pi, steps, endpoint=False)
    b = np.linspace(0, np.pi, steps // 2 + 1)

    def rz(t):
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])

    def ry(t):
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])

    return np.array([rz(x) @ ry(y) @ rz(z) for x in a for y in b for z in a])


def brute_rigid_sse(pred: np.ndarray, gt: np.ndarray, rotations: np.ndarray) -> float:
    """Least summed squared joint error over rotations, after centroid alignment.

    The best grid rotation seeds a local quasi-Newton search over rotation vectors.
    """
    from scipy.optimize import minimize
    from scipy.spatial.transform import Rotation

    pc = pred - pred.mean(0)
    gc = gt - gt.mean(0)
    cand = np.einsum("rij,kj->rki", rotations, pc)
    sse = ((cand - gc[None]) ** 2).sum(axis=(1, 2))
    start = Rotation.from_matrix(rotations[int(sse.argmin())]).as_rotvec()
    f = lambda v: float(((pc @ Rotation.from_rotvec(v).as_matrix().T - gc) ** 2).sum())
    res = minimize(f, start, method="BFGS", options={"gtol": 1e-10})
    return min(float(res.fun), float(sse.min()))
