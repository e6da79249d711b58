"""Training objectives for the multi-hypothesis regressor.

Conventions: ``N`` examples, ``M`` hypotheses, ``K`` joints, ``P`` parameters
per hypothesis laid out as ``[theta, log_beta, gamma, t]``.  Every norm is an
unsquared Euclidean norm of the flattened residual; its gradient uses
``r / sqrt(|r|^2 + NORM_EPS)`` so it stays finite at zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kinematics as kin
from .errors import NonFiniteError, ShapeError

NORM_EPS = 1e-12
TERMS = ("ri", "best", "theta", "beta", "V", "rb")


@dataclass(frozen=True)
class LossWeights:
    ri: float = 1.0
    best: float = 25.0
    theta: float = 1.0
    beta: float = 0.001
    V: float = 1.0
    rb: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"loss weight {name} must be finite and nonnegative, got {value}")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(**{k: v * c for k, v in asdict(self).items()})

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def norm_and_grad(r: np.ndarray, n_axes: int):
    """Norm over the trailing ``n_axes`` axes and its gradient w.r.t. ``r``."""
    axes = tuple(range(-n_axes, 0))
    sq = np.sum(r * r, axis=axes)
    val = np.sqrt(sq)
    grad = r / np.sqrt(sq + NORM_EPS).reshape(sq.shape + (1,) * n_axes)
    return val, grad


def _masked(residual: np.ndarray, vis: np.ndarray) -> np.ndarray:
    # np.where rather than multiplication so NaNs stored at hidden joints never leak.
    return np.where(vis[..., None], residual, 0.0)


def best_of_m(X_gt: np.ndarray, X_hat: np.ndarray):
    """Best-of-M joint loss.

    Args:
        X_gt: (N, K, 3) ground-truth joints.
        X_hat: (N, M, K, 3) hypotheses.

    Returns:
        ``(loss, m_star, grad)`` where loss is the batch mean of the distance to
        the closest hypothesis, ``m_star`` (N,) its index (lowest on ties) and
        ``grad`` (N, M, K, 3) is nonzero only at ``m_star``.
    """
    X_gt = np.asarray(X_gt, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X_hat.ndim != 4 or X_gt.shape != X_hat.shape[:1] + X_hat.shape[2:]:
        raise ShapeError(f"X_gt {X_gt.shape} incompatible with hypotheses {X_hat.shape}")
    n = X_gt.shape[0]
    dist, g = norm_and_grad(X_hat - X_gt[:, None], 2)
    m_star = np.argmin(dist, axis=1)
    rows = np.arange(n)
    grad = np.zeros_like(X_hat)
    grad[rows, m_star] = g[rows, m_star] / n
    return float(dist[rows, m_star].mean()), m_star, grad


def reproj_all(Y: np.ndarray, vis: np.ndarray, Y_hat: np.ndarray):
    """Hypothesis reprojection loss: per example, sum over hypotheses of the masked 2D residual norm.

    Args:
        Y: (N, K, 2) observed keypoints; hidden entries are ignored.
        vis: (N, K) visibility mask.
        Y_hat: (N, M, K, 2) projected hypotheses.

    Returns:
        ``(loss, grad_Y_hat)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    vis = np.asarray(vis, dtype=bool)
    n = Y.shape[0]
    r = _masked(Y_hat - Y[:, None], vis[:, None])
    val, g = norm_and_grad(r, 2)
    return float(val.sum(axis=1).mean()), g / n


def _gather(a: np.ndarray, m_star: np.ndarray) -> np.ndarray:
    return a[np.arange(a.shape[0]), m_star]


def smpl_losses(theta_gt, log_beta_gt, S_gt, Y, vis, theta_hat, log_beta_hat, S_hat, Y_hat, m_star):
    """Parameter, shape, joint ("vertex") and best-reprojection losses on hypothesis ``m_star`` only.

    Array shapes: ``*_gt`` (N, ...), ``*_hat`` (N, M, ...); ``S_*`` are
    skinned joints before the regressor.  Returns ``(values, grads)`` dicts
    keyed ``theta, beta, V, rb``; each grad has the shape of its ``*_hat``
    input and is zero outside ``m_star``.
    """
    n = np.shape(theta_gt)[0]
    rows = np.arange(n)
    values, grads = {}, {}
    pairs = {
        "theta": (theta_hat, theta_gt, 1, None),
        "beta": (log_beta_hat, log_beta_gt, 1, None),
        "V": (S_hat, S_gt, 2, None),
        "rb": (Y_hat, Y, 2, vis),
    }
    for name, (hat, gt, n_axes, mask) in pairs.items():
        hat = np.asarray(hat, dtype=np.float64)
        r = _gather(hat, m_star) - np.asarray(gt, dtype=np.float64)
        if mask is not None:
            r = _masked(r, np.asarray(mask, dtype=bool))
        val, g = norm_and_grad(r, n_axes)
        full = np.zeros_like(hat)
        full[rows, m_star] = g / n
        values[name] = float(val.mean())
        grads[name] = full
    return values, grads


@dataclass
class GroundTruth:
    """Per-example supervision for a batch."""

    X: np.ndarray  # (N, K', 3) joints after the regressor
    Y: np.ndarray  # (N, K', 2)
    vis: np.ndarray  # (N, K')
    theta: np.ndarray  # (N, 3(K-1))
    log_beta: np.ndarray  # (N, K-1)
    gamma: np.ndarray  # (N, 3)
    S: np.ndarray | None = None  # (N, K, 3) skinned joints; computed from params when absent


@dataclass
class LossResult:
    total: float
    terms: dict[str, float]
    m_star: np.ndarray
    grad: np.ndarray | None = None
    joints: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def total_loss(hyp: np.ndarray, gt: GroundTruth, weights: LossWeights, skel: kin.Skeleton,
               cam: kin.Camera, regressor: np.ndarray | None = None, need_grad: bool = True) -> LossResult:
    """Weighted sum of all six terms for stacked hypotheses ``hyp`` (N, M, P).

    Raises:
        NonFiniteError: a term evaluated to NaN/inf; the message names it.
    """
    hyp = np.asarray(hyp, dtype=np.float64)
    n, M, P = hyp.shape
    if P != kin.n_params(skel):
        raise ShapeError(f"hypotheses carry {P} parameters, skeleton needs {kin.n_params(skel)}")
    sl = kin.param_slices(skel)
    flat = hyp.reshape(n * M, P)
    S_flat, cache = kin.fk_forward(flat[:, sl["theta"]], flat[:, sl["log_beta"]], flat[:, sl["gamma"]], skel)
    S_hat = S_flat.reshape(n, M, skel.K, 3)
    X_hat = kin.joint_regressor(S_hat, regressor)
    t_hat = hyp[:, :, sl["t"]]
    Y_hat = kin.project_points(X_hat, t_hat, cam)

    S_gt = gt.S
    if S_gt is None:
        S_gt, _ = kin.fk_forward(gt.theta, gt.log_beta, gt.gamma, skel)

    L_best, m_star, dX_best = best_of_m(gt.X, X_hat)
    L_ri, dY_ri = reproj_all(gt.Y, gt.vis, Y_hat)
    sv, sg = smpl_losses(gt.theta, gt.log_beta, S_gt, gt.Y, gt.vis,
                         hyp[:, :, sl["theta"]], hyp[:, :, sl["log_beta"]], S_hat, Y_hat, m_star)
    terms = {"ri": L_ri, "best": L_best, "theta": sv["theta"], "beta": sv["beta"], "V": sv["V"], "rb": sv["rb"]}
    w = asdict(weights)
    for name in TERMS:
        if not math.isfinite(terms[name]):
            raise NonFiniteError(f"loss term L_{name}", repr(terms[name]))
    total = float(sum(w[k] * terms[k] for k in TERMS))
    result = LossResult(total, terms, m_star, joints=X_hat)
    if not need_grad:
        return result

    dY = w["ri"] * dY_ri + w["rb"] * sg["rb"]
    dX_proj, dt = kin.project_backward(X_hat, t_hat, cam, dY)
    dX = w["best"] * dX_best + dX_proj
    dS = kin.joint_regressor_backward(dX, regressor) + w["V"] * sg["V"]
    grad = np.zeros_like(hyp)
    if w["ri"] > 0:
        dth, dlb, dga = kin.fk_backward(cache, dS.reshape(n * M, skel.K, 3))
        grad[:, :, sl["theta"]] = dth.reshape(n, M, -1)
        grad[:, :, sl["log_beta"]] = dlb.reshape(n, M, -1)
        grad[:, :, sl["gamma"]] = dga.reshape(n, M, 3)
    else:
        # without the all-hypothesis term only m_star receives gradient; skip the rest
        rows = np.arange(n)
        sel = rows * M + m_star
        sub = cache.select(sel)
        dth, dlb, dga = kin.fk_backward(sub, dS[rows, m_star])
        grad[rows, m_star, sl["theta"]] = dth
        grad[rows, m_star, sl["log_beta"]] = dlb
        grad[rows, m_star, sl["gamma"]] = dga
    grad[:, :, sl["theta"]] += w["theta"] * sg["theta"]
    grad[:, :, sl["log_beta"]] += w["beta"] * sg["beta"]
    grad[:, :, sl["t"]] += dt
    result.grad = grad
    return result


class LossCurveWriter:
    """Appends ``step,term,value`` rows to a CSV file."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        self._fh = open(self.path, "a" if not new else "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(["step", "term", "value"])

    def write(self, step: int, terms: dict[str, float]) -> None:
        for name, value in terms.items():
            self._w.writerow([step, name, repr(float(value))])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
