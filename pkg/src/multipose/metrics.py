"""Pose error metrics and the multi-hypothesis evaluation protocol.

MPJPE is the mean joint distance after aligning root joints.  RE additionally
applies the best proper rigid motion (Kabsch; rotation + translation, scale
optional).  MPJPE-n / RE-n take the minimum over a set of n predictions.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_NS = (1, 5, 10, 25)
METRICS = ("mpjpe", "re")


class DegenerateAlignmentWarning(UserWarning):
    """Ground truth is (near) collinear; rotation is not identifiable."""


@dataclass(frozen=True)
class PoseError:
    mpjpe: float
    re: float


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "x", x), dtype=np.float64)


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape[-2:] != gt.shape[-2:] or gt.shape[-1] != 3:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must both be (..., K, 3) with equal K")


def mpjpe(pred, gt, joints: Sequence[int] | None = None) -> np.ndarray | float:
    """Root-aligned mean per-joint position error; batched over leading axes."""
    p, g = _arr(pred), _arr(gt)
    _check(p, g)
    p = p - p[..., :1, :]
    g = g - g[..., :1, :]
    d = np.linalg.norm(p - g, axis=-1)
    if joints is not None:
        d = d[..., list(joints)]
    out = d.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def rigid_align(pred: np.ndarray, gt: np.ndarray, scale: bool = False, rank_tol: float = 1e-9):
    """Align ``pred`` (…, K, 3) onto ``gt`` with a proper rotation (+ optional scale) and translation.

    Returns ``(aligned, degenerate)``; ``degenerate`` (bool array) marks sets whose
    ground truth has rank < 2 about its centroid, which fall back to translation only.
    """
    p, g = _arr(pred), _arr(gt)
    mp = p.mean(axis=-2, keepdims=True)
    mg = g.mean(axis=-2, keepdims=True)
    pc, gc = p - mp, g - mg
    H = np.swapaxes(pc, -1, -2) @ gc  # (…, 3, 3)
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.ones(S.shape)
    D[..., 2] = d
    R = np.swapaxes(Vt, -1, -2) @ (D[..., :, None] * np.swapaxes(U, -1, -2))  # maps pred -> gt
    sv = np.linalg.svd(gc, compute_uv=False)
    degenerate = sv[..., 1] <= rank_tol * np.maximum(sv[..., 0], 1e-300)
    s = np.ones(S.shape[:-1])
    if scale:
        var = np.sum(pc * pc, axis=(-1, -2))
        s = np.where(var > 0, np.sum(S * D, axis=-1) / np.where(var > 0, var, 1.0), 1.0)
    aligned = s[..., None, None] * (pc @ np.swapaxes(R, -1, -2)) + mg
    aligned = np.where(degenerate[..., None, None], pc + mg, aligned)
    return aligned, degenerate


def reconstruction_error(pred, gt, scale: bool = False, joints: Sequence[int] | None = None):
    """Mean joint distance after rigid Procrustes alignment.

    Collinear ground truth falls back to translation-only alignment and emits
    ``DegenerateAlignmentWarning``.
    """
    p, g = _arr(pred), _arr(gt)
    _check(p, g)
    aligned, degenerate = rigid_align(p, g, scale)
    if np.any(degenerate):
        warnings.warn(f"{int(np.sum(degenerate))} collinear ground-truth pose(s); "
                      "using translation-only alignment", DegenerateAlignmentWarning, stacklevel=2)
    d = np.linalg.norm(aligned - g, axis=-1)
    if joints is not None:
        d = d[..., list(joints)]
    out = d.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def pose_error(pred, gt, scale: bool = False) -> PoseError:
    return PoseError(float(mpjpe(pred, gt)), float(reconstruction_error(pred, gt, scale)))


def multi_metric(preds, gt, which: str = "mpjpe", scale: bool = False,
                 joints: Sequence[int] | None = None) -> float | np.ndarray:
    """Minimum of the base metric over hypotheses.

    Args:
        preds: (n, K, 3), or batched (N, n, K, 3) with gt (N, K, 3).
        gt: ground truth joints.
        which: ``"mpjpe"`` or ``"re"``.
    """
    p, g = _arr(preds), _arr(gt)
    if p.ndim < 3 or p.shape[-3] == 0:
        raise ValueError("multi_metric needs at least one hypothesis")
    if which == "mpjpe":
        vals = mpjpe(p, g[..., None, :, :], joints)
    elif which == "re":
        vals = reconstruction_error(p, np.broadcast_to(g[..., None, :, :], p.shape), scale, joints)
    else:
        raise ValueError(f"unknown metric {which!r}; expected one of {METRICS}")
    out = np.min(vals, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ReportRow:
    dataset: str
    n: int
    metric: str
    mean: float
    stderr: float
    count: int


def summarize(values: np.ndarray, dataset: str, n: int, metric: str) -> ReportRow:
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return ReportRow(dataset, int(n), metric, float(v.mean()), se, int(v.size))


def evaluate_sets(sets: dict[int, np.ndarray], gt: np.ndarray, dataset: str = "test",
                  scale: bool = False, joints: Sequence[int] | None = None) -> list[ReportRow]:
    """Report rows for precomputed prediction sets ``{n: (N, n, K, 3)}``."""
    rows = []
    for n in sorted(sets):
        for which in METRICS:
            vals = multi_metric(sets[n], gt, which, scale, joints)
            rows.append(summarize(np.atleast_1d(vals), dataset, n, which))
    return rows


def evaluate(model, flow, dataset, ns: Sequence[int] = DEFAULT_NS, M: int | None = None, seed: int = 0, *,
             name: str = "test", uniform: bool = False, temperature: float = 1.0, restarts: int = 10,
             scale: bool = False, joints: Sequence[int] | None = None,
             return_sets: bool = False):
    """Run the model once per observation, quantize to every n and score MPJPE-n / RE-n.

    ``model`` is anything with ``predict_dataset(ds, M) -> (params, joints)``;
    ``n > M`` is rejected.
    """
    from .quantizer import quantize_batch  # local import keeps metrics importable on its own
    from .flow import log_prob, pose_vectors

    M = M or model.M
    bad = [n for n in ns if n > M]
    if bad:
        raise ValueError(f"n values {bad} exceed M = {M}")
    if hasattr(model, "hypothesis_sets"):
        # mixture baselines bring their own per-mode selection instead of quantization
        sets = model.hypothesis_sets(dataset, ns, seed)
        rows = evaluate_sets(sets, dataset.X, name, scale, joints)
        return (rows, sets) if return_sets else rows
    _, hyp = model.predict_dataset(dataset, M)
    N = hyp.shape[0]
    lp = None
    if flow is not None and not uniform:
        lp = log_prob(flow, pose_vectors(hyp).reshape(N * M, -1)).reshape(N, M)
    sets = {}
    for n in ns:
        sets[n] = quantize_batch(hyp, flow, n, seed, uniform=uniform, temperature=temperature,
                                 restarts=restarts, log_prior=lp)
    rows = evaluate_sets(sets, dataset.X, name, scale, joints)
    return (rows, sets) if return_sets else rows


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "n", "metric", "mean", "stderr", "count"])
    for r in rows:
        w.writerow([r.dataset, r.n, r.metric, repr(r.mean), repr(r.stderr), r.count])
    return buf.getvalue()


def write_report(path: str | Path, rows: Sequence[ReportRow]) -> None:
    Path(path).write_text(rows_to_csv(rows))


def read_report(path: str | Path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        return [ReportRow(r["dataset"], int(r["n"]), r["metric"], float(r["mean"]),
                          float(r["stderr"]), int(r["count"])) for r in csv.DictReader(fh)]


def plot_report(path: str | Path, rows: Sequence[ReportRow]) -> None:
    """SVG line chart of each (dataset, metric) mean against n, with stderr bars.

    Output is byte-stable: no timestamp and a fixed id salt.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "multipose"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keys = sorted({(r.dataset, r.metric) for r in rows})
    for ds, metric in keys:
        sel = sorted((r for r in rows if r.dataset == ds and r.metric == metric), key=lambda r: r.n)
        ax.errorbar([r.n for r in sel], [r.mean for r in sel], yerr=[r.stderr for r in sel],
                    marker="o", capsize=3, label=f"{ds} {metric.upper()}-n")
    ax.set_xlabel("n (hypotheses kept)")
    ax.set_ylabel("error (scene units)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def two_mode_recovery(centers: np.ndarray, mode_a: np.ndarray, mode_b: np.ndarray,
                      frac: float = 0.25) -> np.ndarray:
    """Whether each ground-truth mode has a center within ``frac`` of the inter-mode distance.

    Distances are Euclidean norms of flattened root-relative poses.

    Args:
        centers: (N, n, K, 3) predicted poses.
        mode_a, mode_b: (N, K, 3) the two ground-truth explanations of each observation.
    """
    c = _arr(centers)
    c = c - c[..., :1, :]
    a = _arr(mode_a) - _arr(mode_a)[..., :1, :]
    b = _arr(mode_b) - _arr(mode_b)[..., :1, :]
    n = c.shape[0]
    delta = frac * np.linalg.norm((a - b).reshape(n, -1), axis=1)
    da = np.linalg.norm((c - a[:, None]).reshape(n, c.shape[1], -1), axis=2).min(axis=1)
    db = np.linalg.norm((c - b[:, None]).reshape(n, c.shape[1], -1), axis=2).min(axis=1)
    return (da <= delta) & (db <= delta)
