"""RealNVP pose prior over root-relative skeletons.

Poses enter as flat vectors of the K-1 non-root joints (root subtracted),
are standardized with fixed training statistics and pushed through a stack of
affine coupling layers.  ``log_prob`` is the exact change-of-variables
density in the original (unstandardized) coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import NonFiniteError, ShapeError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


def pose_vectors(joints: np.ndarray, root: int = 0) -> np.ndarray:
    """(..., K, 3) joints -> (..., 3(K-1)) root-relative vectors with the root dropped."""
    joints = np.asarray(joints, dtype=np.float64)
    rel = joints - joints[..., root : root + 1, :]
    rel = np.delete(rel, root, axis=-2)
    return rel.reshape(rel.shape[:-2] + (-1,))


def joints_from_vectors(vec: np.ndarray, root: int = 0) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    rel = vec.reshape(vec.shape[:-1] + (-1, 3))
    return np.insert(rel, root, 0.0, axis=-2)


@dataclass
class CouplingLayer:
    """Keeps ``u[:d]`` and maps ``u[d:] -> u[d:] * exp(g(u[:d])) + h(u[:d])`` where ``u = x[perm]``.

    The output stays in permuted order.
    """

    perm: np.ndarray
    d: int
    g_net: list[dc.DenseLayer]
    h_net: list[dc.DenseLayer]

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        D = self.perm.size
        if not 0 < self.d < D:
            raise ValueError(f"split point {self.d} outside (0, {D})")
        if not np.array_equal(np.sort(self.perm), np.arange(D)):
            raise ValueError("perm is not a permutation")

    @property
    def D(self) -> int:
        return self.perm.size


@dataclass
class FlowModel:
    layers: list[CouplingLayer]
    D: int
    mean: np.ndarray = None
    std: np.ndarray = None
    s_max: float = 5.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(l.D != self.D for l in self.layers):
            raise ShapeError("all coupling layers must share D")
        self.mean = np.zeros(self.D) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(self.D) if self.std is None else np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (self.D,) or self.std.shape != (self.D,) or np.any(self.std <= 0):
            raise ShapeError("normalization statistics must be length-D with positive std")

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += dc.mlp_params(l.g_net) + dc.mlp_params(l.h_net)
        return out

    def set_params(self, params) -> None:
        i = 0
        for l in self.layers:
            ng, nh = 2 * len(l.g_net), 2 * len(l.h_net)
            dc.set_mlp_params(l.g_net, params[i : i + ng])
            dc.set_mlp_params(l.h_net, params[i + ng : i + ng + nh])
            i += ng + nh


def alternating_perms(D: int, L: int) -> list[tuple[np.ndarray, int]]:
    """Per-layer (perm, d) so that layers condition on even, odd, even, ... original coordinates."""
    evens, odds = np.arange(0, D, 2), np.arange(1, D, 2)
    order = np.arange(D)  # original coordinate held at each position
    out = []
    for l in range(L):
        first, second = (evens, odds) if l % 2 == 0 else (odds, evens)
        pos = np.argsort(order)
        perm = np.concatenate([pos[first], pos[second]])
        out.append((perm, first.size))
        order = order[perm]
    return out


def init_flow(D: int, n_layers: int = 8, hidden: int = 64, depth: int = 2, seed: int = 0,
              s_max: float = 5.0, identity: bool = True) -> FlowModel:
    """Build a flow; with ``identity=True`` the last layer of every g/h net is zeroed so f = id."""
    rng = np.random.default_rng(seed)
    layers = []
    for perm, d in alternating_perms(D, n_layers):
        sizes = [d] + [hidden] * depth + [D - d]
        g_net, h_net = dc.build_mlp(rng, sizes), dc.build_mlp(rng, sizes)
        if identity:
            for net in (g_net, h_net):
                net[-1].W = np.zeros_like(net[-1].W)
        layers.append(CouplingLayer(perm, d, g_net, h_net))
    return FlowModel(layers, D, s_max=s_max)


@dataclass
class _LayerCache:
    a: np.ndarray
    b: np.ndarray
    s: np.ndarray
    graw: np.ndarray
    tape_g: dc.Tape
    tape_h: dc.Tape


def _forward(m: FlowModel, X: np.ndarray, keep: bool):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.D:
        raise ShapeError(f"expected (N, {m.D}) poses, got {X.shape}")
    u = (X - m.mean) / m.std
    logdet = np.full(X.shape[0], -np.sum(np.log(m.std)))
    caches = []
    for layer in m.layers:
        u = u[:, layer.perm]
        a, b = u[:, : layer.d], u[:, layer.d :]
        graw, tg = dc.mlp_forward(layer.g_net, a)
        hh, th = dc.mlp_forward(layer.h_net, a)
        s = m.s_max * np.tanh(graw / m.s_max)
        u = np.concatenate([a, b * np.exp(s) + hh], axis=1)
        logdet = logdet + s.sum(axis=1)
        if keep:
            caches.append(_LayerCache(a, b, s, graw, tg, th))
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(logdet))):
        raise NonFiniteError("flow_forward")
    return u, logdet, caches


def flow_forward(m: FlowModel, X: np.ndarray):
    """Map poses (N, D) or (D,) to latents; returns ``(z, logdet)`` with logdet = log|det dz/dX|."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    z, logdet, _ = _forward(m, X[None] if single else X, keep=False)
    return (z[0], float(logdet[0])) if single else (z, logdet)


def flow_forward_cached(m: FlowModel, X: np.ndarray):
    return _forward(m, X, keep=True)


def flow_backward(m: FlowModel, caches: list[_LayerCache], dz: np.ndarray, dlogdet: np.ndarray):
    """Reverse pass of :func:`flow_forward_cached`.

    Returns ``(dX, param_grads)`` with param_grads ordered like ``m.params()``.
    """
    g = np.asarray(dz, dtype=np.float64)
    dl = np.asarray(dlogdet, dtype=np.float64)[:, None]
    per_layer = []
    for layer, c in zip(reversed(m.layers), reversed(caches)):
        d = layer.d
        da, dbp = g[:, :d], g[:, d:]
        es = np.exp(c.s)
        db = dbp * es
        ds = dbp * c.b * es + dl
        th = np.tanh(c.graw / m.s_max)
        dgraw = ds * (1.0 - th * th)
        gg, dxa_g = dc.mlp_backward(c.tape_g, dgraw)
        gh, dxa_h = dc.mlp_backward(c.tape_h, dbp)
        du = np.concatenate([da + dxa_g + dxa_h, db], axis=1)
        g = np.empty_like(du)
        g[:, layer.perm] = du
        per_layer.append(dc.flatten_grads(gg) + dc.flatten_grads(gh))
    grads = [x for layer_grads in reversed(per_layer) for x in layer_grads]
    return g / m.std, grads


def flow_inverse(m: FlowModel, z: np.ndarray) -> np.ndarray:
    """Invert the flow layer by layer: ``b = (z_b - h(a)) * exp(-g(a))``."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    u = z[None] if single else z
    if u.shape[1] != m.D:
        raise ShapeError(f"expected latent dimension {m.D}, got {u.shape[1]}")
    for layer in reversed(m.layers):
        d = layer.d
        a, bp = u[:, :d], u[:, d:]
        graw, _ = dc.mlp_forward(layer.g_net, a)
        hh, _ = dc.mlp_forward(layer.h_net, a)
        s = m.s_max * np.tanh(graw / m.s_max)
        v = np.concatenate([a, (bp - hh) * np.exp(-s)], axis=1)
        u = np.empty_like(v)
        u[:, layer.perm] = v
    X = u * m.std + m.mean
    return X[0] if single else X


def inverse_logdet(m: FlowModel, z: np.ndarray) -> np.ndarray:
    """log|det dX/dz| accumulated along the inverse path."""
    u = np.atleast_2d(np.asarray(z, dtype=np.float64))
    total = np.full(u.shape[0], np.sum(np.log(m.std)))
    for layer in reversed(m.layers):
        d = layer.d
        a, bp = u[:, :d], u[:, d:]
        graw, _ = dc.mlp_forward(layer.g_net, a)
        hh, _ = dc.mlp_forward(layer.h_net, a)
        s = m.s_max * np.tanh(graw / m.s_max)
        total -= s.sum(axis=1)
        v = np.concatenate([a, (bp - hh) * np.exp(-s)], axis=1)
        u = np.empty_like(v)
        u[:, layer.perm] = v
    return total


def log_prob(m: FlowModel, X: np.ndarray):
    """``-D/2 log(2 pi) - |f(X)|^2 / 2 + logdet`` for (D,) or (N, D) input."""
    z, logdet = flow_forward(m, X)
    return -0.5 * m.D * LOG_2PI - 0.5 * np.sum(np.square(z), axis=-1) + logdet


def sample(m: FlowModel, rng: np.random.Generator, count: int) -> np.ndarray:
    return flow_inverse(m, rng.standard_normal((count, m.D)))


def nll_and_grads(m: FlowModel, X: np.ndarray):
    """Mean negative log-likelihood and its gradients w.r.t. ``m.params()``."""
    z, logdet, caches = flow_forward_cached(m, X)
    n = X.shape[0]
    lp = -0.5 * m.D * LOG_2PI - 0.5 * np.sum(z * z, axis=1) + logdet
    _, grads = flow_backward(m, caches, z / n, np.full(n, -1.0 / n))
    return float(-lp.mean()), grads


# ---------------------------------------------------------------------------
# Training


@dataclass
class FlowTrainConfig:
    n_layers: int = 8
    hidden: int = 64
    depth: int = 2
    s_max: float = 5.0
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int | None = 256
    holdout: float = 0.1
    standardize: bool = True
    seed: int = 0
    weight: float = 1.0  # lambda_nf; the flow is trained on its own so it only scales the loss
    divergence_nll: float = 1e6


@dataclass
class FlowTrainResult:
    model: FlowModel
    adam: dc.AdamState
    history: list[dict]
    initial_holdout_nll: float
    final_holdout_nll: float


def train_flow(poses: np.ndarray, config: FlowTrainConfig = FlowTrainConfig(), *,
               model: FlowModel | None = None, adam: dc.AdamState | None = None) -> FlowTrainResult:
    """Fit a flow to (N, D) pose vectors by minimizing the mean NLL with Adam.

    A seeded ``holdout`` fraction is kept aside to report held-out NLL.  Passing
    ``model``/``adam`` resumes a previous run.

    Raises:
        NonFiniteError: the training NLL diverged.
    """
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[0] < 1:
        raise ShapeError("need at least one pose vector")
    rng = np.random.default_rng(config.seed)
    n = poses.shape[0]
    idx = rng.permutation(n)
    n_hold = int(round(config.holdout * n)) if n > 1 else 0
    hold, train = poses[idx[:n_hold]], poses[idx[n_hold:]]
    if model is None:
        model = init_flow(poses.shape[1], config.n_layers, config.hidden, config.depth, config.seed, config.s_max)
        if config.standardize:
            model.mean = train.mean(axis=0)
            model.std = np.maximum(train.std(axis=0), 1e-6)
    if adam is None:
        adam = dc.AdamState.for_params(model.params(), lr=config.lr)

    def holdout_nll():
        return float(-np.mean(log_prob(model, hold))) if n_hold else float("nan")

    init_hold = holdout_nll()
    history = []
    bs = config.batch_size or train.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(train.shape[0])
        losses = []
        for start in range(0, train.shape[0], bs):
            batch = train[order[start : start + bs]]
            nll, grads = nll_and_grads(model, batch)
            if not math.isfinite(nll) or nll > config.divergence_nll:
                raise NonFiniteError("flow NLL", f"epoch {epoch}, value {nll}")
            model.set_params(dc.adam_step(adam, model.params(), [config.weight * g for g in grads]))
            losses.append(nll * batch.shape[0])
        rec = {"epoch": epoch, "step": adam.step, "train_nll": sum(losses) / train.shape[0]}
        if n_hold:
            rec["holdout_nll"] = holdout_nll()
        history.append(rec)
        log.debug("flow epoch %d: %s", epoch, rec)
    final = holdout_nll()
    log.info("flow holdout NLL %.4f -> %.4f (margin %.4f)", init_hold, final, init_hold - final)
    model.meta = {"seed": config.seed, "holdout_nll_initial": init_hold, "holdout_nll_final": final}
    return FlowTrainResult(model, adam, history, init_hold, final)


# ---------------------------------------------------------------------------
# Persistence


def save_flow(path: str | Path, m: FlowModel, adam: dc.AdamState | None = None, extra: dict | None = None) -> None:
    blocks = {"norm.mean": m.mean, "norm.std": m.std}
    layers_meta = []
    for i, l in enumerate(m.layers):
        blocks[f"layer{i}.perm"] = l.perm.astype(np.float64)
        blocks.update(dc.mlp_blocks(l.g_net, f"layer{i}.g"))
        blocks.update(dc.mlp_blocks(l.h_net, f"layer{i}.h"))
        layers_meta.append({"d": l.d, "g": dc.mlp_spec(l.g_net), "h": dc.mlp_spec(l.h_net)})
    meta = {
        "kind": "flow", "D": m.D, "s_max": m.s_max, "layers": layers_meta,
        "normalization": {"mean": m.mean.tolist(), "std": m.std.tolist()},
        "model_meta": m.meta, "extra": extra or {},
    }
    if adam is not None:
        meta["adam"] = dc.adam_header(adam)
        blocks.update(dc.adam_blocks(adam))
    dc.save_checkpoint(path, meta, blocks)


def load_flow(path: str | Path):
    """Returns ``(model, adam_or_None, meta)``."""
    meta, blocks = dc.load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise ValueError(f"{path} is not a flow checkpoint")
    layers = [
        CouplingLayer(
            blocks[f"layer{i}.perm"].astype(np.int64), lm["d"],
            dc.mlp_from_blocks(lm["g"], blocks, f"layer{i}.g"),
            dc.mlp_from_blocks(lm["h"], blocks, f"layer{i}.h"),
        )
        for i, lm in enumerate(meta["layers"])
    ]
    m = FlowModel(layers, meta["D"], blocks["norm.mean"].copy(), blocks["norm.std"].copy(), meta["s_max"], meta["model_meta"])
    adam = dc.adam_from_checkpoint(meta["adam"], blocks) if "adam" in meta else None
    return m, adam, meta
