"""Mixture-density baseline over pose rotations.

The trunk emits M mixture means over ``[theta, gamma]`` plus one shared
``log_beta`` and ``t``.  Mixture weights and the isotropic variance are fixed.
Training adds the full single-hypothesis objective evaluated at the "virtual
prediction", the posterior-weighted average of the means, to the mixture NLL.
At test time n distinct modes are drawn uniformly and expanded through FK.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import kinematics as kin
from .data import Dataset, Observation
from .errors import NonFiniteError
from .losses import LossCurveWriter, LossWeights, total_loss
from .regressor import HypothesisSet, _lr_at, ground_truth, mean_params, observation_features

log = logging.getLogger(__name__)


@dataclass
class MixtureParams:
    """Means (…, M, D) with a fixed isotropic variance and fixed weights."""

    mu: np.ndarray
    sigma: float = 1e-3  # variance
    alpha: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        M = self.mu.shape[-2]
        if self.alpha is None:
            self.alpha = np.full(M, 1.0 / M)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.alpha.shape != (M,) or np.any(self.alpha < 0) or abs(self.alpha.sum() - 1.0) > 1e-12:
            raise ValueError("alpha must be M nonnegative weights summing to 1")

    @property
    def M(self) -> int:
        return self.mu.shape[-2]


def log_components(mix: MixtureParams, x: np.ndarray) -> np.ndarray:
    """log(alpha_m N(x; mu_m, sigma I)) for x (…, D) -> (…, M)."""
    D = mix.mu.shape[-1]
    r = x[..., None, :] - mix.mu
    return (np.log(mix.alpha) - 0.5 * np.sum(r * r, axis=-1) / mix.sigma
            - 0.5 * D * math.log(2.0 * math.pi * mix.sigma))


def posterior(mix: MixtureParams, x: np.ndarray) -> np.ndarray:
    a = log_components(mix, x)
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def virtual_prediction(mix: MixtureParams, x_gt: np.ndarray) -> np.ndarray:
    """Posterior-weighted mean of the mixture means given the target ``x_gt``."""
    return np.sum(posterior(mix, x_gt)[..., None] * mix.mu, axis=-2)


def mixture_nll(mix: MixtureParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example negative log-likelihood and its gradient w.r.t. ``mu``."""
    a = log_components(mix, x)
    amax = a.max(axis=-1, keepdims=True)
    lse = amax[..., 0] + np.log(np.sum(np.exp(a - amax), axis=-1))
    r = np.exp(a - lse[..., None])
    dmu = -r[..., None] * (x[..., None, :] - mix.mu) / mix.sigma
    return -lse, dmu


def virtual_backward(mix: MixtureParams, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``mu`` of ``<g, virtual_prediction(mix, x)>``."""
    r = posterior(mix, x)
    xhat = np.sum(r[..., None] * mix.mu, axis=-2)
    gm = np.einsum("...md,...d->...m", mix.mu, g) - np.sum(g * xhat, axis=-1)[..., None]
    return r[..., None] * g[..., None, :] + (r * gm)[..., None] * (x[..., None, :] - mix.mu) / mix.sigma


@dataclass
class MDNConfig:
    M: int = 25
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 1e-3
    lr_final: float | None = 1e-4
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    head_init_std: float = 1e-2
    sigma: float = 1e-3
    nll_weight: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.M < 1:
            raise ValueError("M must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _rot_index(skel: kin.Skeleton) -> np.ndarray:
    sl = kin.param_slices(skel)
    P = kin.n_params(skel)
    return np.r_[np.arange(P)[sl["theta"]], np.arange(P)[sl["gamma"]]]


@dataclass
class MDNModel:
    layers: list[dc.DenseLayer]
    M: int
    skel: kin.Skeleton
    cam: kin.Camera
    sigma: float = 1e-3
    joint_map: np.ndarray | None = None

    @property
    def P(self) -> int:
        return kin.n_params(self.skel)

    @property
    def D(self) -> int:
        return 3 * self.skel.n_bones + 3

    def params(self) -> list[np.ndarray]:
        return dc.mlp_params(self.layers)

    def set_params(self, params) -> None:
        dc.set_mlp_params(self.layers, params)

    def split(self, out: np.ndarray):
        """Raw output (N, M*D + B + 3) -> means (N, M, D), log_beta (N, B), t (N, 3)."""
        n, MD, B = out.shape[0], self.M * self.D, self.skel.n_bones
        return out[:, :MD].reshape(n, self.M, self.D), out[:, MD : MD + B], out[:, MD + B :]

    def forward(self, feats: np.ndarray):
        out, tape = dc.mlp_forward(self.layers, feats)
        return self.split(out), tape

    def mode_params(self, keypoints, vis, context) -> np.ndarray:
        """Per-mode parameter tuples (N, M, P) = (mu_m, shared log_beta, shared t)."""
        (mu, lb, t), _ = self.forward(observation_features(keypoints, vis, context))
        return assemble(mu, lb, t, self.skel)

    def joints_for(self, params: np.ndarray) -> np.ndarray:
        sl = kin.param_slices(self.skel)
        flat = params.reshape(-1, self.P)
        S, _ = kin.fk_forward(flat[:, sl["theta"]], flat[:, sl["log_beta"]], flat[:, sl["gamma"]], self.skel)
        X = kin.joint_regressor(S, self.joint_map)
        return X.reshape(params.shape[:-1] + X.shape[-2:])

    def predict(self, obs: Observation, M: int | None = None) -> HypothesisSet:
        kp = obs.keypoints
        p = self.mode_params(kp.y[None], kp.vis[None], np.asarray(obs.context)[None])[0][: M or self.M]
        return HypothesisSet(p, self.joints_for(p))

    def predict_dataset(self, ds: Dataset, M: int | None = None, chunk: int = 1024):
        M = M or self.M
        ps = [self.mode_params(ds.keypoints[s : s + chunk], ds.vis[s : s + chunk], ds.context[s : s + chunk])[:, :M]
              for s in range(0, len(ds), chunk)]
        p = np.concatenate(ps) if ps else np.zeros((0, M, self.P))
        return p, self.joints_for(p)

    def hypothesis_sets(self, ds: Dataset, ns, seed: int = 0) -> dict[int, np.ndarray]:
        """Per-observation uniformly drawn distinct modes for every n in ``ns``: {n: (N, n, K, 3)}."""
        _, joints = self.predict_dataset(ds)
        out = {}
        for n in ns:
            sel = np.stack([choose_modes(self.M, n, seed, i) for i in range(len(ds))]) if len(ds) else \
                np.zeros((0, n), dtype=np.int64)
            out[n] = np.take_along_axis(joints, sel[:, :, None, None], axis=1)
        return out


def assemble(mu: np.ndarray, log_beta: np.ndarray, t: np.ndarray, skel: kin.Skeleton) -> np.ndarray:
    """Broadcast shared heads next to (…, M, D) rotation means -> (…, M, P)."""
    sl = kin.param_slices(skel)
    M = mu.shape[-2]
    out = np.zeros(mu.shape[:-1] + (kin.n_params(skel),))
    nt = 3 * skel.n_bones
    out[..., sl["theta"]] = mu[..., :nt]
    out[..., sl["gamma"]] = mu[..., nt:]
    out[..., sl["log_beta"]] = np.repeat(log_beta[..., None, :], M, axis=-2)
    out[..., sl["t"]] = np.repeat(t[..., None, :], M, axis=-2)
    return out


def choose_modes(M: int, n: int, seed: int, index: int = 0) -> np.ndarray:
    """n distinct mode indices drawn uniformly, seeded by ``(seed, index)``."""
    if not 1 <= n <= M:
        raise ValueError(f"n = {n} must lie in [1, M = {M}]")
    return np.random.default_rng([seed, index]).choice(M, size=n, replace=False)


def mdn_hypotheses(model: MDNModel, obs: Observation, n: int, seed: int = 0, index: int = 0) -> np.ndarray:
    """n poses (n, K, 3) from n distinct uniformly drawn modes."""
    sel = choose_modes(model.M, n, seed, index)
    return model.predict(obs).joints[sel]


def init_mdn(config: MDNConfig, n_in: int, init_params: np.ndarray, skel: kin.Skeleton,
             cam: kin.Camera) -> MDNModel:
    rng = np.random.default_rng(config.seed)
    sl = kin.param_slices(skel)
    sizes = [n_in, *config.hidden]
    layers = dc.build_mlp(rng, sizes, hidden="tanh", last="tanh") if config.hidden else []
    rot = init_params[_rot_index(skel)]
    bias = np.r_[np.tile(rot, config.M), init_params[sl["log_beta"]], init_params[sl["t"]]]
    W = rng.normal(0.0, config.head_init_std, size=(bias.size, sizes[-1]))
    b = bias + rng.normal(0.0, config.head_init_std, size=bias.size)
    layers.append(dc.DenseLayer(W, b, "identity"))
    return MDNModel(layers, config.M, skel, cam, config.sigma)


@dataclass
class MDNResult:
    total: float
    nll: float
    terms: dict
    grad_mu: np.ndarray
    grad_log_beta: np.ndarray
    grad_t: np.ndarray


def mdn_objective(model: MDNModel, mu, log_beta, t, gt, weights: LossWeights, nll_weight: float = 1.0,
                  need_grad: bool = True) -> MDNResult:
    """Mixture NLL of the ground-truth rotations plus the M = 1 total loss at the virtual prediction."""
    skel = model.skel
    sl = kin.param_slices(skel)
    n = mu.shape[0]
    x_gt = np.concatenate([gt.theta, gt.gamma], axis=1)
    mix = MixtureParams(mu, model.sigma)
    nll, dmu_nll = mixture_nll(mix, x_gt)
    xhat = virtual_prediction(mix, x_gt)
    hyp = assemble(xhat[:, None], log_beta, t, skel)
    res = total_loss(hyp, gt, weights, skel, model.cam, model.joint_map, need_grad)
    L_nll = float(nll.mean())
    if not math.isfinite(L_nll):
        raise NonFiniteError("loss term L_nll", repr(L_nll))
    total = nll_weight * L_nll + res.total
    terms = {"nll": L_nll, **res.terms}
    if not need_grad:
        return MDNResult(total, L_nll, terms, None, None, None)
    g = res.grad[:, 0]
    g_rot = g[:, _rot_index(skel)]
    dmu = nll_weight * dmu_nll / n + virtual_backward(mix, x_gt, g_rot)
    return MDNResult(total, L_nll, terms, dmu, g[:, sl["log_beta"]], g[:, sl["t"]])


@dataclass
class MDNTrainResult:
    model: MDNModel
    adam: dc.AdamState
    history: list[dict]
    epochs_done: int


def train_mdn(ds: Dataset, config: MDNConfig, *, cam: kin.Camera | None = None, skel: kin.Skeleton | None = None,
              resume: MDNTrainResult | None = None, curve: LossCurveWriter | None = None,
              on_epoch: Callable[[dict], None] | None = None, stop_epoch: int | None = None) -> MDNTrainResult:
    """Adam on minibatches of the combined objective; mirrors ``regressor.train``."""
    skel = skel or kin.default_skeleton()
    cam = cam or kin.Camera()
    n = len(ds)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    feats = observation_features(ds.keypoints, ds.vis, ds.context)
    if resume is None:
        model = init_mdn(config, feats.shape[1], mean_params(ds), skel, cam)
        adam = dc.AdamState.for_params(model.params(), lr=config.lr)
        start, history = 0, []
    else:
        model, adam, start, history = resume.model, resume.adam, resume.epochs_done, list(resume.history)
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    for epoch in range(start, end):
        adam.lr = _lr_at(config, epoch)
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(n)  # resume-exact
        sums = {}
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            (mu, lb, t), tape = model.forward(feats[idx])
            r = mdn_objective(model, mu, lb, t, ground_truth(ds, idx, model.joint_map), config.weights,
                              config.nll_weight)
            up = np.concatenate([r.grad_mu.reshape(len(idx), -1), r.grad_log_beta, r.grad_t], axis=1)
            grads, _ = dc.mlp_backward(tape, up)
            model.set_params(dc.adam_step(adam, model.params(), dc.flatten_grads(grads)))
            for k, v in {**r.terms, "total": r.total}.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            if curve is not None:
                curve.write(adam.step, {**r.terms, "total": r.total})
        rec = {"epoch": epoch, "step": adam.step, "lr": adam.lr, **{k: v / n for k, v in sums.items()}}
        history.append(rec)
        log.info("mdn epoch %d total %.4f nll %.4f", epoch, rec["total"], rec["nll"])
        if on_epoch is not None:
            on_epoch(rec)
    return MDNTrainResult(model, adam, history, max(end, start))


def save_mdn(path: str | Path, result: MDNTrainResult, config: MDNConfig) -> None:
    m = result.model
    blocks = dc.mlp_blocks(m.layers, "trunk")
    blocks.update(dc.adam_blocks(result.adam))
    meta = {
        "kind": "mdn", "M": m.M, "sigma": m.sigma, "layers": dc.mlp_spec(m.layers), "config": config.to_dict(),
        "seed": config.seed, "step": result.adam.step, "epochs_done": result.epochs_done,
        "skeleton": {"parents": list(m.skel.parents), "offsets": m.skel.offsets.tolist()},
        "camera": {"focal": m.cam.focal, "principal": list(m.cam.principal)},
        "adam": dc.adam_header(result.adam), "history": result.history,
    }
    dc.save_checkpoint(path, meta, blocks)


def load_mdn(path: str | Path) -> tuple[MDNTrainResult, MDNConfig]:
    meta, blocks = dc.load_checkpoint(path)
    if meta.get("kind") != "mdn":
        raise ValueError(f"{path} is not an MDN checkpoint")
    skel = kin.Skeleton.from_json(meta["skeleton"])
    cam = kin.Camera(meta["camera"]["focal"], tuple(meta["camera"]["principal"]))
    model = MDNModel(dc.mlp_from_blocks(meta["layers"], blocks, "trunk"), meta["M"], skel, cam, meta["sigma"])
    adam = dc.adam_from_checkpoint(meta["adam"], blocks)
    return MDNTrainResult(model, adam, meta["history"], meta["epochs_done"]), MDNConfig(**meta["config"])
