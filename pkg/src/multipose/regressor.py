"""Multi-hypothesis regressor G: masked 2D keypoints -> M stacked body-parameter tuples.

A tanh MLP trunk reads the crop-normalized keypoints, their visibility mask and
the crop context, and its last layer emits ``M * P`` numbers, one
``[theta, log_beta, gamma, t]`` block per hypothesis.
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
from .losses import GroundTruth, LossCurveWriter, LossWeights, total_loss

log = logging.getLogger(__name__)


@dataclass
class RegressorConfig:
    M: int = 25
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 1e-3
    lr_final: float | None = 1e-4  # cosine decay target; None keeps lr constant
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    head_init_std: float = 1e-2
    weights: LossWeights = field(default_factory=LossWeights)
    reproj_all: bool = True  # False disables the all-hypothesis reprojection term

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.M < 1:
            raise ValueError("M must be >= 1")

    def effective_weights(self) -> LossWeights:
        if self.reproj_all:
            return self.weights
        return LossWeights(**{**asdict(self.weights), "ri": 0.0})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def observation_features(keypoints: np.ndarray, vis: np.ndarray, context: np.ndarray) -> np.ndarray:
    """(N, K, 2), (N, K), (N, 3) -> (N, 3K + 3) network input; hidden keypoints read as zero."""
    keypoints = np.where(np.asarray(vis, dtype=bool)[..., None], keypoints, 0.0)
    n = keypoints.shape[0]
    return np.concatenate([keypoints.reshape(n, -1), np.asarray(vis, dtype=np.float64), context], axis=1)


@dataclass
class HypothesisSet:
    """M hypotheses for one observation: parameters (M, P), joints (M, K, 3), optional prior log-densities."""

    params: np.ndarray
    joints: np.ndarray
    log_prior: np.ndarray | None = None

    def __post_init__(self):
        if self.params.shape[0] < 1 or self.joints.shape[0] != self.params.shape[0]:
            raise ValueError("a hypothesis set needs M >= 1 matching params and joints")

    @property
    def M(self) -> int:
        return self.params.shape[0]

    def body_params(self, skel: kin.Skeleton) -> list[kin.BodyParams]:
        return [kin.BodyParams.from_vector(p, skel) for p in self.params]


@dataclass
class MultiHypothesisRegressor:
    layers: list[dc.DenseLayer]
    M: int
    skel: kin.Skeleton
    cam: kin.Camera
    joint_map: np.ndarray | None = None

    @property
    def P(self) -> int:
        return kin.n_params(self.skel)

    def params(self) -> list[np.ndarray]:
        return dc.mlp_params(self.layers)

    def set_params(self, params) -> None:
        dc.set_mlp_params(self.layers, params)

    def forward(self, feats: np.ndarray):
        out, tape = dc.mlp_forward(self.layers, feats)
        return out.reshape(feats.shape[0], self.M, self.P), tape

    def predict_params(self, keypoints, vis, context, M: int | None = None) -> np.ndarray:
        """Batched hypotheses (N, M, P) for observation arrays."""
        M = self.M if M is None else M
        if not 1 <= M <= self.M:
            raise ValueError(f"requested {M} hypotheses, model has {self.M} heads")
        out, _ = self.forward(observation_features(keypoints, vis, context))
        return out[:, :M]

    def joints_for(self, params: np.ndarray) -> np.ndarray:
        """FK + joint regressor for (..., P) parameter blocks -> (..., K', 3)."""
        sl = kin.param_slices(self.skel)
        flat = params.reshape(-1, self.P)
        S, _ = kin.fk_forward(flat[:, sl["theta"]], flat[:, sl["log_beta"]], flat[:, sl["gamma"]], self.skel)
        X = kin.joint_regressor(S, self.joint_map)
        return X.reshape(params.shape[:-1] + X.shape[-2:])

    def predict(self, obs: Observation, M: int | None = None) -> HypothesisSet:
        kp = obs.keypoints
        params = self.predict_params(kp.y[None], kp.vis[None], np.asarray(obs.context)[None], M)[0]
        return HypothesisSet(params, self.joints_for(params))

    def predict_dataset(self, ds: Dataset, M: int | None = None, chunk: int = 1024):
        """Hypothesis parameters (N, M, P) and joints (N, M, K, 3) for every record."""
        parts_p, parts_x = [], []
        for s in range(0, len(ds), chunk):
            p = self.predict_params(ds.keypoints[s : s + chunk], ds.vis[s : s + chunk], ds.context[s : s + chunk], M)
            parts_p.append(p)
            parts_x.append(self.joints_for(p))
        if not parts_p:
            M = self.M if M is None else M
            return np.zeros((0, M, self.P)), np.zeros((0, M, self.skel.K, 3))
        return np.concatenate(parts_p), np.concatenate(parts_x)


def init_regressor(config: RegressorConfig, n_in: int, init_params: np.ndarray,
                   skel: kin.Skeleton, cam: kin.Camera) -> MultiHypothesisRegressor:
    """Xavier trunk; output heads start at ``init_params`` plus N(0, head_init_std^2) noise."""
    rng = np.random.default_rng(config.seed)
    P = kin.n_params(skel)
    sizes = [n_in, *config.hidden]
    layers = dc.build_mlp(rng, sizes, hidden="tanh", last="tanh") if config.hidden else []
    n_last = sizes[-1]
    W = rng.normal(0.0, config.head_init_std, size=(config.M * P, n_last))
    b = np.tile(init_params, config.M) + rng.normal(0.0, config.head_init_std, size=config.M * P)
    layers.append(dc.DenseLayer(W, b, "identity"))
    return MultiHypothesisRegressor(layers, config.M, skel, cam)


def ground_truth(ds: Dataset, idx: np.ndarray, joint_map: np.ndarray | None = None) -> GroundTruth:
    return GroundTruth(
        X=kin.joint_regressor(ds.X[idx], joint_map), Y=ds.Y[idx], vis=ds.vis[idx],
        theta=ds.theta[idx], log_beta=ds.log_beta[idx], gamma=ds.gamma[idx], S=ds.X[idx],
    )


def mean_params(ds: Dataset) -> np.ndarray:
    return ds.params_matrix().mean(axis=0)


@dataclass
class TrainResult:
    model: MultiHypothesisRegressor
    adam: dc.AdamState
    history: list[dict]
    m_star_hist: np.ndarray
    epochs_done: int


def _lr_at(config: RegressorConfig, epoch: int) -> float:
    if config.lr_final is None or config.epochs <= 1:
        return config.lr
    frac = epoch / (config.epochs - 1)
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + math.cos(math.pi * frac))


def train(ds: Dataset, config: RegressorConfig, flow=None, *, cam: kin.Camera | None = None,
          skel: kin.Skeleton | None = None, resume: TrainResult | None = None,
          curve: LossCurveWriter | None = None,
          on_epoch: Callable[[dict], None] | None = None, stop_epoch: int | None = None) -> TrainResult:
    """Minimize the weighted total loss with Adam over shuffled minibatches.

    ``flow``, when given, is only used to log the mean prior log-density of the
    hypotheses after each epoch.  ``resume`` continues from a previous result
    (model, optimizer state and epoch counter); ``stop_epoch`` ends the run early
    without changing the learning-rate schedule, so stop + resume equals one run.

    Raises:
        NonFiniteError: a loss term became NaN/inf (named in the message).
    """
    skel = skel or kin.default_skeleton()
    cam = cam or kin.Camera()
    n = len(ds)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    feats = observation_features(ds.keypoints, ds.vis, ds.context)
    if resume is None:
        model = init_regressor(config, feats.shape[1], mean_params(ds), skel, cam)
        adam = dc.AdamState.for_params(model.params(), lr=config.lr)
        start_epoch, history = 0, []
    else:
        model, adam, start_epoch, history = resume.model, resume.adam, resume.epochs_done, list(resume.history)
    weights = config.effective_weights()
    m_hist = np.zeros(model.M, dtype=np.int64)
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    for epoch in range(start_epoch, end):
        adam.lr = _lr_at(config, epoch)
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)  # resume-exact
        sums = {}
        m_hist = np.zeros(model.M, dtype=np.int64)
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            hyp, tape = model.forward(feats[idx])
            res = total_loss(hyp, ground_truth(ds, idx, model.joint_map), weights, skel, cam, model.joint_map)
            grads, _ = dc.mlp_backward(tape, res.grad.reshape(len(idx), -1))
            model.set_params(dc.adam_step(adam, model.params(), dc.flatten_grads(grads)))
            m_hist += np.bincount(res.m_star, minlength=model.M)
            for k, v in res.terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            sums["total"] = sums.get("total", 0.0) + res.total * len(idx)
            if curve is not None:
                curve.write(adam.step, {**res.terms, "total": res.total})
        rec = {"epoch": epoch, "step": adam.step, "lr": adam.lr, **{k: v / n for k, v in sums.items()},
               "max_share": float(m_hist.max() / n), "dead_heads": int(np.sum(m_hist == 0))}
        if flow is not None:
            from .flow import log_prob, pose_vectors

            _, joints = model.predict_dataset(ds.subset(np.arange(min(n, 256))))
            rec["mean_log_prior"] = float(np.mean(log_prob(flow, pose_vectors(joints).reshape(-1, flow.D))))
        history.append(rec)
        log.info("epoch %d total %.4f best %.4f ri %.4f dead %d", epoch, rec["total"], rec["best"], rec["ri"],
                 rec["dead_heads"])
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(model, adam, history, m_hist, max(end, start_epoch))


def m_star_histogram(model: MultiHypothesisRegressor, ds: Dataset) -> np.ndarray:
    _, joints = model.predict_dataset(ds)
    X = kin.joint_regressor(ds.X, model.joint_map)
    d = np.linalg.norm((joints - X[:, None]).reshape(len(ds), model.M, -1), axis=2)
    return np.bincount(np.argmin(d, axis=1), minlength=model.M)


# ---------------------------------------------------------------------------
# Persistence


def save_regressor(path: str | Path, result: TrainResult, config: RegressorConfig) -> None:
    m = result.model
    blocks = dc.mlp_blocks(m.layers, "trunk")
    if m.joint_map is not None:
        blocks["joint_map"] = m.joint_map
    blocks.update(dc.adam_blocks(result.adam))
    meta = {
        "kind": "regressor", "M": m.M, "layers": dc.mlp_spec(m.layers), "config": config.to_dict(),
        "seed": config.seed, "step": result.adam.step, "epochs_done": result.epochs_done,
        "skeleton": {"parents": list(m.skel.parents), "offsets": m.skel.offsets.tolist()},
        "camera": {"focal": m.cam.focal, "principal": list(m.cam.principal)},
        "adam": dc.adam_header(result.adam), "history": result.history,
        "m_star_hist": result.m_star_hist.tolist(),
    }
    dc.save_checkpoint(path, meta, blocks)


def load_regressor(path: str | Path) -> tuple[TrainResult, RegressorConfig]:
    meta, blocks = dc.load_checkpoint(path)
    if meta.get("kind") != "regressor":
        raise ValueError(f"{path} is not a regressor checkpoint")
    skel = kin.Skeleton.from_json(meta["skeleton"])
    cam = kin.Camera(meta["camera"]["focal"], tuple(meta["camera"]["principal"]))
    model = MultiHypothesisRegressor(dc.mlp_from_blocks(meta["layers"], blocks, "trunk"), meta["M"], skel, cam,
                                     blocks.get("joint_map"))
    adam = dc.adam_from_checkpoint(meta["adam"], blocks)
    result = TrainResult(model, adam, meta["history"], np.asarray(meta["m_star_hist"], dtype=np.int64),
                         meta["epochs_done"])
    return result, RegressorConfig(**meta["config"])
