"""End-to-end experiment plumbing shared by the CLI and the acceptance suite.

One root seed drives everything: dataset generation, masking, flow training,
regressor/MDN training and quantization all receive seeds derived from it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import baseline_mdn as bm
from . import data
from . import flow as fl
from . import metrics
from . import regressor as rg

log = logging.getLogger(__name__)


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent 32-bit child seeds of a root seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 10_000
    n_test: int = 1_000
    gen: data.GenConfig = field(default_factory=data.GenConfig)
    flow: fl.FlowTrainConfig = field(default_factory=fl.FlowTrainConfig)
    model: rg.RegressorConfig = field(default_factory=rg.RegressorConfig)
    mdn: bm.MDNConfig = field(default_factory=bm.MDNConfig)
    ns: tuple[int, ...] = metrics.DEFAULT_NS


@dataclass
class Datasets:
    train: data.Dataset
    test: data.Dataset


def make_datasets(cfg: ExperimentConfig) -> Datasets:
    """Masked train and test sets from disjoint derived seeds."""
    s = derive_seeds(cfg.seed, 4)
    train = data.apply_ambiguity(data.generate(replace(cfg.gen, count=cfg.n_train, seed=s[0])), s[1],
                                 cfg.gen.crop_padding)
    test = data.apply_ambiguity(data.generate(replace(cfg.gen, count=cfg.n_test, seed=s[2])), s[3],
                                cfg.gen.crop_padding)
    return Datasets(train, test)


def train_prior(train: data.Dataset, cfg: ExperimentConfig) -> fl.FlowTrainResult:
    return fl.train_flow(fl.pose_vectors(train.X), replace(cfg.flow, seed=derive_seeds(cfg.seed, 5)[4]))


def train_model(train: data.Dataset, cfg: ExperimentConfig, **overrides) -> rg.TrainResult:
    return rg.train(train, replace(cfg.model, seed=derive_seeds(cfg.seed, 6)[5], **overrides))


def train_baseline(train: data.Dataset, cfg: ExperimentConfig, **overrides) -> bm.MDNTrainResult:
    return bm.train_mdn(train, replace(cfg.mdn, seed=derive_seeds(cfg.seed, 7)[6], **overrides))


def quantize_seed(seed: int) -> int:
    """Seed the CLI and the acceptance suite both use for quantization restarts."""
    return derive_seeds(seed, 8)[7]


def evaluate(model, flow, test: data.Dataset, cfg: ExperimentConfig, **kwargs) -> list[metrics.ReportRow]:
    return metrics.evaluate(model, flow, test, cfg.ns, seed=quantize_seed(cfg.seed), **kwargs)


@dataclass
class Timed:
    value: object
    seconds: float


def timed(fn, *args, **kwargs) -> Timed:
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return Timed(out, time.perf_counter() - t0)


def mpjpe_table(rows) -> dict[int, float]:
    return {r.n: r.mean for r in rows if r.metric == "mpjpe"}


def two_mode_check(model, flow, test: data.Dataset, n: int = 2, frac: float = 0.25, seed: int = 0,
                   temperature: float = 1.0) -> np.ndarray:
    """Per-pair success flags for the exact two-mode subset of ``test``.

    Models with fewer than ``n`` heads contribute all their hypotheses.
    """
    pairs = data.two_mode_groups(test)
    if not pairs:
        return np.zeros(0, dtype=bool)
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    _, hyp = model.predict_dataset(test.subset(a))
    if hyp.shape[1] <= n:
        centers = hyp - hyp[:, :, :1]
    else:
        from .quantizer import quantize_batch

        centers = quantize_batch(hyp, flow, n, seed, temperature=temperature)
    return metrics.two_mode_recovery(centers, test.X[a], test.X[b], frac)
