import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from multipose import kinematics as kin
from multipose import pipeline

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

GRAD_SEEDS = (0, 1, 2, 3, 4)
ACCEPTANCE_LINES: list[str] = []


def verdict(criterion: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def skel():
    return kin.default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(rng, skel, n=1, scale=0.6):
    theta = rng.normal(0, scale, size=(n, skel.n_theta))
    log_beta = rng.normal(0, 0.1, size=(n, skel.n_bones))
    gamma = rng.normal(0, scale, size=(n, 3))
    t = np.column_stack([rng.normal(0, 0.2, size=(n, 2)), rng.uniform(5, 7, size=n)])
    return theta, log_beta, gamma, t


VARIANTS = {"full": {}, "noreproj": {"reproj_all": False}, "m1": {"M": 1}, "m8": {"M": 8}}


class Lab:
    """Full-scale artifacts (10^4 train / 10^3 test), built on first use and shared by the session.

    Every getter returns a ``pipeline.Timed`` so callers can also check runtimes.
    """

    def __init__(self):
        self._memo = {}

    def _get(self, key, fn, *args, **kwargs):
        if key not in self._memo:
            self._memo[key] = pipeline.timed(fn, *args, **kwargs)
        return self._memo[key]

    def config(self, seed):
        return pipeline.ExperimentConfig(seed=seed)

    def data(self, seed):
        return self._get(("data", seed), pipeline.make_datasets, self.config(seed))

    def flow(self, seed):
        return self._get(("flow", seed), pipeline.train_prior, self.data(seed).value.train, self.config(seed))

    def model(self, seed, variant="full"):
        return self._get(("model", seed, variant), pipeline.train_model, self.data(seed).value.train,
                         self.config(seed), **VARIANTS[variant])

    def mdn(self, seed):
        return self._get(("mdn", seed), pipeline.train_baseline, self.data(seed).value.train, self.config(seed))

    def rows(self, seed, which):
        """Test-set report rows for ``full``, ``uniform``, ``noreproj`` or ``mdn``."""
        model = {"full": lambda: self.model(seed), "uniform": lambda: self.model(seed),
                 "noreproj": lambda: self.model(seed, "noreproj"), "mdn": lambda: self.mdn(seed)}[which]()
        return self._get(("rows", seed, which), pipeline.evaluate, model.value.model, self.flow(seed).value.model,
                         self.data(seed).value.test, self.config(seed), uniform=which == "uniform")


@pytest.fixture(scope="session")
def lab():
    return Lab()
