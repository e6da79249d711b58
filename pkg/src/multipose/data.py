"""Synthetic ambiguous pose datasets.

Poses come from a mixture of full-body clusters.  Each cluster pairs an arm
configuration with a leg configuration, and every arm (leg) configuration
appears in exactly two clusters, so hiding the legs (arms) of an observation
leaves two plausible completions.  ``two_mode`` pairs make this exact: two
records share every visible keypoint and differ only in the hidden legs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kinematics as kin
from .errors import DataFormatError, SingularProjectionError

log = logging.getLogger(__name__)

STRATEGIES = ("arms_head", "legs", "head", "none")
STRATEGY_PROBS = (0.3, 0.3, 0.3, 0.1)

# joints hidden by each strategy on the default 17-joint skeleton
MASK_GROUPS = {
    "arms_head": (9, 10, 12, 13, 15, 16),
    "legs": (2, 3, 5, 6),
    "head": (9, 10),
    "none": (),
}
LEG_JOINTS = MASK_GROUPS["legs"]


def _check_groups() -> None:
    covered = set().union(*MASK_GROUPS.values())
    assert covered <= set(range(17)) and len(covered) < 17
    assert 0 not in covered
    assert set(MASK_GROUPS) == set(STRATEGIES)


_check_groups()


def _rot(joint_rots: dict[int, tuple[float, float, float]]) -> np.ndarray:
    theta = np.zeros((16, 3))
    for j, v in joint_rots.items():
        theta[j - 1] = v
    return theta.reshape(-1)


# Arm modes (left upper arm 12, forearm 13, right 15, 16).
ARM_MODES = {
    "arms_down": _rot({12: (0.0, 0.0, 0.15), 13: (0.3, 0.0, 0.0), 15: (0.0, 0.0, -0.15), 16: (0.3, 0.0, 0.0)}),
    "arms_forward": _rot({12: (1.5, 0.0, 0.0), 13: (0.2, 0.0, 0.0), 15: (1.5, 0.0, 0.0), 16: (0.2, 0.0, 0.0)}),
    "t_pose": _rot({12: (0.0, 0.0, 1.55), 13: (0.0, 0.0, 0.1), 15: (0.0, 0.0, -1.55), 16: (0.0, 0.0, -0.1)}),
    "arms_up": _rot({12: (0.0, 0.0, 2.7), 13: (0.0, 0.0, 0.3), 15: (0.0, 0.0, -2.7), 16: (0.0, 0.0, -0.3)}),
}
# Leg modes (right thigh 2, shin 3, left 5, 6).
LEG_MODES = {
    "stand": _rot({2: (0.0, 0.0, -0.05), 5: (0.0, 0.0, 0.05)}),
    "squat": _rot({2: (2.0, 0.0, -0.3), 3: (-2.2, 0.0, 0.0), 5: (2.0, 0.0, 0.3), 6: (-2.2, 0.0, 0.0)}),
    "kneel": _rot({2: (0.1, 0.0, 0.0), 3: (-1.9, 0.0, 0.0), 5: (0.1, 0.0, 0.0), 6: (-1.9, 0.0, 0.0)}),
    "kick": _rot({2: (1.5, 0.0, 0.0)}),
}
# cluster c = (arm mode c // 2, leg mode (c // 2 + c % 2) mod 4)
N_CLUSTERS = 8
_ARM_KEYS = tuple(ARM_MODES)
_LEG_KEYS = tuple(LEG_MODES)
_MODE_JOINTS = (12, 13, 15, 16) + LEG_JOINTS


def cluster_modes(c: int) -> tuple[str, str]:
    a = c // 2
    return _ARM_KEYS[a], _LEG_KEYS[(a + c % 2) % 4]


def leg_partner(c: int) -> int:
    """Cluster with the same arm mode and the other leg mode."""
    return c ^ 1


@dataclass(frozen=True)
class PoseDistribution:
    name: str = "clusters"
    mode_noise: float = 0.04  # rad, on the joints that define a mode
    torso_noise: float = 0.03
    head_noise: float = 0.05
    misc_noise: float = 0.03
    # one-sided so a mirrored yaw is never an equally likely explanation of the same 2D pose
    yaw_range: tuple[float, float] = (0.0, float(np.pi / 4))
    tilt_noise: float = 0.03
    body_scale_noise: float = 0.03
    bone_noise: float = 0.02
    t_xy_range: float = 0.3
    t_z_range: tuple[float, float] = (5.5, 7.0)

    def __post_init__(self):
        if self.name != "clusters":
            raise ValueError(f"unknown pose distribution {self.name!r}")
        object.__setattr__(self, "t_z_range", tuple(float(v) for v in self.t_z_range))
        object.__setattr__(self, "yaw_range", tuple(float(v) for v in self.yaw_range))


@dataclass(frozen=True)
class GenConfig:
    count: int = 1000
    seed: int = 0
    two_mode_fraction: float = 0.2  # fraction of records that belong to exact two-mode pairs
    two_mode_tau: float = 0.5  # minimum 3D separation of the two modes (flattened norm)
    pose_distribution: PoseDistribution = field(default_factory=PoseDistribution)
    camera_focal: float = 5.0
    crop_padding: float = 1.1

    def __post_init__(self):
        if isinstance(self.pose_distribution, dict):
            object.__setattr__(self, "pose_distribution", PoseDistribution(**self.pose_distribution))
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not 0.0 <= self.two_mode_fraction <= 1.0:
            raise ValueError("two_mode_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Dataset:
    """Column-oriented records; row ``i`` is one :class:`SampleRecord`."""

    theta: np.ndarray  # (N, 48)
    log_beta: np.ndarray  # (N, 16)
    gamma: np.ndarray  # (N, 3)
    t: np.ndarray  # (N, 3)
    X: np.ndarray  # (N, K, 3) ground-truth joints, root at origin
    Y: np.ndarray  # (N, K, 2) ground-truth projections before masking
    keypoints: np.ndarray  # (N, K, 2) crop-normalized observation, hidden joints zeroed
    vis: np.ndarray  # (N, K) bool
    context: np.ndarray  # (N, 3) crop centre x, y and half-size
    strategy: list[str]
    seed: np.ndarray  # (N,) per-unit seed
    cluster: np.ndarray  # (N,)
    pair: np.ndarray  # (N,) pair id, -1 for singletons

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = [v[i] for i in idx] if isinstance(v, list) else v[idx]
        return Dataset(**kw)

    def record(self, i: int) -> "SampleRecord":
        return SampleRecord(
            obs=Observation(kin.Keypoints2D(self.keypoints[i], self.vis[i]), self.context[i]),
            Y=kin.Keypoints2D(self.Y[i], np.ones(self.Y.shape[1], dtype=bool)),
            X=kin.Joints3D(self.X[i]),
            params=kin.BodyParams(self.theta[i], self.log_beta[i], self.gamma[i], self.t[i]),
            meta={"strategy": self.strategy[i], "seed": int(self.seed[i]),
                  "cluster": int(self.cluster[i]), "pair": int(self.pair[i])},
        )

    def params_matrix(self) -> np.ndarray:
        return np.concatenate([self.theta, self.log_beta, self.gamma, self.t], axis=1)

    @classmethod
    def empty(cls, K: int = 17) -> "Dataset":
        return cls(np.zeros((0, 3 * (K - 1))), np.zeros((0, K - 1)), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros((0, K, 3)), np.zeros((0, K, 2)), np.zeros((0, K, 2)), np.zeros((0, K), dtype=bool),
                   np.zeros((0, 3)), [], np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class Observation:
    keypoints: kin.Keypoints2D
    context: np.ndarray


@dataclass(frozen=True)
class SampleRecord:
    obs: Observation
    Y: kin.Keypoints2D
    X: kin.Joints3D
    params: kin.BodyParams
    meta: dict


# ---------------------------------------------------------------------------
# Generation


def _sample_params(rng: np.random.Generator, c: int, dist: PoseDistribution):
    arm, leg = cluster_modes(c)
    theta = ARM_MODES[arm] + LEG_MODES[leg]
    noise = rng.normal(0.0, dist.misc_noise, size=(16, 3))
    for j in _MODE_JOINTS:
        noise[j - 1] = rng.normal(0.0, dist.mode_noise, size=3)
    for j in (7, 8):
        noise[j - 1] = rng.normal(0.0, dist.torso_noise, size=3)
    for j in (9, 10):
        noise[j - 1] = rng.normal(0.0, dist.head_noise, size=3)
    theta = theta + noise.reshape(-1)
    log_beta = rng.normal(0.0, dist.body_scale_noise) + rng.normal(0.0, dist.bone_noise, size=16)
    gamma = np.array([rng.normal(0.0, dist.tilt_noise), rng.uniform(*dist.yaw_range),
                      rng.normal(0.0, dist.tilt_noise)])
    t = np.array([rng.uniform(-dist.t_xy_range, dist.t_xy_range), rng.uniform(-dist.t_xy_range, dist.t_xy_range),
                  rng.uniform(*dist.t_z_range)])
    return theta, log_beta, gamma, t


def _resample_legs(rng: np.random.Generator, theta: np.ndarray, c: int, dist: PoseDistribution) -> np.ndarray:
    _, leg = cluster_modes(c)
    out = theta.copy().reshape(16, 3)
    base = LEG_MODES[leg].reshape(16, 3)
    for j in LEG_JOINTS:
        out[j - 1] = base[j - 1] + rng.normal(0.0, dist.mode_noise, size=3)
    return out.reshape(-1)


def crop_normalize(Y: np.ndarray, vis: np.ndarray, padding: float = 1.1):
    """Normalize keypoints to a padded square box around the visible ones.

    Returns ``(keypoints, context)`` where hidden keypoints are zero and
    context is ``(centre_x, centre_y, half_size)``.
    """
    pts = Y[vis]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    centre = 0.5 * (lo + hi)
    half = max(0.5 * padding * float(np.max(hi - lo)), 1e-6)
    kp = np.where(vis[:, None], (Y - centre) / half, 0.0)
    return kp, np.array([centre[0], centre[1], half])


def generate(config: GenConfig, skel: kin.Skeleton | None = None) -> Dataset:
    """Sample ``config.count`` records; every record starts fully visible (strategy ``none``).

    Records are produced in units (a singleton or a two-mode pair) that each
    draw from their own generator seeded with ``(config.seed, unit)``.
    """
    skel = skel or kin.default_skeleton()
    if skel.K != 17:
        raise ValueError("the cluster generator is defined on the default 17-joint skeleton")
    cam = kin.Camera(config.camera_focal)
    dist = config.pose_distribution
    n_pair_units = int(config.count * config.two_mode_fraction) // 2
    n_units = config.count - n_pair_units
    rows, seeds, clusters, pairs = [], [], [], []
    resampled = 0
    for unit in range(n_units):
        rng = np.random.default_rng([config.seed, unit])
        is_pair = unit < n_pair_units
        while True:
            c = int(rng.integers(N_CLUSTERS))
            theta, log_beta, gamma, t = _sample_params(rng, c, dist)
            group = [(theta, c)]
            if is_pair:
                partner = leg_partner(c)
                group.append((_resample_legs(rng, theta, partner, dist), partner))
            try:
                out = []
                for th, cc in group:
                    X, _ = kin.fk_forward(th[None], log_beta[None], gamma[None], skel)
                    Y = kin.project_points(X, t[None], cam)
                    out.append((th, cc, X[0], Y[0]))
            except SingularProjectionError:
                resampled += 1
                continue
            if is_pair and np.linalg.norm(out[0][2] - out[1][2]) < config.two_mode_tau:
                resampled += 1
                continue
            break
        for th, cc, X, Y in out:
            rows.append((th, log_beta, gamma, t, X, Y))
            seeds.append(unit)
            clusters.append(cc)
            pairs.append(unit if is_pair else -1)
    if resampled:
        log.info("generation resampled %d units", resampled)
    if not rows:
        return Dataset.empty(skel.K)
    theta, log_beta, gamma, t, X, Y = (np.stack(col) for col in zip(*rows))
    n = len(rows)
    vis = np.ones((n, skel.K), dtype=bool)
    kp = np.empty_like(Y)
    ctx = np.empty((n, 3))
    for i in range(n):
        kp[i], ctx[i] = crop_normalize(Y[i], vis[i], config.crop_padding)
    return Dataset(theta, log_beta, gamma, t, X, Y, kp, vis, ctx, ["none"] * n,
                   np.asarray(seeds, dtype=np.int64), np.asarray(clusters, dtype=np.int64),
                   np.asarray(pairs, dtype=np.int64))


def draw_strategies(rng: np.random.Generator, count: int) -> list[str]:
    picks = rng.choice(len(STRATEGIES), size=count, p=STRATEGY_PROBS)
    return [STRATEGIES[i] for i in picks]


def mask_for(strategy: str, K: int = 17) -> np.ndarray:
    vis = np.ones(K, dtype=bool)
    vis[list(MASK_GROUPS[strategy])] = False
    return vis


def apply_strategy(ds: Dataset, strategies: list[str], padding: float = 1.1) -> Dataset:
    """Hide each record's joint group and recompute the crop around the visible joints."""
    out = ds.subset(np.arange(len(ds)))
    K = ds.X.shape[1]
    for i, s in enumerate(strategies):
        out.vis[i] = mask_for(s, K)
        out.keypoints[i], out.context[i] = crop_normalize(ds.Y[i], out.vis[i], padding)
    out.strategy = list(strategies)
    return out


def apply_ambiguity(ds: Dataset, seed: int, padding: float = 1.1) -> Dataset:
    """Draw a masking strategy per record (p = 0.3/0.3/0.3/0.1); two-mode pairs always hide the legs."""
    strategies = draw_strategies(np.random.default_rng(seed), len(ds))
    strategies = [("legs" if ds.pair[i] >= 0 else s) for i, s in enumerate(strategies)]
    return apply_strategy(ds, strategies, padding)


def split_indices(ds: Dataset, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[int]]:
    """Seeded train/val/test split over units so both halves of a pair stay together."""
    units: dict[int, list[int]] = {}
    for i in range(len(ds)):
        key = int(ds.pair[i]) if ds.pair[i] >= 0 else -(i + 1)
        units.setdefault(key, []).append(i)
    keys = list(units)
    order = np.random.default_rng(seed).permutation(len(keys))
    n = len(keys)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = {"train": order[:n_train], "val": order[n_train : n_train + n_val], "test": order[n_train + n_val :]}
    return {name: sorted(i for u in sel for i in units[keys[u]]) for name, sel in parts.items()}


def two_mode_groups(ds: Dataset) -> list[tuple[int, int]]:
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(ds.pair):
        if p >= 0:
            groups.setdefault(int(p), []).append(i)
    return [tuple(v) for _, v in sorted(groups.items()) if len(v) == 2]


# ---------------------------------------------------------------------------
# Persistence (JSON lines)

_ARRAY_FIELDS = (
    ("theta", 1), ("log_beta", 1), ("gamma", 1), ("t", 1),
    ("X", 2), ("Y", 2), ("keypoints", 2), ("context", 1),
)


def _record_json(ds: Dataset, i: int) -> str:
    rec = {
        "index": i,
        "strategy": ds.strategy[i],
        "seed": int(ds.seed[i]),
        "cluster": int(ds.cluster[i]),
        "pair": int(ds.pair[i]),
        "theta": ds.theta[i].tolist(),
        "log_beta": ds.log_beta[i].tolist(),
        "gamma": ds.gamma[i].tolist(),
        "t": ds.t[i].tolist(),
        "X": ds.X[i].tolist(),
        "Y": ds.Y[i].tolist(),
        "keypoints": ds.keypoints[i].tolist(),
        "vis": [int(v) for v in ds.vis[i]],
        "context": ds.context[i].tolist(),
    }
    return json.dumps(rec, separators=(",", ":"))


def save(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for i in range(len(ds)):
            fh.write(_record_json(ds, i))
            fh.write("\n")
    tmp.replace(path)


# Layout written by ``_record_json``: (key, values per record) in file order.
def _layout(K: int) -> list[tuple[str, int]]:
    return [("index", 1), ("strategy", 1), ("seed", 1), ("cluster", 1), ("pair", 1),
            ("theta", 3 * (K - 1)), ("log_beta", K - 1), ("gamma", 3), ("t", 3), ("X", 3 * K),
            ("Y", 2 * K), ("keypoints", 2 * K), ("vis", K), ("context", 3)]


_QUOTED = re.compile(rb'"[A-Za-z_]*"')
_STRATEGY = re.compile(rb'"strategy":"([a-z_]*)"')
_NUMBER_CHARS = b"0123456789.-+eE"


def _signature(K: int) -> bytes:
    """Punctuation skeleton of one canonical record (numbers and names removed)."""
    ds = Dataset.empty(K).subset([])
    zero = Dataset(*(np.zeros((1,) + getattr(ds, f.name).shape[1:], dtype=getattr(ds, f.name).dtype)
                     if not isinstance(getattr(ds, f.name), list) else ["none"] for f in fields(ds)))
    return _QUOTED.sub(b"0", _record_json(zero, 0).encode()).translate(None, _NUMBER_CHARS)


def _load_fast(raw: bytes, K: int) -> Dataset | None:
    """Bulk parse of a file in exactly the layout ``save`` writes.

    Returns None whenever anything deviates, so the caller can fall back to the
    record-by-record parser and its precise error messages.
    """
    n = raw.count(b"\n")
    if n == 0 or not raw.endswith(b"\n"):
        return None
    strategies = [m.decode() for m in _STRATEGY.findall(raw)]
    if len(strategies) != n or not set(strategies) <= set(STRATEGIES):
        return None
    body = _QUOTED.sub(b"0", raw)
    if set(body.translate(None, _NUMBER_CHARS).split(b"\n")[:-1]) != {_signature(K)}:
        return None
    layout = _layout(K)
    width = sum(size for _, size in layout) + len(layout)  # one placeholder per key
    text = body.translate(bytes.maketrans(b":\n", b",,"), b"[]{}").rstrip(b",")
    flat = np.fromstring(text, dtype=np.float64, sep=",")
    if flat.size != n * width:
        return None
    table = flat.reshape(n, width)
    cols, pos = {}, 0
    for name, size in layout:
        cols[name] = table[:, pos + 1 : pos + 1 + size]
        pos += 1 + size
    shapes = {"X": (K, 3), "Y": (K, 2), "keypoints": (K, 2)}
    arrays = {name: np.ascontiguousarray(cols[name]).reshape((n,) + shapes.get(name, (-1,)))
              for name, _ in _ARRAY_FIELDS}
    return Dataset(
        vis=cols["vis"] != 0,
        strategy=strategies,
        seed=cols["seed"][:, 0].astype(np.int64),
        cluster=cols["cluster"][:, 0].astype(np.int64),
        pair=cols["pair"][:, 0].astype(np.int64),
        **arrays,
    )


def load(path: str | Path, K: int = 17) -> Dataset:
    """Read a JSON-lines dataset.

    Files in the canonical layout take a bulk numeric path; anything else goes
    through the record parser, which validates every field.

    Raises:
        DataFormatError: with the 1-based line number and offending field.
    """
    raw = Path(path).read_bytes()
    fast = _load_fast(raw, K)
    return fast if fast is not None else _load_records(raw.decode().splitlines(), K)


def _load_records(lines: list[str], K: int) -> Dataset:
    cols: dict[str, list] = {name: [] for name, _ in _ARRAY_FIELDS}
    cols.update(vis=[], strategy=[], seed=[], cluster=[], pair=[])
    expected = {"theta": (3 * (K - 1),), "log_beta": (K - 1,), "gamma": (3,), "t": (3,), "X": (K, 3),
                "Y": (K, 2), "keypoints": (K, 2), "context": (3,), "vis": (K,)}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON ({exc.msg}) in record {lineno - 1}", line=lineno) from None
        if not isinstance(rec, dict):
            raise DataFormatError("record is not an object", line=lineno)
        for name in expected:
            if name not in rec:
                raise DataFormatError("missing", line=lineno, field=name)
            arr = np.asarray(rec[name], dtype=np.float64) if name != "vis" else np.asarray(rec[name])
            if arr.shape != expected[name]:
                raise DataFormatError(f"shape {arr.shape} != {expected[name]}", line=lineno, field=name)
            cols[name].append(rec[name])
        for name in ("strategy", "seed", "cluster", "pair"):
            if name not in rec:
                raise DataFormatError("missing", line=lineno, field=name)
            cols[name].append(rec[name])
        if rec["strategy"] not in STRATEGIES:
            raise DataFormatError(f"unknown strategy {rec['strategy']!r}", line=lineno, field="strategy")
    if not cols["X"]:
        return Dataset.empty(K)
    arrays = {name: np.asarray(cols[name], dtype=np.float64) for name, _ in _ARRAY_FIELDS}
    return Dataset(
        vis=np.asarray(cols["vis"], dtype=bool),
        strategy=cols["strategy"],
        seed=np.asarray(cols["seed"], dtype=np.int64),
        cluster=np.asarray(cols["cluster"], dtype=np.int64),
        pair=np.asarray(cols["pair"], dtype=np.int64),
        **arrays,
    )


def write_manifest(path: str | Path, config: GenConfig, ds: Dataset, split_seed: int,
                   dataset_file: str, mask_seed: int | None) -> dict:
    splits = split_indices(ds, split_seed)
    manifest = {
        "dataset_file": dataset_file,
        "count": len(ds),
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "seeds": {"generation": config.seed, "masking": mask_seed, "split": split_seed},
        "splits": splits,
    }
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest
