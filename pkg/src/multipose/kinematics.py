"""Articulated skeleton body model: forward kinematics, joint regressor, camera.

The body is a 17-joint tree (pelvis root) whose bones are rotated by per-joint
axis-angle vectors ``theta``, scaled by per-bone length multipliers
``beta = exp(log_beta)`` and globally rotated by ``gamma``.  The camera
translation ``t`` only enters through :func:`project`.

All batch functions take leading batch dimensions and come with an explicit
reverse-mode counterpart (``*_backward``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, SingularProjectionError

EPS_DEPTH = 1e-3
_SMALL_ANGLE = 0.05

JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)

DEFAULT_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# y up, x to the body's left, camera looks along +z at a body facing -z.
DEFAULT_OFFSETS = (
    (0.0, 0.0, 0.0),
    (-0.13, 0.0, 0.0),
    (0.0, -0.45, 0.0),
    (0.0, -0.44, 0.0),
    (0.13, 0.0, 0.0),
    (0.0, -0.45, 0.0),
    (0.0, -0.44, 0.0),
    (0.0, 0.23, 0.0),
    (0.0, 0.25, 0.0),
    (0.0, 0.12, 0.0),
    (0.0, 0.12, 0.0),
    (0.16, -0.02, 0.0),
    (0.0, -0.28, 0.0),
    (0.0, -0.25, 0.0),
    (-0.16, -0.02, 0.0),
    (0.0, -0.28, 0.0),
    (0.0, -0.25, 0.0),
)


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree with rest-pose bone offsets.

    ``parents[0]`` must be -1 (the root); every other joint has exactly one
    parent and a nonzero rest offset from it.
    """

    parents: tuple[int, ...]
    offsets: np.ndarray
    order: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        k = len(parents)
        if k < 2:
            raise ShapeError("skeleton needs at least two joints")
        if offsets.shape != (k, 3):
            raise ShapeError(f"offsets shape {offsets.shape} != ({k}, 3)")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("skeleton offsets must be finite")
        if parents[0] != -1 or any(p == -1 for p in parents[1:]):
            raise ValueError("joint 0 must be the unique root (parent -1)")
        if any(not 0 <= p < k for p in parents[1:]):
            raise ValueError("parent index out of range")
        children: list[list[int]] = [[] for _ in range(k)]
        for j, p in enumerate(parents[1:], start=1):
            children[p].append(j)
        order, stack = [], [0]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != k:
            raise ValueError("parent array does not define a single tree rooted at joint 0")
        if np.any(np.linalg.norm(offsets[1:], axis=1) == 0.0):
            raise ValueError("non-root joints need nonzero rest offsets")
        offsets.setflags(write=False)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "order", tuple(order))

    @property
    def K(self) -> int:
        return len(self.parents)

    @property
    def n_bones(self) -> int:
        return self.K - 1

    @property
    def n_theta(self) -> int:
        return 3 * (self.K - 1)

    @classmethod
    def from_json(cls, source: str | Path | dict) -> "Skeleton":
        """Load ``{"parents": [...], "offsets": [[x, y, z], ...]}`` from a dict, path or JSON text."""
        if isinstance(source, dict):
            doc = source
        else:
            text = str(source)
            if isinstance(source, Path) or not text.lstrip().startswith("{"):
                text = Path(source).read_text()
            doc = json.loads(text)
        try:
            return cls(tuple(doc["parents"]), np.asarray(doc["offsets"], dtype=np.float64))
        except KeyError as exc:
            raise ValueError(f"skeleton document missing key {exc}") from None

    def to_json(self) -> str:
        return json.dumps({"parents": list(self.parents), "offsets": self.offsets.tolist()})


def default_skeleton() -> Skeleton:
    return Skeleton(DEFAULT_PARENTS, np.array(DEFAULT_OFFSETS))


@dataclass(frozen=True)
class Camera:
    focal: float = 5.0
    principal: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (math.isfinite(self.focal) and self.focal > 0):
            raise ValueError(f"focal must be positive, got {self.focal}")
        object.__setattr__(self, "principal", (float(self.principal[0]), float(self.principal[1])))


def canonicalize_axis_angle(v: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors to the equivalent one with norm in [0, pi]."""
    v = np.asarray(v, dtype=np.float64)
    r = v.reshape(-1, 3).copy()
    ang = np.linalg.norm(r, axis=1)
    wrapped = np.mod(ang + np.pi, 2 * np.pi) - np.pi
    big = ang > np.pi
    r[big] *= (wrapped[big] / ang[big])[:, None]
    return r.reshape(v.shape)


@dataclass(frozen=True)
class BodyParams:
    """Pose ``theta``, log bone scales ``log_beta``, global rotation ``gamma``, camera translation ``t``.

    Bone multipliers are ``beta = exp(log_beta)`` so they stay positive for any
    unconstrained ``log_beta``.
    """

    theta: np.ndarray
    log_beta: np.ndarray
    gamma: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        for name in ("theta", "log_beta", "gamma", "t"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"BodyParams.{name} must be finite")
            if name in ("theta", "gamma"):
                if arr.size % 3:
                    raise ShapeError(f"{name} length {arr.size} is not a multiple of 3")
                arr = canonicalize_axis_angle(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.gamma.shape != (3,) or self.t.shape != (3,):
            raise ShapeError("gamma and t must have length 3")

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.log_beta)

    @classmethod
    def from_beta(cls, theta, beta, gamma, t) -> "BodyParams":
        beta = np.asarray(beta, dtype=np.float64)
        if np.any(beta <= 0):
            raise ValueError("beta entries must be strictly positive")
        return cls(theta, np.log(beta), gamma, t)

    @classmethod
    def rest(cls, skel: Skeleton, t=(0.0, 0.0, 6.0)) -> "BodyParams":
        return cls(np.zeros(skel.n_theta), np.zeros(skel.n_bones), np.zeros(3), np.asarray(t))

    def vector(self) -> np.ndarray:
        """Flat ``[theta, log_beta, gamma, t]`` layout used by the regressor heads."""
        return np.concatenate([self.theta, self.log_beta, self.gamma, self.t])

    @classmethod
    def from_vector(cls, vec: np.ndarray, skel: Skeleton) -> "BodyParams":
        sl = param_slices(skel)
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[sl["theta"]], vec[sl["log_beta"]], vec[sl["gamma"]], vec[sl["t"]])


def param_slices(skel: Skeleton) -> dict[str, slice]:
    nt, nb = skel.n_theta, skel.n_bones
    return {
        "theta": slice(0, nt),
        "log_beta": slice(nt, nt + nb),
        "gamma": slice(nt + nb, nt + nb + 3),
        "t": slice(nt + nb + 3, nt + nb + 6),
    }


def n_params(skel: Skeleton) -> int:
    return skel.n_theta + skel.n_bones + 6


@dataclass(frozen=True)
class Joints3D:
    x: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ShapeError(f"joints must be K x 3, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("joint positions must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def K(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class Keypoints2D:
    """Image-plane keypoints; entries where ``vis`` is False are never read."""

    y: np.ndarray
    vis: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64)
        vis = np.array(self.vis, dtype=bool)
        if y.ndim != 2 or y.shape[1] != 2 or vis.shape != (y.shape[0],):
            raise ShapeError(f"keypoints must be K x 2 with K flags, got {y.shape} / {vis.shape}")
        if not np.all(np.isfinite(y[vis])):
            raise ValueError("visible keypoints must be finite")
        y.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "vis", vis)


# ---------------------------------------------------------------------------
# Rotations


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices ``[v]_x`` for ``v`` of shape (..., 3)."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rodrigues_coeffs(ang: np.ndarray, derivs: bool = True):
    a2 = ang * ang
    small = ang < _SMALL_ANGLE
    safe = np.where(small, 1.0, ang)
    s, c = np.sin(safe), np.cos(safe)
    A = np.where(small, 1 - a2 / 6 + a2 * a2 / 120, s / safe)
    B = np.where(small, 0.5 - a2 / 24 + a2 * a2 / 720, (1 - c) / safe**2)
    if not derivs:
        return A, B, None, None
    # dA/dv = C1 * v, dB/dv = C2 * v
    C1 = np.where(small, -1 / 3 + a2 / 30 - a2 * a2 / 840, (safe * c - s) / safe**3)
    C2 = np.where(small, -1 / 12 + a2 / 180 - a2 * a2 / 6720, (safe * s - 2 * (1 - c)) / safe**4)
    return A, B, C1, C2


def rodrigues(v: np.ndarray) -> np.ndarray:
    """Rotation matrices ``I + A [v] + B [v]^2`` for axis-angle vectors (..., 3)."""
    v = np.asarray(v, dtype=np.float64)
    a2 = np.sum(v * v, axis=-1)
    A, B, _, _ = _rodrigues_coeffs(np.sqrt(a2), derivs=False)
    # [v]^2 = v v^T - |v|^2 I
    out = B[..., None, None] * (v[..., :, None] * v[..., None, :])
    diag = 1.0 - B * a2
    for i in range(3):
        out[..., i, i] += diag
    Av = A[..., None] * v
    out[..., 0, 1] -= Av[..., 2]
    out[..., 0, 2] += Av[..., 1]
    out[..., 1, 0] += Av[..., 2]
    out[..., 1, 2] -= Av[..., 0]
    out[..., 2, 0] -= Av[..., 1]
    out[..., 2, 1] += Av[..., 0]
    return out


def _vee(X: np.ndarray) -> np.ndarray:
    """Inner products ``<X, [e_i]_x>`` for i = 0, 1, 2."""
    return np.stack([X[..., 2, 1] - X[..., 1, 2], X[..., 0, 2] - X[..., 2, 0], X[..., 1, 0] - X[..., 0, 1]], axis=-1)


def rodrigues_backward(v: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``v`` given the upstream gradient ``dR`` of ``rodrigues(v)``."""
    v = np.asarray(v, dtype=np.float64)
    a2 = np.sum(v * v, axis=-1)
    A, B, C1, C2 = _rodrigues_coeffs(np.sqrt(a2))
    vee = _vee(dR)
    tr = dR[..., 0, 0] + dR[..., 1, 1] + dR[..., 2, 2]
    Xv = (dR @ v[..., None])[..., 0]
    XTv = (v[..., None, :] @ dR)[..., 0, :]
    # <dR, [v]> = vee . v ; <dR, [v]^2> = v^T dR v - |v|^2 tr
    t_K = np.sum(vee * v, axis=-1)
    t_K2 = np.sum(v * Xv, axis=-1) - a2 * tr
    # d[v]^2/dv_i = v e_i^T + e_i v^T - 2 v_i I
    g = (C1 * t_K + C2 * t_K2)[..., None] * v
    g = g + A[..., None] * vee
    g = g + B[..., None] * (Xv + XTv - 2.0 * tr[..., None] * v)
    return g


# ---------------------------------------------------------------------------
# Forward kinematics


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries noticeable per-call overhead on small trailing axes
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def right_jacobian_T(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``J_r(v)^T u`` for the right Jacobian of the exponential map, batched over (..., 3).

    With ``R(v + dv) ~ R(v) exp([J_r(v) dv]_x)``, a body-frame torque ``u``
    pulls back to the axis-angle gradient ``J_r^T u = u + B (v x u) + D (v x (v x u))``.
    """
    a2 = np.sum(v * v, axis=-1)
    ang = np.sqrt(a2)
    A, B, _, _ = _rodrigues_coeffs(ang, derivs=False)
    small = ang < _SMALL_ANGLE
    D = np.where(small, 1 / 6 - a2 / 120 + a2 * a2 / 5040, (1.0 - A) / np.where(small, 1.0, a2))
    vu = _cross(v, u)
    return u + B[..., None] * vu + D[..., None] * _cross(v, vu)


@dataclass
class FKCache:
    """Forward-pass intermediates, joint-major: ``G`` (K, N, 3, 3) world rotations, ``P`` (K, N, 3) positions."""

    skel: Skeleton
    theta: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    G: np.ndarray
    P: np.ndarray

    def select(self, rows: np.ndarray) -> "FKCache":
        """Cache restricted to a subset of batch rows."""
        return FKCache(self.skel, self.theta[rows], self.gamma[rows], self.beta[rows],
                       np.ascontiguousarray(self.G[:, rows]), np.ascontiguousarray(self.P[:, rows]))


def fk_forward(theta: np.ndarray, log_beta: np.ndarray, gamma: np.ndarray, skel: Skeleton):
    """Batched forward kinematics.

    Args:
        theta: (N, 3(K-1)) per-joint axis-angle vectors.
        log_beta: (N, K-1) log bone-length multipliers.
        gamma: (N, 3) global rotation.
        skel: the kinematic tree.

    Returns:
        Joint positions (N, K, 3) with the root at the origin, and a cache for
        :func:`fk_backward`.
    """
    theta = np.asarray(theta, dtype=np.float64)
    log_beta = np.asarray(log_beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    n = theta.shape[0]
    if theta.shape != (n, skel.n_theta) or log_beta.shape != (n, skel.n_bones) or gamma.shape != (n, 3):
        raise ShapeError(
            f"expected theta (N,{skel.n_theta}), log_beta (N,{skel.n_bones}), gamma (N,3); "
            f"got {theta.shape}, {log_beta.shape}, {gamma.shape}"
        )
    K = skel.K
    R = rodrigues(theta.reshape(n, K - 1, 3).transpose(1, 0, 2))  # (K-1, N, 3, 3)
    beta = np.exp(log_beta)
    bones = beta.T[:, :, None] * skel.offsets[1:, None, :]  # (K-1, N, 3)
    G = np.empty((K, n, 3, 3))
    P = np.zeros((K, n, 3))
    G[0] = rodrigues(gamma)
    for j in skel.order[1:]:
        p = skel.parents[j]
        np.matmul(G[p], R[j - 1], out=G[j])
        P[j] = P[p] + (G[j] @ bones[j - 1][:, :, None])[..., 0]
    return P.transpose(1, 0, 2).copy(), FKCache(skel, theta, gamma, beta, G, P)


def fk_backward(cache: FKCache, dP: np.ndarray):
    """Reverse-mode pass of :func:`fk_forward`; returns (dtheta, dlog_beta, dgamma).

    Rotating joint j's frame swings every joint below it about its parent, so
    the gradient is the accumulated world torque ``sum r x dP`` pulled back
    through ``G_j^T`` and the right Jacobian.
    """
    skel = cache.skel
    K, n = cache.G.shape[:2]
    dP = np.asarray(dP, dtype=np.float64)
    if dP.shape != (n, K, 3):
        raise ShapeError(f"upstream shape {dP.shape} != {(n, K, 3)}")
    vbar = dP.transpose(1, 0, 2).copy()
    for j in reversed(skel.order[1:]):
        vbar[skel.parents[j]] += vbar[j]
    w = np.zeros_like(cache.P)  # world bone vectors
    par = np.asarray(skel.parents[1:])
    w[1:] = cache.P[1:] - cache.P[par]
    tau = _cross(w, vbar)
    dlb = np.sum(w[1:] * vbar[1:], axis=-1)  # (K-1, N)
    for j in reversed(skel.order[1:]):
        tau[skel.parents[j]] += tau[j]
    u = (tau[:, :, None, :] @ cache.G)[:, :, 0, :]  # G^T tau
    dtheta = right_jacobian_T(cache.theta.reshape(n, K - 1, 3), u[1:].transpose(1, 0, 2)).reshape(n, -1)
    dgamma = right_jacobian_T(cache.gamma, u[0])
    return dtheta, dlb.T.copy(), dgamma


def forward_kinematics(params: BodyParams, skel: Skeleton) -> Joints3D:
    """Joint positions of one body; each joint = parent + R_gamma R_chain (beta * rest offset)."""
    if params.theta.size != skel.n_theta or params.log_beta.size != skel.n_bones:
        raise ShapeError(
            f"params have {params.theta.size} theta / {params.log_beta.size} beta entries, "
            f"skeleton needs {skel.n_theta} / {skel.n_bones}"
        )
    P, _ = fk_forward(params.theta[None], params.log_beta[None], params.gamma[None], skel)
    return Joints3D(P[0])


# ---------------------------------------------------------------------------
# Joint regressor and camera


def joint_regressor(joints, W: np.ndarray | None = None):
    """Apply a fixed linear map over the joint axis: ``out[..., o, :] = sum_k W[o, k] x[..., k, :]``.

    Accepts a :class:`Joints3D` or an array (..., K, 3); ``W=None`` is the identity.
    """
    typed = isinstance(joints, Joints3D)
    x = joints.x if typed else np.asarray(joints, dtype=np.float64)
    if W is not None:
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] != x.shape[-2]:
            raise ShapeError(f"regressor shape {W.shape} incompatible with {x.shape[-2]} joints")
        x = np.einsum("ok,...kc->...oc", W, x)
    return Joints3D(x) if typed else x


def joint_regressor_backward(dout: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
    if W is None:
        return dout
    return np.einsum("ok,...oc->...kc", np.asarray(W, dtype=np.float64), dout)


def project_points(points: np.ndarray, t: np.ndarray, cam: Camera) -> np.ndarray:
    """Perspective projection of (..., K, 3) points translated by t (..., 3)."""
    points = np.asarray(points, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    cam_pts = points + t[..., None, :]
    depth = cam_pts[..., 2]
    bad = depth <= EPS_DEPTH
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise SingularProjectionError(int(idx[-1]), float(depth[tuple(idx)]))
    return cam.focal * cam_pts[..., :2] / depth[..., None] + np.asarray(cam.principal)


def project_backward(points: np.ndarray, t: np.ndarray, cam: Camera, dy: np.ndarray):
    """Gradients of :func:`project_points` w.r.t. points and t."""
    cam_pts = np.asarray(points, dtype=np.float64) + np.asarray(t, dtype=np.float64)[..., None, :]
    z = cam_pts[..., 2:3]
    dxy = cam.focal * dy / z
    dz = -np.sum(dy * cam.focal * cam_pts[..., :2], axis=-1, keepdims=True) / z**2
    dpts = np.concatenate([dxy, dz], axis=-1)
    return dpts, dpts.sum(axis=-2)


def project(joints: Joints3D, t, cam: Camera) -> Keypoints2D:
    y = project_points(joints.x, np.asarray(t, dtype=np.float64), cam)
    return Keypoints2D(y, np.ones(joints.K, dtype=bool))
