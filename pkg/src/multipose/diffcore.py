"""Dense layers with explicit forward/backward passes, Adam, and the checkpoint container.

Tensors are plain float64 numpy arrays laid out row-major as (rows, cols);
a batch of inputs is a (batch, features) array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataFormatError, NonFiniteError, ShapeError, StaleTapeError

ACTIVATIONS = ("identity", "relu", "tanh")


@dataclass
class DenseLayer:
    """``y = act(x W^T + b)`` with ``W`` of shape (out, in)."""

    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


def xavier_layer(rng: np.random.Generator, n_in: int, n_out: int, activation: str = "identity") -> DenseLayer:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return DenseLayer(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), activation)


def build_mlp(rng: np.random.Generator, sizes: Sequence[int], hidden: str = "tanh", last: str = "identity") -> list[DenseLayer]:
    """Xavier-initialized stack ``sizes[0] -> ... -> sizes[-1]``."""
    n = len(sizes) - 1
    return [xavier_layer(rng, sizes[i], sizes[i + 1], last if i == n - 1 else hidden) for i in range(n)]


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(name: str, a: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return g * (1.0 - y * y)
    if name == "relu":
        return g * (a > 0.0)
    return g


@dataclass
class Tape:
    layers: list[DenseLayer]
    weights: list[np.ndarray]
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def mlp_forward(layers: Sequence[DenseLayer], x: np.ndarray):
    """Run the stack on a (batch, in) array; returns ``(output, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"input must be 2-D (batch, features), got {x.shape}")
    tape = Tape(list(layers), [l.W for l in layers])
    h = x
    for i, layer in enumerate(layers):
        if h.shape[1] != layer.n_in:
            raise ShapeError(f"layer {i} expects {layer.n_in} inputs, got {h.shape[1]}")
        a = h @ layer.W.T + layer.b
        y = _act(layer.activation, a)
        tape.inputs.append(h)
        tape.preacts.append(a)
        tape.outputs.append(y)
        h = y
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("mlp_forward", "non-finite activation")
    return h, tape


def mlp_backward(tape: Tape, upstream: np.ndarray):
    """Reverse pass; returns ``([(dW, db), ...], dx)`` in layer order."""
    if len(tape.layers) != len(tape.outputs) or any(l.W is not w for l, w in zip(tape.layers, tape.weights)):
        raise StaleTapeError("layer parameters were replaced after the forward pass")
    g = np.asarray(upstream, dtype=np.float64)
    if not tape.outputs or g.shape != tape.outputs[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} does not match forward output")
    grads = [None] * len(tape.layers)
    for i in reversed(range(len(tape.layers))):
        layer = tape.layers[i]
        g = _act_grad(layer.activation, tape.preacts[i], tape.outputs[i], g)
        grads[i] = (g.T @ tape.inputs[i], g.sum(axis=0))
        g = g @ layer.W
    return grads, g


def mlp_params(layers: Sequence[DenseLayer]) -> list[np.ndarray]:
    out = []
    for l in layers:
        out += [l.W, l.b]
    return out


def set_mlp_params(layers: Sequence[DenseLayer], params: Sequence[np.ndarray]) -> None:
    for i, l in enumerate(layers):
        l.W, l.b = params[2 * i], params[2 * i + 1]


def flatten_grads(grads) -> list[np.ndarray]:
    return [g for pair in grads for g in pair]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update.  Moments in ``state`` are advanced in place;
    new parameter arrays are returned (inputs are not modified)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} vs gradient {np.shape(g)}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        out.append(p - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out


def adam_blocks(state: AdamState, prefix: str = "adam") -> dict[str, np.ndarray]:
    blocks = {}
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        blocks[f"{prefix}.m{i}"] = m
        blocks[f"{prefix}.v{i}"] = v
    return blocks


def adam_header(state: AdamState) -> dict:
    return {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "step": state.step}


def adam_from_checkpoint(header: dict, blocks: dict[str, np.ndarray], prefix: str = "adam") -> AdamState:
    n = sum(1 for k in blocks if k.startswith(f"{prefix}.m"))
    return AdamState(
        lr=header["lr"], beta1=header["beta1"], beta2=header["beta2"], eps=header["eps"], step=header["step"],
        m=[blocks[f"{prefix}.m{i}"].copy() for i in range(n)],
        v=[blocks[f"{prefix}.v{i}"].copy() for i in range(n)],
    )


# ---------------------------------------------------------------------------
# Checkpoint container: magic, u64 header length, JSON header, raw <f8 blocks.

MAGIC = b"MPCKPT01"


def save_checkpoint(path: str | Path, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    entries = []
    payload = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({"meta": meta, "blocks": entries}, sort_keys=True, separators=(",", ":")).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise DataFormatError(f"{path}: not a checkpoint file", field="magic")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad header ({exc})", field="header") from None
    pos = 16 + hlen
    blocks = {}
    for entry in header["blocks"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = pos + 8 * count
        if end > len(raw):
            raise DataFormatError(f"{path}: truncated", field=entry["name"])
        blocks[entry["name"]] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        pos = end
    if pos != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - pos} trailing bytes", field="blocks")
    return header["meta"], blocks


def mlp_blocks(layers: Sequence[DenseLayer], prefix: str) -> dict[str, np.ndarray]:
    blocks = {}
    for i, l in enumerate(layers):
        blocks[f"{prefix}.{i}.W"] = l.W
        blocks[f"{prefix}.{i}.b"] = l.b
    return blocks


def mlp_spec(layers: Sequence[DenseLayer]) -> list[dict]:
    return [{"in": l.n_in, "out": l.n_out, "activation": l.activation} for l in layers]


def mlp_from_blocks(spec: Sequence[dict], blocks: dict[str, np.ndarray], prefix: str) -> list[DenseLayer]:
    return [
        DenseLayer(blocks[f"{prefix}.{i}.W"].copy(), blocks[f"{prefix}.{i}.b"].copy(), s["activation"])
        for i, s in enumerate(spec)
    ]


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)
