"""Actor-critic MLP with exact reverse-mode gradients.

Topology: input -> tanh trunk (default 128, 64) -> linear actor head (one
logit per catalog action) and linear critic head (scalar value).

Sign convention: every objective in this package is *maximized*, gradients
are ascent directions, and ``apply_update`` moves parameters along them
(``p + lr * g`` for SGD).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels

CHECKPOINT_MAGIC = b"GAPLAB-CKPT\n"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PolicyParams:
    """Trunk layers plus actor and critic heads.  Weight matrices are (in, out)."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    actor: tuple[np.ndarray, np.ndarray]
    critic: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        prev = self.layers[0][0].shape[0] if self.layers else self.actor[0].shape[0]
        for W, b in (*self.layers, self.actor, self.critic):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeMismatch("bias must match weight output width")
        for W, _ in self.layers:
            if W.shape[0] != prev:
                raise ShapeMismatch(f"layer expects {W.shape[0]} inputs, previous width {prev}")
            prev = W.shape[1]
        if self.actor[0].shape[0] != prev or self.critic[0].shape[0] != prev:
            raise ShapeMismatch("heads must take the trunk output width")
        if self.critic[0].shape[1] != 1:
            raise ShapeMismatch("critic head must output a scalar")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0] if self.layers else self.actor[0].shape[0]

    @property
    def n_actions(self) -> int:
        return self.actor[0].shape[1]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(W.shape[1] for W, _ in self.layers)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in (*self.layers, self.actor, self.critic):
            out.extend((W, b))
        return out

    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.arrays()]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "PolicyParams":
        arrays = list(arrays)
        if [a.shape for a in arrays] != self.shapes():
            raise ShapeMismatch("array shapes do not match parameter layout")
        n = len(self.layers)
        layers = tuple((arrays[2 * i], arrays[2 * i + 1]) for i in range(n))
        return PolicyParams(layers, (arrays[2 * n], arrays[2 * n + 1]), (arrays[2 * n + 2], arrays[2 * n + 3]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "PolicyParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size], dtype=np.float64).reshape(a.shape).copy())
            i += a.size
        if i != vec.size:
            raise ShapeMismatch("vector length does not match parameter count")
        return self.with_arrays(out)

    def zeros_like(self) -> "PolicyParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def __add__(self, other: "PolicyParams") -> "PolicyParams":
        _congruent(self, other)
        return self.with_arrays([a + b for a, b in zip(self.arrays(), other.arrays())])

    def scale(self, k: float) -> "PolicyParams":
        return self.with_arrays([a * k for a in self.arrays()])

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.dot(a.ravel(), a.ravel())) for a in self.arrays())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "PolicyParams") -> bool:
        return self.shapes() == other.shapes() and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


# gradients share the parameter layout
GradientBundle = PolicyParams


def _congruent(a: PolicyParams, b: PolicyParams) -> None:
    if a.shapes() != b.shapes():
        raise ShapeMismatch("parameter bundles are not shape-congruent")


def init_params(input_dim: int, n_actions: int, hidden: Sequence[int] = (128, 64), seed: int = 0) -> PolicyParams:
    """Glorot-uniform trunk, actor head scaled by 0.01, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-lim, lim, (fan_in, fan_out)), np.zeros(fan_out)))
    width = sizes[-1]
    lim = np.sqrt(6.0 / (width + n_actions))
    actor = (0.01 * rng.uniform(-lim, lim, (width, n_actions)), np.zeros(n_actions))
    lim = np.sqrt(6.0 / (width + 1))
    critic = (rng.uniform(-lim, lim, (width, 1)), np.zeros(1))
    return PolicyParams(tuple(layers), actor, critic)


@dataclass
class ForwardCache:
    inputs: np.ndarray  # (N, d)
    activations: list[np.ndarray]  # tanh outputs per trunk layer
    logits: np.ndarray  # (N, A)
    values: np.ndarray  # (N,)


def forward(params: PolicyParams, states: np.ndarray) -> ForwardCache:
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise ShapeMismatch(f"state has dimension {x.shape[1]}, network expects {params.input_dim}")
    acts = []
    h = x
    for W, b in params.layers:
        h = np.tanh(h @ W + b)
        acts.append(h)
    logits = h @ params.actor[0] + params.actor[1]
    values = (h @ params.critic[0] + params.critic[1])[:, 0]
    return ForwardCache(x, acts, logits, values)


def policy_value(params: PolicyParams, state: np.ndarray) -> tuple[np.ndarray, float]:
    """Single-state forward pass: (logits, value)."""
    h = state
    for W, b in params.layers:
        h = np.tanh(np.dot(h, W) + b)
    return np.dot(h, params.actor[0]) + params.actor[1], float(np.dot(h, params.critic[0])[0] + params.critic[1][0])


def backward(params: PolicyParams, cache: ForwardCache, dlogits: np.ndarray, dvalues: np.ndarray) -> GradientBundle:
    """Chain dObjective/dlogits and dObjective/dvalues back to every parameter."""
    h_last = cache.activations[-1] if cache.activations else cache.inputs
    dvalues = np.asarray(dvalues, dtype=np.float64).reshape(-1, 1)
    gWa = h_last.T @ dlogits
    gba = dlogits.sum(axis=0)
    gWc = h_last.T @ dvalues
    gbc = dvalues.sum(axis=0)
    dh = dlogits @ params.actor[0].T + dvalues @ params.critic[0].T
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        h = cache.activations[i]
        dz = dh * (1.0 - h * h)
        below = cache.activations[i - 1] if i > 0 else cache.inputs
        grads.append((below.T @ dz, dz.sum(axis=0)))
        if i > 0:
            dh = dz @ W.T
    grads.reverse()
    return PolicyParams(tuple(grads), (gWa, gba), (gWc, gbc))


# ---------------------------------------------------------------------------
# categorical policy helpers

def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_action(logits: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> tuple[int, float]:
    """Draw from softmax(logits); greedy picks the first maximal logit."""
    logits = np.asarray(logits, dtype=np.float64)
    if greedy:
        a = int(np.argmax(logits))
    else:
        a = _kernels.sample_categorical(logits, rng.random())
    return a, float(log_softmax(logits)[a])


# ---------------------------------------------------------------------------
# updates

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = field(default=None, repr=False)
    v: list[np.ndarray] | None = field(default=None, repr=False)


def clip_by_global_norm(grads: GradientBundle, max_norm: float | None) -> GradientBundle:
    if max_norm is None:
        return grads
    n = grads.norm()
    if n > max_norm:
        return grads.scale(max_norm / n)
    return grads


def apply_update(
    params: PolicyParams,
    grads: GradientBundle,
    lr: float,
    rule: str = "sgd",
    state: AdamState | None = None,
) -> PolicyParams:
    """Ascent step.  ``adam`` needs an AdamState, which is advanced in place."""
    _congruent(params, grads)
    if rule == "sgd":
        return params.with_arrays([p + lr * g for p, g in zip(params.arrays(), grads.arrays())])
    if rule != "adam":
        raise ValueError(f"unknown update rule {rule!r}")
    if state is None:
        raise ValueError("adam updates need an AdamState")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params.arrays()]
        state.v = [np.zeros_like(p) for p in params.arrays()]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        out.append(p + lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return params.with_arrays(out)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: PolicyParams, path, metadata: dict | None = None) -> None:
    """Binary checkpoint: magic, length-prefixed JSON header, raw little-endian float64."""
    header = {
        "version": CHECKPOINT_VERSION,
        "n_layers": len(params.layers),
        "shapes": [list(s) for s in params.shapes()],
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen])
    off += hlen
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape))
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    n = header["n_layers"]
    layers = tuple((arrays[2 * i], arrays[2 * i + 1]) for i in range(n))
    params = PolicyParams(layers, (arrays[2 * n], arrays[2 * n + 1]), (arrays[2 * n + 2], arrays[2 * n + 3]))
    return params, header["metadata"]
