"""Small feedforward networks with hand-written reverse-mode gradients and Adam.

Everything is float64 numpy.  Networks are plain value objects: the update
functions return new instances and never mutate their inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu")

CHECKPOINT_MAGIC = b"PBNN"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a parameter, gradient or loss stops being finite."""


@dataclass
class Network:
    layer_sizes: list[int]
    weights: list[np.ndarray]  # each (fan_in, fan_out)
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of parameter blocks does not match layer_sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ValueError(f"layer {k}: got W{w.shape}, b{b.shape}, expected W{expected}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Network":
        return Network(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def flat(self) -> np.ndarray:
        """All parameters as one vector, layer by layer (W row-major, then b)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, theta: np.ndarray) -> "Network":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        weights, biases, i = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(theta[i : i + w.size].reshape(w.shape).copy())
            i += w.size
            biases.append(theta[i : i + b.size].copy())
            i += b.size
        return Network(list(self.layer_sizes), weights, biases, self.activation)

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases))


@dataclass
class ForwardCache:
    inputs: np.ndarray  # (n, n_in), always 2-D
    pre: list[np.ndarray]  # pre-activations per layer
    post: list[np.ndarray]  # layer inputs; post[0] is the network input
    squeeze: bool


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_w: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(
            [a.copy() for a in self.m_w],
            [a.copy() for a in self.m_b],
            [a.copy() for a in self.v_w],
            [a.copy() for a in self.v_b],
            self.step,
            self.beta1,
            self.beta2,
            self.eps,
        )


def net_init(layer_sizes, seed: int, activation: str = "tanh") -> Network:
    """Xavier-uniform weights, zero biases."""
    layer_sizes = [int(n) for n in layer_sizes]
    if len(layer_sizes) < 2:
        raise ValueError("layer_sizes needs at least an input and an output width")
    if any(n <= 0 for n in layer_sizes):
        raise ValueError(f"layer sizes must be positive, got {layer_sizes}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(layer_sizes, weights, biases, activation)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def net_forward(net: Network, x, return_cache: bool = False):
    """Evaluate the network on one input vector or a batch of rows.

    Hidden layers use the configured activation, the output layer is linear.
    With ``return_cache`` the intermediate activations needed by
    :func:`net_backward` are returned as well.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != net.n_in:
        raise ValueError(f"input width {h.shape[-1]} does not match network input width {net.n_in}")
    pre, post = [], [h]
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if k == last else _act(net.activation, z)
        if k != last:
            post.append(h)
    out = h[0] if squeeze else h
    if return_cache:
        return out, ForwardCache(x if not squeeze else x[None, :], pre, post, squeeze)
    return out


def net_backward(net: Network, cache: ForwardCache, upstream) -> tuple[Gradients, np.ndarray]:
    """Gradients of ``sum(output * upstream)`` w.r.t. all parameters and the input.

    For a batched forward pass the parameter gradients are summed over rows.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :] if g.ndim == 1 else g
    n = cache.post[0].shape[0]
    if g.shape != (n, net.n_out):
        raise ValueError(f"upstream gradient shape {g.shape} does not match cached output {(n, net.n_out)}")
    if len(cache.pre) != len(net.weights):
        raise ValueError("cache was produced by a network with a different depth")
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    last = len(net.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            g = g * _act_grad(net.activation, cache.pre[k], cache.post[k + 1])
        gw[k] = cache.post[k].T @ g
        gb[k] = g.sum(axis=0)
        g = g @ net.weights[k].T
    dx = g[0] if cache.squeeze else g
    return Gradients(gw, gb), dx


def adam_init(net: Network, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        [np.zeros_like(w) for w in net.weights],
        [np.zeros_like(b) for b in net.biases],
        [np.zeros_like(w) for w in net.weights],
        [np.zeros_like(b) for b in net.biases],
        0,
        beta1,
        beta2,
        eps,
    )


def adam_step(net: Network, grads: Gradients, state: AdamState, lr: float) -> tuple[Network, AdamState]:
    """One bias-corrected Adam update; returns new network and optimiser state."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not grads.is_finite():
        raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    def upd(p, g, m, v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        return p, m, v

    new_w, new_b, m_w, m_b, v_w, v_b = [], [], [], [], [], []
    for k in range(len(net.weights)):
        p, m, v = upd(net.weights[k], grads.weights[k], state.m_w[k], state.v_w[k])
        new_w.append(p), m_w.append(m), v_w.append(v)
        p, m, v = upd(net.biases[k], grads.biases[k], state.m_b[k], state.v_b[k])
        new_b.append(p), m_b.append(m), v_b.append(v)
    out = Network(list(net.layer_sizes), new_w, new_b, net.activation)
    if not out.is_finite():
        raise NonFiniteError(f"parameters became non-finite at Adam step {t}")
    return out, AdamState(m_w, m_b, v_w, v_b, t, b1, b2, state.eps)


# -- checkpoints -------------------------------------------------------------
#
# Binary layout (little-endian):
#   4s   magic "PBNN"
#   u32  format version
#   u32  number of layer sizes L
#   L*u32 layer sizes
#   then for each layer: W as fan_in*fan_out f64 (row-major), b as fan_out f64


def save_checkpoint(net: Network, path, hyperparams: dict | None = None) -> tuple[Path, Path]:
    """Write ``path`` (binary parameters) and ``path.json`` (sidecar)."""
    path = Path(path)
    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(net.layer_sizes))
    header += struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes)
    blocks = []
    for w, b in zip(net.weights, net.biases):
        blocks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        blocks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    path.write_bytes(header + b"".join(blocks))
    sidecar = path.with_name(path.name + ".json")
    meta = {"format_version": CHECKPOINT_VERSION, "activation": net.activation,
            "layer_sizes": list(net.layer_sizes), "hyperparams": dict(hyperparams or {})}
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, sidecar


def load_checkpoint(path) -> tuple[Network, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a network checkpoint")
    version, n_sizes = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    sizes = list(struct.unpack_from(f"<{n_sizes}I", raw, 12))
    offset = 12 + 4 * n_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Network(sizes, weights, biases, meta.get("activation", "tanh")), meta
