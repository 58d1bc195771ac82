"""Dense ReLU network with backprop, Adam, target copies and checkpoints.

Only what a Q-function needs: a feed-forward stack, mean-squared TD loss on
selected outputs, and a binary checkpoint format::

    b"SAFEQNN1" | u32 n_dims | u32 dims[n_dims] | (f64 W[l], f64 b[l]) for each layer

All integers and floats are little-endian; weights are stored row-major with
shape (fan_in, fan_out).
"""

from __future__ import annotations

import copy
import struct

import numpy as np

MAGIC_PREFIX = b"SAFEQNN"
FORMAT_VERSION = b"1"


class CheckpointError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            msg = f"{msg} (at byte offset {offset})"
        super().__init__(msg)


class UnsupportedVersionError(CheckpointError):
    pass


class TrainingError(RuntimeError):
    """Non-finite loss or parameters during an update."""


class Network:
    """ReLU hidden layers, identity output layer."""

    def __init__(self, layer_dims, weights, biases):
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"bad layer dims {self.layer_dims}")
        if len(weights) != len(self.layer_dims) - 1 or len(biases) != len(weights):
            raise ValueError("need one weight matrix and bias per layer")
        for l, (w, b) in enumerate(zip(weights, biases)):
            shape = (self.layer_dims[l], self.layer_dims[l + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {l}: expected W{shape}, b({shape[1]},), "
                                 f"got W{w.shape}, b{b.shape}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, layer_dims, rng: np.random.Generator) -> "Network":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params)


def forward(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.n_inputs:
        raise ValueError(f"input has {h.shape[1]} features, network expects {net.n_inputs}")
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if l < last:
            np.maximum(h, 0.0, out=h)
    return h[0] if single else h


def _forward_cached(net: Network, x: np.ndarray):
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if l < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def _backward(net: Network, acts, d_out: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given dLoss/dOutput; ordered like ``net.params``."""
    grads = [None] * (2 * len(net.weights))
    delta = d_out
    for l in range(len(net.weights) - 1, -1, -1):
        grads[2 * l] = acts[l].T @ delta
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l].T) * (acts[l] > 0)
    return grads


def _as_index_matrix(actions, n: int) -> np.ndarray:
    idx = np.asarray(actions, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[:, None]
    if idx.shape[0] != n:
        raise ValueError("one action index row per sample required")
    return idx


def selected_outputs(out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Q(s, a) as the sum of the output columns listed in each row of ``idx``."""
    rows = np.arange(out.shape[0])[:, None]
    return out[rows, idx].sum(axis=1)


def loss_and_grads(net: Network, inputs, actions, targets):
    """Mean squared error over the selected outputs and its parameter gradients."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    idx = _as_index_matrix(actions, n)
    acts = _forward_cached(net, x)
    q = selected_outputs(acts[-1], idx)
    err = q - y
    loss = float(np.mean(err * err))
    d_out = np.zeros_like(acts[-1])
    rows = np.arange(n)
    coef = 2.0 * err / n
    for j in range(idx.shape[1]):  # (row, column) pairs are unique within one column
        d_out[rows, idx[:, j]] += coef
    return loss, _backward(net, acts, d_out)


class Adam:
    """Adam over all parameters at once; moments live in flat buffers."""

    def __init__(self, net: Network, lr: float = 2e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        sizes = [p.size for p in net.params]
        self._bounds = np.concatenate([[0], np.cumsum(sizes)])
        n = int(self._bounds[-1])
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self._g = np.empty(n)
        self._tmp = np.empty(n)

    def step(self, net: Network, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        g, tmp, m, v = self._g, self._tmp, self.m, self.v
        for (lo, hi), gr in zip(zip(self._bounds[:-1], self._bounds[1:]), grads):
            g[lo:hi] = gr.ravel()
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        # step = lr * (m / c1) / (sqrt(v / c2) + eps)
        np.multiply(v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / c1
        for (lo, hi), p in zip(zip(self._bounds[:-1], self._bounds[1:]), net.params):
            p -= tmp[lo:hi].reshape(p.shape)


def clip_by_global_norm(grads, max_norm: float | None):
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads


def train_step(net: Network, opt: Adam, inputs, actions, targets, clip_norm: float | None = 10.0) -> float:
    """One Adam step on the batch MSE; returns the loss before the step."""
    y = np.asarray(targets, dtype=np.float64)
    if not np.isfinite(y).all():
        raise TrainingError("non-finite TD targets")
    loss, grads = loss_and_grads(net, inputs, actions, y)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    opt.step(net, clip_by_global_norm(grads, clip_norm))
    if not net.all_finite():
        raise TrainingError("parameters became non-finite after update")
    return loss


def finite_diff_check(net: Network, x, action, target: float | None = None, h: float = 1e-4) -> float:
    """Max relative error between backprop and central differences of 0.5 (Q - y)^2."""
    x = np.asarray(x, dtype=np.float64)[None, :]
    idx = _as_index_matrix(np.atleast_1d(action), 1)
    if target is None:
        target = float(selected_outputs(forward(net, x), idx)[0]) - 1.0

    def half_sq(network):
        q = selected_outputs(forward(network, x), idx)[0]
        return 0.5 * (q - target) ** 2

    # loss_and_grads differentiates the mean of (Q - y)^2; halve it for 0.5 (Q - y)^2
    _, grads = loss_and_grads(net, x, idx, [target])
    worst = 0.0
    for p, g in zip(net.params, grads):
        g = 0.5 * g
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = p[i]
            p[i] = orig + h
            up = half_sq(net)
            p[i] = orig - h
            down = half_sq(net)
            p[i] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric), abs(g[i]), 1e-6)
            worst = max(worst, abs(numeric - g[i]) / denom)
    return worst


def sync_target(net: Network, target: Network | None = None) -> Network:
    """Make ``target`` a deep copy of ``net``'s parameters (allocating if None)."""
    if target is None:
        return net.copy()
    if target.layer_dims != net.layer_dims:
        raise ValueError(f"target shape {target.layer_dims} != network shape {net.layer_dims}")
    for dst, src in zip(target.params, net.params):
        dst[...] = src
    return target


def serialize(net: Network) -> bytes:
    parts = [MAGIC_PREFIX + FORMAT_VERSION, struct.pack("<I", len(net.layer_dims))]
    parts.append(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize(payload: bytes) -> Network:
    buf = memoryview(payload)
    magic_len = len(MAGIC_PREFIX) + 1
    if len(buf) < magic_len:
        raise CheckpointError("payload shorter than magic header", offset=len(buf))
    magic = bytes(buf[:magic_len])
    if not magic.startswith(MAGIC_PREFIX):
        raise CheckpointError(f"bad magic {magic!r}", offset=0)
    if magic[-1:] != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {magic[-1:]!r}, expected {FORMAT_VERSION!r}", offset=len(MAGIC_PREFIX))
    pos = magic_len

    def take(nbytes: int, what: str):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated payload while reading {what}", offset=pos)
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (n_dims,) = struct.unpack("<I", take(4, "layer count"))
    if n_dims < 2:
        raise CheckpointError(f"layer count {n_dims} < 2", offset=pos - 4)
    dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims, "layer dims"))
    weights, biases = [], []
    for l, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.frombuffer(take(8 * fi * fo, f"weights of layer {l}"), dtype="<f8").reshape(fi, fo)
        b = np.frombuffer(take(8 * fo, f"biases of layer {l}"), dtype="<f8")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes", offset=pos)
    return Network(dims, weights, biases)
