"""Small dense-network engine: MLP containers, manual backprop, Adam, RNG keys.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer is
``x @ W + b``. Parameters default to float32; sums and means that feed
losses and bias gradients accumulate in float64.
"""

from __future__ import annotations

import enum
import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, BadMagicError, ShapeError, TrainingDivergenceError, TruncatedFileError

CHECKPOINT_MAGIC = b"PUORLNN1"


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"
    SIGMOID = "sigmoid"


def _apply(act, z):
    if act is Activation.RELU:
        return np.maximum(z, 0)
    if act is Activation.TANH:
        return np.tanh(z)
    if act is Activation.SIGMOID:
        return sigmoid(z)
    return z


def _apply_grad(act, z, y, g):
    # g is d/dy; returns d/dz
    if act is Activation.RELU:
        return g * (y > 0)
    if act is Activation.TANH:
        return g * (1 - y * y)
    if act is Activation.SIGMOID:
        return g * (y * (1 - y))
    return g


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class Mlp:
    layer_dims: list
    weights: list
    biases: list
    activation: Activation = Activation.RELU
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.activation = Activation(self.activation)
        self.output_activation = Activation(self.output_activation)
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise ShapeError(f"layer_dims must hold >= 2 positive ints, got {self.layer_dims}")
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ShapeError(f"expected {n} weight/bias blocks, got {len(self.weights)}/{len(self.biases)}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape:
                raise ShapeError(f"layer {i} weight shape {w.shape} != {shape}")
            if b.shape != (shape[1],):
                raise ShapeError(f"layer {i} bias shape {b.shape} != {(shape[1],)}")

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self):
        return Mlp(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.output_activation,
        )

    def parameters(self, prefix=""):
        """Live references keyed by path, e.g. ``critic1.weights[0]``."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}weights[{i}]"] = w
            out[f"{prefix}biases[{i}]"] = b
        return out

    def __call__(self, batch):
        return forward(self, batch)


def init_mlp(layer_dims, rng, activation=Activation.RELU, output_activation=Activation.IDENTITY,
             dtype=np.float32):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    gen = rng.gen if isinstance(rng, Rng) else rng
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(gen.uniform(-bound, bound, size=(fan_out,)).astype(dtype))
    return Mlp(list(layer_dims), weights, biases, activation, output_activation)


@dataclass
class Cache:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    outputs: np.ndarray


def _check_batch(net, batch):
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != net.in_dim:
        cols = batch.shape[1] if batch.ndim == 2 else batch.shape
        raise ShapeError(f"batch has {cols} columns, network expects {net.in_dim}")
    return batch.astype(net.dtype, copy=False)


def forward(net, batch, return_cache=False):
    x = _check_batch(net, batch)
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(x)
        z = x @ w
        z += b
        act = net.output_activation if i == last else net.activation
        # ReLU backward only needs the output sign, so it can overwrite z.
        if act is Activation.RELU:
            pre.append(None)
            x = np.maximum(z, 0, out=z)
        else:
            pre.append(z)
            x = _apply(act, z)
    if return_cache:
        return x, Cache(inputs, pre, x)
    return x


@dataclass
class Gradients:
    weights: list
    biases: list
    inputs: np.ndarray

    def named(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}weights[{i}]"] = w
            out[f"{prefix}biases[{i}]"] = b
        return out


def backward(net, batch, upstream_grad, cache=None, wrt="output"):
    """Gradient of ``sum(upstream_grad * y)`` for every parameter and the input.

    ``wrt="logits"`` means ``upstream_grad`` is already taken with respect to
    the last pre-activation, which sidesteps dividing by a saturated sigmoid.
    """
    if cache is None:
        _, cache = forward(net, batch, return_cache=True)
    g = np.asarray(upstream_grad, dtype=net.dtype)
    if g.shape != cache.outputs.shape:
        raise ShapeError(f"upstream grad shape {g.shape} != output shape {cache.outputs.shape}")
    last = len(net.weights) - 1
    dws = [None] * len(net.weights)
    dbs = [None] * len(net.weights)
    for i in range(last, -1, -1):
        if i == last:
            if wrt == "output":
                g = _apply_grad(net.output_activation, cache.pre[i], cache.outputs, g)
        else:
            y = cache.inputs[i + 1]
            g = _apply_grad(net.activation, cache.pre[i], y, g)
        dws[i] = cache.inputs[i].T @ g
        dbs[i] = g.sum(axis=0, dtype=np.float64).astype(net.dtype)
        g = g @ net.weights[i].T
    return Gradients(dws, dbs, g)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_init(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(lr, beta1, beta2, eps, 0,
                     {k: np.zeros_like(p) for k, p in params.items()},
                     {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ShapeError("parameter, gradient and moment keys differ")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"{k}: grad shape {g.shape} != param shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {k}", path=k, step=state.step)
    state.step += 1
    t = state.step
    lr_t = state.lr * np.sqrt(1.0 - state.beta2 ** t) / (1.0 - state.beta1 ** t)
    eps_t = state.eps * np.sqrt(1.0 - state.beta2 ** t)
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        # same as lr * m_hat / (sqrt(v_hat) + eps), with corrections folded into scalars
        denom = np.sqrt(v)
        denom += eps_t
        p -= (lr_t * m / denom).astype(p.dtype, copy=False)
    return params, state


def polyak_update(target, source, tau):
    """target <- (1 - tau) * target + tau * source, in place."""
    for tw, sw in zip(target.weights + target.biases, source.weights + source.biases):
        tw *= 1 - tau
        tw += tau * sw


# ---------------------------------------------------------------- checkpoints

def write_mlp(net, fh):
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", len(net.layer_dims)))
    fh.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
    for w, b in zip(net.weights, net.biases):
        fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(data)}")
    return data


def read_mlp(fh, activation=Activation.RELU, output_activation=Activation.IDENTITY):
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    if n < 2 or n > 64:
        raise FormatError(f"implausible layer count {n}")
    dims = list(struct.unpack(f"<{n}I", _read_exact(fh, 4 * n)))
    weights, biases = [], []
    for fi, fo in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(_read_exact(fh, 4 * fi * fo), dtype="<f4").reshape(fi, fo)
        b = np.frombuffer(_read_exact(fh, 4 * fo), dtype="<f4")
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
    return Mlp(dims, weights, biases, activation, output_activation)


def mlp_to_bytes(net):
    buf = io.BytesIO()
    write_mlp(net, buf)
    return buf.getvalue()


def mlp_from_bytes(data, activation=Activation.RELU, output_activation=Activation.IDENTITY):
    return read_mlp(io.BytesIO(data), activation, output_activation)


def save_mlp(net, path):
    with open(path, "wb") as fh:
        write_mlp(net, fh)


def load_mlp(path, activation=Activation.RELU, output_activation=Activation.IDENTITY):
    with open(path, "rb") as fh:
        return read_mlp(fh, activation, output_activation)


# ------------------------------------------------------------------------ rng

def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("integer rng keys must be nonnegative")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class Rng:
    """Keyed Philox stream.

    ``Rng(seed).child("a", 3)`` always yields the same stream: the child is
    ``Philox(SeedSequence(seed, spawn_key=path))`` where string keys map to the
    first four little-endian bytes of their SHA-256. Children never consume or
    share the parent's state.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        self._gen = None

    @property
    def gen(self):
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, *keys):
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
