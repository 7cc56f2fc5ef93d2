"""Minimal neural substrate: reverse-mode autodiff over numpy arrays, an MLP,
Adam, and a versioned binary checkpoint container.

Everything is float32 and strictly deterministic: parameter init, batch order
and gradient reduction depend only on the seeds handed in. Inference has a
plain-numpy fast path; training builds a small tape of Tensor nodes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError

MAGIC = b"EXCK"
VERSION = 1


# --------------------------------------------------------------------------
# autodiff tape
# --------------------------------------------------------------------------

class Tensor:
    """Node of the reverse-mode tape. value keeps its floating dtype
    (training uses float32; float64 is handy for gradient checks)."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float32)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        return float(self.value)

    # ---- ops ----
    def __add__(self, other):
        other = as_tensor(other)
        val = self.value + other.value

        def vjp(g):
            return _unbroadcast(g, self.value.shape), _unbroadcast(g, other.value.shape)

        return Tensor(val, parents=(self, other), vjp=vjp)

    def __sub__(self, other):
        other = as_tensor(other)
        val = self.value - other.value

        def vjp(g):
            return _unbroadcast(g, self.value.shape), _unbroadcast(-g, other.value.shape)

        return Tensor(val, parents=(self, other), vjp=vjp)

    def __mul__(self, other):
        other = as_tensor(other)
        val = self.value * other.value

        def vjp(g):
            return (_unbroadcast(g * other.value, self.value.shape),
                    _unbroadcast(g * self.value, other.value.shape))

        return Tensor(val, parents=(self, other), vjp=vjp)

    def matmul(self, other):
        other = as_tensor(other)
        val = self.value @ other.value

        def vjp(g):
            return g @ other.value.T, self.value.T @ g

        return Tensor(val, parents=(self, other), vjp=vjp)

    def relu(self):
        mask = self.value > 0

        def vjp(g):
            return (g * mask,)

        return Tensor(np.where(mask, self.value, 0.0), parents=(self,), vjp=vjp)

    def silu(self):
        sig = 1.0 / (1.0 + np.exp(-self.value))
        val = self.value * sig

        def vjp(g):
            return (g * (sig * (1.0 + self.value * (1.0 - sig))),)

        return Tensor(val, parents=(self,), vjp=vjp)

    def square(self):
        def vjp(g):
            return (g * (2.0 * self.value),)

        return Tensor(self.value * self.value, parents=(self,), vjp=vjp)

    def sum(self):
        def vjp(g):
            return (np.full_like(self.value, g),)

        return Tensor(self.value.sum(), parents=(self,), vjp=vjp)

    def mean(self):
        n = self.value.size

        def vjp(g):
            return (np.full_like(self.value, g / n),)

        return Tensor(self.value.mean(), parents=(self,), vjp=vjp)

    def mean_rows(self):
        """Mean over the batch axis of per-row values (1-D input)."""
        n = self.value.shape[0]

        def vjp(g):
            return (np.full_like(self.value, g / n),)

        return Tensor(self.value.mean(), parents=(self,), vjp=vjp)

    def sum_rows(self):
        """Row-wise sum of a 2-D tensor -> 1-D tensor."""
        def vjp(g):
            return (np.repeat(g[:, None], self.value.shape[1], axis=1),)

        return Tensor(self.value.sum(axis=1), parents=(self,), vjp=vjp)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=1) -> Tensor:
    vals = [t.value for t in tensors]
    sizes = [v.shape[axis] for v in vals]
    val = np.concatenate(vals, axis=axis)
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offs[i], offs[i + 1]), axis=axis)
                     for i in range(len(vals)))

    return Tensor(val, parents=tuple(tensors), vjp=vjp)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d loss / d node into .grad over the tape, in reverse
    topological order. loss must be scalar."""
    if loss.value.ndim != 0:
        raise ShapeMismatchError("backward expects a scalar loss")
    topo = []
    seen = set()

    def visit(node):
        stack = [(node, False)]
        while stack:
            n, processed = stack.pop()
            if processed:
                topo.append(n)
                continue
            if id(n) in seen or not n.requires_grad:
                continue
            seen.add(id(n))
            stack.append((n, True))
            for p in n._parents:
                stack.append((p, False))

    visit(loss)
    for node in topo:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        gs = node._vjp(node.grad)
        for parent, g in zip(node._parents, gs):
            if parent.requires_grad:
                parent.grad = parent.grad + g if parent.grad is not None else g


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

ACTIVATIONS = ("relu", "silu")


class Mlp:
    """Fully connected net with a fixed activation on hidden layers.

    Parameters live as Tensors (requires_grad); __call__ is the plain-numpy
    inference path, apply() builds the training graph over the same arrays.
    """

    def __init__(self, layer_dims, activation="silu", rng=None, dtype=np.float32):
        if len(layer_dims) < 2:
            raise ConfigError("need at least input and output dims")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.activation = activation
        self.dtype = dtype
        self.params = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            scale = np.sqrt(2.0 / d_in)
            W = Tensor((scale * rng.standard_normal((d_in, d_out))).astype(dtype), requires_grad=True)
            b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
            self.params.extend([W, b])

    @property
    def param_count(self):
        return sum(p.value.size for p in self.params)

    def _check_input(self, x):
        if x.shape[-1] != self.layer_dims[0]:
            raise ShapeMismatchError(
                f"input dim {x.shape[-1]} != expected {self.layer_dims[0]}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            W, b = self.params[2 * i].value, self.params[2 * i + 1].value
            x = x @ W + b
            if i < n_layers - 1:
                if self.activation == "relu":
                    x = np.maximum(x, 0.0)
                else:
                    x = x * (1.0 / (1.0 + np.exp(-x)))
        return x

    def apply(self, x: Tensor) -> Tensor:
        self._check_input(x.value)
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            x = x.matmul(W) + b
            if i < n_layers - 1:
                x = x.relu() if self.activation == "relu" else x.silu()
        return x


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net(x)


def zero_grads(params):
    for p in params:
        p.grad = None


def grads_of(params):
    return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    batch: int = 128
    epochs: int = 20
    seed: int = 0
    grad_clip: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")


class AdamState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0


def adam_step(params, grads, cfg: TrainConfig, state: AdamState):
    """Standard Adam update with bias correction and global-norm clipping."""
    if len(params) != len(grads):
        raise ShapeMismatchError("params/grads length mismatch")
    if cfg.grad_clip and cfg.grad_clip > 0:
        total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        if total > cfg.grad_clip:
            scale = np.float32(cfg.grad_clip / total)
            grads = [g * scale for g in grads]
    state.t += 1
    b1, b2 = cfg.betas
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape:
            raise ShapeMismatchError("gradient shape mismatch")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        p.value = p.value - np.float32(cfg.lr) * m_hat / (np.sqrt(v_hat) + np.float32(cfg.eps))


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

def _write_array(f, a):
    a = np.ascontiguousarray(a, dtype="<f4")
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes())


def _read_array(f):
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    n = int(np.prod(shape)) if shape else 1
    a = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
    return a.copy()


def save_checkpoint(path, nets: dict, meta: dict):
    """Versioned binary container: one or more named MLPs plus a JSON meta
    blob (training config echo, normalizer stats, schedule, dataset
    fingerprint)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(nets)))
    for name, net in nets.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", len(net.layer_dims)))
        buf.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
        act = net.activation.encode("utf-8")
        buf.write(struct.pack("<I", len(act)))
        buf.write(act)
        for p in net.params:
            _write_array(buf, p.value)
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ConfigError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (n_nets,) = struct.unpack("<I", f.read(4))
        nets = {}
        for _ in range(n_nets):
            (ln,) = struct.unpack("<I", f.read(4))
            name = f.read(ln).decode("utf-8")
            (nd,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{nd}I", f.read(4 * nd))
            (la,) = struct.unpack("<I", f.read(4))
            act = f.read(la).decode("utf-8")
            net = Mlp(list(dims), activation=act)
            for p in net.params:
                p.value = _read_array(f).reshape(p.value.shape)
            nets[name] = net
        (lm,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(lm).decode("utf-8"))
    return nets, meta


def dataset_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def minibatches(n: int, batch: int, epochs: int, rng: np.random.Generator):
    """Deterministic shuffled minibatch index stream."""
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            yield order[i:i + batch]
