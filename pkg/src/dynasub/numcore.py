"""Dense-network numerics: a small reverse-mode tape, dense layers, optimizers.

Everything runs in float64. The tape covers the fixed set of primitives the
models and losses in this package are built from; it is not a general
autodiff system.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    """An array that records how it was computed when any input needs grads."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf needing grads."""
    if not root.requires_grad:
        return
    if seed is None:
        if root.data.size != 1:
            raise ShapeError("seed gradient required for non-scalar root")
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=DTYPE)
    if seed.shape != root.data.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {root.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b with w stored as (out, in)."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != layer fan-in {w.shape[1]}")
    return _node(x.data @ w.data.T + b.data, (x, w, b),
                 lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))


def bmv(w, x) -> Tensor:
    """Row-wise matrix-vector product: out[i] = w[i] @ x[i]."""
    w, x = as_tensor(w), as_tensor(x)
    out = np.einsum("bij,bj->bi", w.data, x.data)
    return _node(out, (w, x),
                 lambda g: (g[:, :, None] * x.data[:, None, :],
                            np.einsum("bij,bi->bj", w.data, g)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tsoftplus(a) -> Tensor:
    a = as_tensor(a)
    return _node(softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def identity(a) -> Tensor:
    return as_tensor(a)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(out, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _node(a.data[idx], (a,), bw)


def take_rows(a, rows) -> Tensor:
    """Gather along axis 0; repeated rows accumulate gradient."""
    rows = np.asarray(rows, dtype=np.intp)
    return getitem(a, rows)


def concat(ts: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def maximum0(a) -> Tensor:
    return relu(a)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a.data - s),)
    return _node(out, (a,), bw)


def tlog_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    out = log_softmax(a.data, axis=axis)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _node(out, (a,), bw)


ACTIVATIONS = {
    "relu": relu,
    "identity": identity,
    "sigmoid": sigmoid,
    "softplus": tsoftplus,
}


# ---------------------------------------------------------- array functions

def _sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_softmax(v, axis=-1):
    v = np.asarray(v, dtype=DTYPE)
    m = np.max(v, axis=axis, keepdims=True)
    z = v - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_t(v, tau: float = 1.0, axis=-1):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return np.exp(log_softmax(np.asarray(v, dtype=DTYPE) / tau, axis=axis))


# -------------------------------------------------------------- dense nets

@dataclass
class DenseLayer:
    weight: Tensor  # (out, in)
    bias: Tensor    # (out,)
    activation: str = "identity"

    @property
    def fan_in(self):
        return self.weight.shape[1]

    @property
    def fan_out(self):
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        return ACTIVATIONS[self.activation](linear(x, self.weight, self.bias))


class DenseNet:
    """Feed-forward stack of dense layers with a named parameter registry."""

    def __init__(self, layers: Sequence[DenseLayer], prefix: str = "net"):
        for a, b in zip(layers, layers[1:]):
            if a.fan_out != b.fan_in:
                raise ShapeError(f"layer widths do not chain: {a.fan_out} -> {b.fan_in}")
        self.layers = list(layers)
        self.prefix = prefix
        self._recorded: Tensor | None = None
        for i, layer in enumerate(self.layers):
            layer.weight.name = f"{prefix}.{i}.weight"
            layer.bias.name = f"{prefix}.{i}.bias"

    @classmethod
    def build(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
              prefix: str = "net", zero: bool = False) -> "DenseNet":
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fin, fout, act in zip(sizes, sizes[1:], activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if zero:
                w = np.zeros((fout, fin))
            else:
                # He-style for relu, Glorot-style otherwise
                scale = math.sqrt(2.0 / fin) if act == "relu" else math.sqrt(1.0 / fin)
                w = rng.normal(0.0, scale, size=(fout, fin))
            layers.append(DenseLayer(Tensor(w, True), Tensor(np.zeros(fout), True), act))
        return cls(layers, prefix)

    @property
    def in_dim(self):
        return self.layers[0].fan_in

    @property
    def out_dim(self):
        return self.layers[-1].fan_out

    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out[layer.weight.name] = layer.weight
            out[layer.bias.name] = layer.bias
        return out

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        if h.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.prefix}: input width {h.shape[-1]} != {self.in_dim}")
        for layer in self.layers:
            h = layer(h)
        return h


def mlp_forward(net: DenseNet, x, record: bool = False) -> np.ndarray:
    """Evaluate ``net`` on a batch; with ``record`` keep the tape for :func:`mlp_backward`."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected (B, {net.in_dim}) input, got {x.shape}")
    if record:
        out = net(Tensor(x))
        net._recorded = out
        return out.data.copy()
    # no leaf requires grad on a detached copy -> no tape
    h = x
    for layer in net.layers:
        h = ACTIVATIONS[layer.activation](Tensor(h @ layer.weight.data.T + layer.bias.data)).data
    return h


def mlp_backward(net: DenseNet, loss_grad) -> dict[str, np.ndarray]:
    """Fill gradient buffers from an upstream gradient on the recorded output."""
    if net._recorded is None:
        raise StateError(f"{net.prefix}: backward called without a recorded forward")
    params = net.params()
    for p in params.values():
        p.grad = None
    backward(net._recorded, loss_grad)
    net._recorded = None
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * s
    return total


# -------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 5e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")

    def reset_rows(self, name: str, rows):
        """Forget moments for selected rows of one slot (used after structural edits)."""
        for buf in (self.m, self.v):
            if name in buf:
                buf[name][rows] = 0.0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("kind", "lr", "weight_decay", "beta1", "beta2", "eps", "step")}
        d["m"] = {k: _encode_array(a) for k, a in self.m.items()}
        d["v"] = {k: _encode_array(a) for k, a in self.v.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        d = dict(d)
        m = {k: _decode_array(a) for k, a in d.pop("m").items()}
        v = {k: _decode_array(a) for k, a in d.pop("v").items()}
        return cls(m=m, v=v, **d)


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray], masks: dict[str, np.ndarray] | None = None,
                   lr: float | None = None, lr_scale: dict[str, float] | None = None) -> dict[str, np.ndarray]:
    """Update ``params`` in place.

    Adam uses bias-corrected moments with decoupled weight decay
    (``p *= 1 - lr*wd`` before the Adam delta). ``masks`` restricts the update
    of a slot to entries where the mask is true; unmasked entries keep their
    values and moments bit-for-bit. ``lr_scale`` multiplies the rate of
    individual slots.
    """
    base_lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter slot {name!r}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        mask = None if masks is None else masks.get(name)
        lr = base_lr * (1.0 if lr_scale is None else lr_scale.get(name, 1.0))
        if state.kind == "sgd":
            new = p - lr * g
        else:
            m = state.m.setdefault(name, np.zeros_like(p))
            v = state.v.setdefault(name, np.zeros_like(p))
            m_new = state.beta1 * m + (1 - state.beta1) * g
            v_new = state.beta2 * v + (1 - state.beta2) * g * g
            mhat = m_new / (1 - state.beta1 ** t)
            vhat = v_new / (1 - state.beta2 ** t)
            new = p * (1 - lr * state.weight_decay) - lr * mhat / (np.sqrt(vhat) + state.eps)
            if mask is None:
                m[...] = m_new
                v[...] = v_new
            else:
                m[...] = np.where(mask, m_new, m)
                v[...] = np.where(mask, v_new, v)
        p[...] = new if mask is None else np.where(mask, new, p)
    return params


@dataclass
class LrSchedule:
    base_lr: float
    t_max: int
    min_lr: float = 0.0


def cosine_lr(sched: LrSchedule, t: int) -> float:
    """Cosine annealing; steps past ``t_max`` stay at ``min_lr``."""
    if t >= sched.t_max:
        return sched.min_lr
    t = max(t, 0)
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1 + math.cos(math.pi * t / sched.t_max))


# ------------------------------------------------------------------ random

STREAMS = ("init", "reparam", "data", "augment", "controller", "classifier", "adapt", "eval")


def rng_stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Counter-based generator for one purpose; independent of every other purpose."""
    key = (STREAMS.index(purpose),) + tuple(int(c) for c in counters)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def reparameterize(mu, log_sigma, rng: np.random.Generator | None, mode: str = "vae") -> Tensor:
    """mu + eps * scale.

    ``mode="vae"`` treats log_sigma as a log-variance (scale exp(0.5*ls));
    ``mode="cluster"`` treats it as a log-std (scale exp(ls)). ``rng=None``
    turns the noise off and returns mu.
    """
    mu, log_sigma = as_tensor(mu), as_tensor(log_sigma)
    if mu.shape != log_sigma.shape:
        raise ShapeError(f"mu {mu.shape} vs log_sigma {log_sigma.shape}")
    if rng is None:
        return mu
    eps = rng.standard_normal(mu.shape)
    if mode == "vae":
        scale = exp(log_sigma * 0.5)
    elif mode == "cluster":
        scale = exp(log_sigma)
    else:
        raise ValueError(f"unknown reparameterization mode {mode!r}")
    return mu + scale * eps


# -------------------------------------------------------------- checkpoint

def _encode_array(a) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _decode_array(d) -> np.ndarray:
    return np.asarray(d["data"], dtype=DTYPE).reshape(d["shape"])


def save_checkpoint(path, params: dict[str, np.ndarray], optimizers: dict | None = None,
                    meta: dict | None = None) -> None:
    doc = {
        "params": {k: _encode_array(v) for k, v in params.items()},
        "optimizers": {k: s.to_dict() for k, s in (optimizers or {}).items()},
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, OptimizerState], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    params = {k: _decode_array(v) for k, v in doc["params"].items()}
    opts = {k: OptimizerState.from_dict(v) for k, v in doc.get("optimizers", {}).items()}
    return params, opts, doc.get("meta", {})
