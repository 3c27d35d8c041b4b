"""A small tape-based reverse-mode differentiation engine.

Only the closed set of primitives needed by the twin network and its losses
is supported. Operations record onto the active :class:`Tape` (entered with
``with Tape() as tape:``) whenever one of their inputs requires a gradient;
outside a tape they simply evaluate.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_(mul_const(x, 3.0))
    >>> grads = backward(tape, y)
    >>> x.grad
    array([3., 3.])
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import geometry, objectives
from .errors import InvalidInput, NonFiniteError, ShapeError


class Tensor:
    """An array node; ``requires_grad`` marks it as a differentiable leaf or result."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def stop_grad(x) -> Tensor:
    """Detached copy of ``x``: same values, never receives a gradient."""
    return Tensor(_data(x), requires_grad=False)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    saved: Any
    attrs: dict = field(default_factory=dict)


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("hysp_tape", default=None)


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Suspend recording: operations inside evaluate without touching any tape."""

    def __enter__(self):
        self._token = _ACTIVE.set(None)

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)


@dataclass(frozen=True)
class Primitive:
    fwd: Callable
    bwd: Callable


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str):
    def register(pair):
        PRIMITIVES[name] = Primitive(*pair())
        return pair

    return register


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def forward(op: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``op`` and record it on the active tape when needed."""
    try:
        prim = PRIMITIVES[op]
    except KeyError:
        raise InvalidInput(f"unknown primitive {op!r}") from None
    arrays = [_data(x) for x in inputs]
    out, saved = prim.fwd(*arrays, **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"primitive {op!r} produced non-finite values (input shapes {[a.shape for a in arrays]})")
    result = Tensor(out)
    tape = _ACTIVE.get()
    if tape is not None and any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        result.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), result, saved, attrs))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``; returns and stores leaf gradients."""
    if loss.data.size != 1:
        raise InvalidInput(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        arrays = [_data(x) for x in node.inputs]
        in_grads = PRIMITIVES[node.op].bwd(g, node.saved, *arrays, **node.attrs)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not (isinstance(x, Tensor) and x.requires_grad):
                continue
            key = id(x)
            grads[key] = grads[key] + gx if key in grads else gx
            if key not in produced:
                leaves[key] = x
    if not tape.nodes and loss.requires_grad:
        leaves[id(loss)] = loss
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        out[leaf] = leaf.grad
    return out


# --- primitives -------------------------------------------------------------


@primitive("matmul")
def _matmul():
    def fwd(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
        try:
            return a @ b, None
        except ValueError:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g, _, a, b):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return fwd, bwd


@primitive("add")
def _add():
    def fwd(a, b):
        _broadcast_shape("add", a, b)
        return a + b, None

    def bwd(g, _, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return fwd, bwd


@primitive("mul_const")
def _mul_const():
    # the multiplier is a constant attribute (scalar or broadcastable array)
    def fwd(a, k):
        k = np.asarray(k, dtype=np.float64)
        _broadcast_shape("mul_const", a, k)
        return a * k, None

    def bwd(g, _, a, k):
        return (_unbroadcast(g * np.asarray(k, dtype=np.float64), a.shape),)

    return fwd, bwd


@primitive("relu")
def _relu():
    def fwd(a):
        return np.maximum(a, 0.0), None

    def bwd(g, _, a):
        return (g * (a > 0),)

    return fwd, bwd


@primitive("tanh")
def _tanh():
    def fwd(a):
        t = np.tanh(a)
        return t, t

    def bwd(g, t, a):
        return (g * (1.0 - t * t),)

    return fwd, bwd


@primitive("concat")
def _concat():
    def fwd(*xs, axis):
        try:
            return np.concatenate(xs, axis=axis), None
        except ValueError:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None

    def bwd(g, _, *xs, axis):
        edges = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, edges, axis=axis))

    return fwd, bwd


@primitive("sum")
def _sum():
    def fwd(a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims), None

    def bwd(g, _, a, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return fwd, bwd


@primitive("mean")
def _mean():
    def fwd(a, axis=None, keepdims=False):
        return np.mean(a, axis=axis, keepdims=keepdims), None

    def bwd(g, _, a, axis=None, keepdims=False):
        axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return fwd, bwd


@primitive("reshape")
def _reshape():
    def fwd(a, shape):
        try:
            return a.reshape(shape), None
        except ValueError:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bwd(g, _, a, shape):
        return (g.reshape(a.shape),)

    return fwd, bwd


@primitive("conv_time")
def _conv_time():
    # x: (N, T, V, C), w: (K, C, O), b: (O,); zero "same" padding along T
    def fwd(x, w, b):
        if x.ndim != 4 or w.ndim != 3 or w.shape[1] != x.shape[-1] or b.shape != (w.shape[2],):
            raise ShapeError(f"conv_time: x {x.shape}, w {w.shape}, b {b.shape}")
        k = w.shape[0]
        if k % 2 == 0:
            raise ShapeError(f"conv_time: kernel length must be odd, got {k}")
        pad = k // 2
        t = x.shape[1]
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0), (0, 0)))
        out = np.zeros(x.shape[:3] + (w.shape[2],))
        for i in range(k):
            out += xp[:, i : i + t] @ w[i]
        return out + b, xp

    def bwd(g, xp, x, w, b):
        k = w.shape[0]
        pad = k // 2
        t = x.shape[1]
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        flat_g = g.reshape(-1, g.shape[-1])
        for i in range(k):
            gxp[:, i : i + t] += g @ w[i].T
            gw[i] = xp[:, i : i + t].reshape(-1, xp.shape[-1]).T @ flat_g
        gx = gxp[:, pad : pad + t]
        return gx, gw, flat_g.sum(axis=0)

    return fwd, bwd


@primitive("graph_agg")
def _graph_agg():
    # x: (..., V, C); adjacency is a constant (V, V) attribute
    def fwd(x, adjacency):
        a = np.asarray(adjacency, dtype=np.float64)
        if x.ndim < 2 or a.shape != (x.shape[-2], x.shape[-2]):
            raise ShapeError(f"graph_agg: adjacency {a.shape} does not match joints of {x.shape}")
        return a @ x, None

    def bwd(g, _, x, adjacency):
        return (np.asarray(adjacency).T @ g,)

    return fwd, bwd


@primitive("l2_normalize")
def _l2_normalize():
    def fwd(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(n == 0):
            raise InvalidInput("l2_normalize: zero-norm row")
        u = x / n
        return u, (u, n)

    def bwd(g, saved, x):
        u, n = saved
        return ((g - u * np.sum(u * g, axis=-1, keepdims=True)) / n,)

    return fwd, bwd


@primitive("exp_map0")
def _exp_map0():
    def fwd(z, c=1.0):
        return geometry.exp_map0(z, c), None

    def bwd(g, _, z, c=1.0):
        s = np.sqrt(c)
        r = np.linalg.norm(z, axis=-1, keepdims=True)
        x = s * r
        small = x < 1e-2
        xs = np.where(small, 1.0, x)
        rs = np.where(small, 1.0, r)
        th = np.tanh(xs)
        f = np.where(small, 1.0 - x * x / 3.0, th / xs)
        # d f / d r divided by r; the series branch is the analytic limit at z = 0
        fpr = np.where(small, s * s * (-2.0 / 3.0 + 8.0 * x * x / 15.0), (xs * (1.0 - th * th) - th) / (s * rs**3))
        e = f * z
        ne = np.linalg.norm(e, axis=-1, keepdims=True)
        limit = geometry.max_norm(c)
        clamped = ne > limit
        ne_safe = np.where(clamped, ne, 1.0)
        u = e / ne_safe
        ge = np.where(clamped, (limit / ne_safe) * (g - u * np.sum(u * g, axis=-1, keepdims=True)), g)
        return (f * ge + fpr * np.sum(z * ge, axis=-1, keepdims=True) * z,)

    return fwd, bwd


@primitive("batch_norm")
def _batch_norm():
    # normalises over the batch axis with biased variance, then scales and shifts
    def fwd(x, gamma, beta, eps=1e-5):
        if x.ndim != 2 or x.shape[0] < 2:
            raise ShapeError(f"batch_norm needs a (N>=2, D) batch, got {x.shape}")
        mu = x.mean(axis=0)
        inv = 1.0 / np.sqrt(x.var(axis=0) + eps)
        xhat = (x - mu) * inv
        return xhat * gamma + beta, (xhat, inv)

    def bwd(g, saved, x, gamma, beta, eps=1e-5):
        xhat, inv = saved
        n = x.shape[0]
        gx = g * gamma
        dx = inv / n * (n * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
        return dx, np.sum(g * xhat, axis=0), g.sum(axis=0)

    return fwd, bwd


def _poincare_euclid_grad(p, q, c):
    """Euclidean gradient of the Poincare distance with respect to ``p``."""
    a = 1.0 - c * np.sum(p * p, axis=-1, keepdims=True)
    b = 1.0 - c * np.sum(q * q, axis=-1, keepdims=True)
    diff = p - q
    w = np.linalg.norm(diff, axis=-1, keepdims=True)
    zero = w <= geometry.COINCIDE_EPS
    w_safe = np.where(zero, 1.0, w)
    grad = 2.0 / np.sqrt(a * b + c * w * w) * (diff / w_safe + c * w * p / a)
    return np.where(zero, 0.0, grad)


@primitive("poincare_loss")
def _poincare_loss():
    def fwd(h, h_hat, c=1.0):
        _broadcast_shape("poincare_loss", h, h_hat)
        return geometry.poincare_loss(h, h_hat, c), None

    def bwd(g, _, h, h_hat, c=1.0):
        hb, tb = np.broadcast_arrays(h, h_hat)
        gh = g[..., None] * _poincare_euclid_grad(hb, tb, c)
        gt = g[..., None] * _poincare_euclid_grad(tb, hb, c)
        return _unbroadcast(gh, h.shape), _unbroadcast(gt, h_hat.shape)

    return fwd, bwd


@primitive("cosine_loss")
def _cosine_loss():
    def fwd(h, h_hat):
        _broadcast_shape("cosine_loss", h, h_hat)
        return objectives.cosine_loss(h, h_hat), None

    def bwd(g, _, h, h_hat):
        hb, tb = np.broadcast_arrays(h, h_hat)
        nh = np.linalg.norm(hb, axis=-1, keepdims=True)
        nt = np.linalg.norm(tb, axis=-1, keepdims=True)
        dot = np.sum(hb * tb, axis=-1, keepdims=True)
        gh = -(tb / (nh * nt) - dot * hb / (nh**3 * nt))
        gt = -(hb / (nh * nt) - dot * tb / (nt**3 * nh))
        return _unbroadcast(g[..., None] * gh, h.shape), _unbroadcast(g[..., None] * gt, h_hat.shape)

    return fwd, bwd


@primitive("softmax_cross_entropy")
def _softmax_cross_entropy():
    # per-row loss; integer class labels are a constant attribute
    def fwd(logits, labels):
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or labels.shape != logits.shape[:1]:
            raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
        top = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - top)
        total = ex.sum(axis=1, keepdims=True)
        prob = ex / total
        lse = top[:, 0] + np.log(total[:, 0])
        return lse - logits[np.arange(len(labels)), labels], prob

    def bwd(g, prob, logits, labels):
        d = prob.copy()
        d[np.arange(len(d)), np.asarray(labels, dtype=np.int64)] -= 1.0
        return (g[:, None] * d,)

    return fwd, bwd


# --- convenience wrappers ----------------------------------------------------


def matmul(a, b) -> Tensor:
    return forward("matmul", a, b)


def add(a, b) -> Tensor:
    return forward("add", a, b)


def mul_const(a, k) -> Tensor:
    return forward("mul_const", a, k=k)


def relu(a) -> Tensor:
    return forward("relu", a)


def tanh(a) -> Tensor:
    return forward("tanh", a)


def concat(xs, axis: int = 0) -> Tensor:
    return forward("concat", *xs, axis=axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    return forward("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return forward("mean", a, axis=axis, keepdims=keepdims)


def reshape(a, shape) -> Tensor:
    return forward("reshape", a, shape=tuple(shape))


def conv_time(x, w, b) -> Tensor:
    return forward("conv_time", x, w, b)


def graph_agg(x, adjacency) -> Tensor:
    return forward("graph_agg", x, adjacency=adjacency)


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return forward("batch_norm", x, gamma, beta, eps=eps)


def l2_normalize(x) -> Tensor:
    return forward("l2_normalize", x)


def exp_map0(z, c: float = 1.0) -> Tensor:
    return forward("exp_map0", z, c=c)


def poincare_loss(h, h_hat, c: float = 1.0) -> Tensor:
    return forward("poincare_loss", h, h_hat, c=c)


def cosine_loss(h, h_hat) -> Tensor:
    return forward("cosine_loss", h, h_hat)


def softmax_cross_entropy(logits, labels) -> Tensor:
    return forward("softmax_cross_entropy", logits, labels=labels)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-6) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.array(_data(x), dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x))
        flat[i] = orig - step
        down = float(f(x))
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
