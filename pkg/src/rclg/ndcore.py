"""Dense float64 tensors with a small reverse-mode autodiff tape.

Only the operations the model and its losses need are provided. Every
operation records a backward closure on the output tensor; ``gradient``
walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by {op}")
        self.op = op


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> Tensor:
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        grads = _backprop(self)
        for node, g in grads.items():
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: Iterable[Tensor], op: str, backward) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(op)
    parents = tuple(parents)
    out = Tensor(values, _parents=parents, _op=op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward
    else:
        out._parents = ()
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --
# Elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result(a.values + b.values, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result(a.values - b.values, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), "mul",
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _result(out, (a, b), "div",
                   lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    av, bv = a.values, b.values

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(av @ bv, (a, b), "matmul", backward)


def spmatmul(adj: sp.spmatrix, z) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    z = as_tensor(z)
    if z.ndim != 2 or adj.shape[1] != z.shape[0]:
        raise ShapeError(f"spmatmul: shapes {adj.shape} and {z.shape} are not conformable")
    adj_t = adj.T.tocsr()
    return _result(np.asarray(adj @ z.values), (z,), "spmatmul", lambda g: (np.asarray(adj_t @ g),))


def scale(a, c: float) -> Tensor:
    return mul(a, float(c))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _result(out, (a,), "log", lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.values)
    return _result(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _result(av * av, (a,), "square", lambda g: (2.0 * g * av,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.values
    return _result(out, (a,), "reciprocal", lambda g: (-g * out * out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.values > 0
    return _result(np.where(pos, a.values, 0.0), (a,), "relu", lambda g: (g * pos,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    av = a.values
    inside = (av >= lo) & (av <= hi)
    return _result(np.clip(av, lo, hi), (a,), "clamp", lambda g: (g * inside,))


# --
# Shape manipulation


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result(a.values.T, (a,), "transpose", lambda g: (g.T,))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.values, ax1, ax2), (a,), "swapaxes",
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def stack(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: operands have differing shapes {sorted(shapes)}")
    out = np.stack([t.values for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(out, ts, "stack", backward)


def unsqueeze(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.expand_dims(a.values, axis), (a,), "unsqueeze",
                   lambda g: (np.squeeze(g, axis=axis),))


# --
# Reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a, axis: int) -> Tensor:  # noqa: A001
    """Max over ``axis``; the gradient goes to the first (lowest index) maximiser."""
    a = as_tensor(a)
    idx = np.argmax(a.values, axis=axis)
    out = np.take_along_axis(a.values, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros(a.shape)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _result(out, (a,), "max", backward)


# --
# Fused kernels


def softmax_rows(m) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    m = as_tensor(m)
    if m.ndim == 0 or m.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: last axis must be non-empty, got shape {m.shape}")
    shifted = m.values - m.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (m,), "softmax_rows", backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(m, gain, bias) -> Tensor:
    m, gain, bias = as_tensor(m), as_tensor(gain), as_tensor(bias)
    d = m.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature dim {d}")
    centred = sub(m, mean(m, axis=-1, keepdims=True))
    var = mean(square(centred), axis=-1, keepdims=True)
    normed = mul(centred, reciprocal(sqrt(add(var, LAYER_NORM_EPS))))
    return add(mul(normed, gain), bias)


def l2_normalize_rows(m) -> tuple[Tensor, int]:
    """Unit-normalise each row; zero rows pass through. Returns (tensor, zero_row_count)."""
    m = as_tensor(m)
    mv = m.values
    # scale by the largest entry first so tiny rows don't underflow when squared
    scale = np.abs(mv).max(axis=-1, keepdims=True)
    zero = scale == 0.0
    scaled = mv / np.where(zero, 1.0, scale)
    norms = scale * np.sqrt((scaled * scaled).sum(axis=-1, keepdims=True))
    safe = np.where(zero, 1.0, norms)
    out = mv / safe

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(zero, g, (g - out * proj) / safe),)

    return _result(out, (m,), "l2_normalize_rows", backward), int(zero.sum())


# --
# Gradients


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def _backprop(loss: Tensor) -> dict:
    if loss.values.size != 1:
        raise ShapeError(f"gradient: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    nodes: dict[int, Tensor] = {}
    for node in reversed(_topo_order(loss)):
        nodes[id(node)] = node
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return {nodes[k]: v for k, v in grads.items() if k in nodes}


def gradient(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Exact reverse-mode gradients of scalar ``loss``; unreachable params get zeros."""
    grads = {id(k): v for k, v in _backprop(loss).items()}
    return [np.array(grads.get(id(p), np.zeros(p.shape)), dtype=np.float64).reshape(p.shape)
            for p in params]


# --
# Random streams


class RngStream:
    """Counter-based (Philox) random streams keyed by (seed, stream_id, *keys).

    Drawing from one stream never perturbs another, so toggling a stochastic
    feature leaves the rest of a run unchanged.
    """

    def __init__(self, seed: int, stream_id: str = "default"):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream_id = stream_id

    def generator(self, *keys: int) -> np.random.Generator:
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32, zlib.crc32(self.stream_id.encode())]
        words.extend(int(k) for k in keys)
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, stream_id: str) -> RngStream:
        return RngStream(self.seed, stream_id)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r})"


def derive_seed(seed: int, *parts) -> int:
    """Stable 63-bit seed derived from a base seed and arbitrary printable parts."""
    text = "|".join([str(seed), *map(str, parts)]).encode()
    return int.from_bytes(np.random.SeedSequence(list(text)).generate_state(2, np.uint32).tobytes(),
                          "little") & ((1 << 63) - 1)
