"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array. Operations build an acyclic graph of
closures; `Tensor.backward()` on a scalar output replays the graph once in
reverse topological order and populates `.grad` on every tensor that
requires gradients. All arithmetic is 64-bit; graphs are single-use
(running backward twice through the same nodes is an error, not silent
accumulation).
"""

from __future__ import annotations

import math

import numpy as np

# Additive mask value: finite, but exp(x - max) underflows to exactly 0.0.
NEG_BIAS = -1e30

_LOG_GUARD = 1e-300
_GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteError(ValueError):
    """Raised when an operation receives NaN/inf input it cannot accept."""


class BackwardError(RuntimeError):
    """Raised on misuse of the reverse pass (non-scalar root, reused graph)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse pass from a scalar output; populates `.grad` on leaves."""
        if self.data.size != 1:
            raise BackwardError(f"backward requires a scalar output, got shape {self.shape}")
        if self._done:
            raise BackwardError("backward was already run on this graph; rebuild it instead of reusing")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._done:
                raise BackwardError("graph shares nodes with one that already ran backward")
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()
                node._done = True

    # -- operator sugar (scalars are lifted to constants) --------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; compose explicitly")
        return mul(self, Tensor(1.0 / float(other)))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an op output, recording the closure only when gradients can flow."""
    tracked = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitive operations ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects >=2-d operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.transpose(inverse))

    out = _make(out_data, (a,), backward)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                key = [slice(None)] * g.ndim
                key[axis] = slice(lo, hi)
                t._accumulate(g[tuple(key)])

    out = _make(out_data, tuple(tensors), backward)
    return out


def index(a: Tensor, key) -> Tensor:
    """Basic (non-repeating) slicing/indexing."""
    out_data = a.data[key]

    def backward():
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] = out.grad
            a._accumulate(buf)

    out = _make(np.array(out_data, dtype=np.float64), (a,), backward)
    return out


def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        g = g.reshape(tuple(1 if i in axes else n for i, n in enumerate(shape)))
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(_restore_axes(out.grad, a.data.shape, axis, keepdims)))

    out = _make(out_data, (a,), backward)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out_data.size

    def backward():
        if a.requires_grad:
            g = _restore_axes(out.grad, a.data.shape, axis, keepdims)
            a._accumulate(g / scale)

    out = _make(out_data, (a,), backward)
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out_data)

    out = _make(out_data, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data < _LOG_GUARD):
        raise NonFiniteError(f"log argument below {_LOG_GUARD:g}; in-scope losses keep it strictly positive")
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward():
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
            a._accumulate(out.grad * local)

    out = _make(out_data, (a,), backward)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer ids; grads scatter-add back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        bad = np.argwhere((ids < 0) | (ids >= table.data.shape[0]))[0]
        raise ValueError(f"token id out of range at position {tuple(int(i) for i in bad)}")
    out_data = table.data[ids]

    def backward():
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, out.grad)
            table._accumulate(buf)

    out = _make(out_data, (table,), backward)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rejects non-finite input outright."""
    if not np.isfinite(a.data).all():
        raise NonFiniteError("softmax received non-finite logits")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        if a.requires_grad:
            g = out.grad
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    out = _make(out_data, (a,), backward)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NonFiniteError("log_softmax received non-finite logits")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward():
        if a.requires_grad:
            g = out.grad
            a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    out = _make(out_data, (a,), backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.data.shape[-1] == 0:
        raise ValueError("layer_norm over a zero-length last axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def backward():
        g = out.grad
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if x.requires_grad:
            n = x.data.shape[-1]
            gg = g * gain.data
            term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv_std)

    out = _make(out_data, (x, gain, bias), backward)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity unless training with p > 0."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    keep = (rng.random(x.data.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, Tensor(keep))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along `axis` to unit L2 norm; near-zero norms are an error."""
    norms = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if np.any(norms < 1e-12):
        raise ValueError("l2_normalize received a vector with norm below 1e-12 (degenerate representation)")
    out_data = x.data / norms

    def backward():
        if x.requires_grad:
            g = out.grad
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accumulate((g - out_data * dot) / norms)

    out = _make(out_data, (x,), backward)
    return out


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Composed from L2 normalization: <a, b> / (|a||b|) along `axis`."""
    return tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


def stop_gradient(a: Tensor) -> Tensor:
    """Value of `a` detached from the graph."""
    return Tensor(a.data)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the exact `hard` values while routing gradients through `soft`.

    Implemented as hard + (soft - stop_gradient(soft)): the parenthesized
    term is exactly zero elementwise, so forward values equal `hard` bitwise.
    """
    if hard.shape != soft.data.shape:
        raise ValueError(f"straight_through shape mismatch: {hard.shape} vs {soft.data.shape}")
    return add(Tensor(hard), sub(soft, stop_gradient(soft)))


def check_gradient(f, x: Tensor, h: float = 1e-6) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    `f` must be a deterministic scalar-valued function of a single tensor.
    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise BackwardError("check_gradient needs a scalar-valued function")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.reshape(-1)

    flat = x.data.copy().reshape(-1)
    shape = x.data.shape
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(Tensor(flat.reshape(shape).copy())).data)
        flat[i] = orig - h
        f_minus = float(f(Tensor(flat.reshape(shape).copy())).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return worst
