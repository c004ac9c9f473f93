"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine in the micrograd style: every primitive records
its parents and a vector-Jacobian closure on the output node, `backward`
replays the tape in reverse topological order. Training runs in float64 so
finite-difference checks are meaningful; float32 is available for inference.

Subgradient conventions are fixed for determinism: relu'(0) = 0, and
reduce_max / reduce_min route their gradient to the first extremal index.
"""

from __future__ import annotations

import numpy as np


class DiffcoreError(Exception):
    pass


class ShapeMismatch(DiffcoreError):
    pass


class DomainError(DiffcoreError):
    pass


class NonScalarLoss(DiffcoreError):
    pass


class DoubleBackward(DiffcoreError):
    pass


class Tensor:
    """N-d array with an optional gradient and a record of how it was made."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # preserve float32 for inference-mode graphs, lift everything
            # else to the float64 training dtype
            if isinstance(data, np.ndarray) and data.dtype == np.float32:
                dtype = np.float32
            else:
                dtype = np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Reverse-topological record of the subgraph below a root node."""

    def __init__(self, nodes: list):
        self.nodes = nodes  # topological order, root last

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, visited, stack = [], set(), [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return cls(order)

    def run_backward(self, root: Tensor):
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every requires_grad tensor."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}, expected a scalar")
    if loss._spent:
        raise DoubleBackward("backward already ran on this node; rebuild the graph")
    loss._spent = True
    Tape.from_root(loss).run_backward(loss)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeMismatch("matmul requires at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul inner dims {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ad = ad[None, :]
        if bd.ndim == 1:
            bd = bd[:, None]
        gm = g
        if a.ndim == 1:
            gm = np.expand_dims(gm, -2)
        if b.ndim == 1:
            gm = np.expand_dims(gm, -1)
        ga = gm @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gm
        if a.ndim == 1:
            ga = np.squeeze(ga, -2)
        if b.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of negative value")
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out),)

    return _make(out, (a,), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    # relu'(0) = 0: the "under" branch, keeps kink handling deterministic
    return _make(out, (a,), lambda g: (g * (a.data > 0.0),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg = np.exp(np.minimum(a.data, 0.0)) - 1.0
    out = np.where(a.data > 0.0, a.data, alpha * neg)

    def vjp(g):
        return (g * np.where(a.data > 0.0, 1.0, alpha * (neg + 1.0)),)

    return _make(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stochastic along `axis`; -inf entries map to exact zeros."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where mask is true; no gradient flows to them."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0.0, g),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _make(out, (a,), vjp)


def _reduce_extremum(a, axis, keepdims, argfn, valfn):
    a = as_tensor(a)
    out = valfn(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        full = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(argfn(a.data), a.data.shape)  # first extremum
            full[idx] = g if np.ndim(g) == 0 else g.reshape(())
        else:
            idx = argfn(a.data, axis=axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis=axis)
        return (full,)

    return _make(out, (a,), vjp)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extremum(a, axis, keepdims, np.argmax, np.max)


def reduce_min(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extremum(a, axis, keepdims, np.argmin, np.min)


def tslice(a, key) -> Tensor:
    """Indexing, both basic slices and integer-array gathers (embedding rows)."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)  # accumulates over repeated gather indices
        return (full,)

    return _make(out, (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(out, tensors, vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    """Swap the last two axes, the matmul-transpose used by attention."""
    a = as_tensor(a)
    return _make(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def l2_norm_rows(a) -> Tensor:
    """Euclidean norm along the last axis. Subgradient 0 at exactly-zero rows."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=-1))

    def vjp(g):
        denom = np.where(out == 0.0, 1.0, out)
        scale = np.where(out == 0.0, 0.0, g / denom)
        return (a.data * scale[..., None],)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f, x, eps: float = 1e-5, coords=None, rng=None, max_coords=None):
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor. `coords` restricts the check to the
    given flat indices; `max_coords` subsamples that many indices with `rng`
    (all coordinates by default). Relative error per coordinate is
    |analytic - numeric| / (|numeric| + 1e-8).
    """
    x = x if isinstance(x, Tensor) else Tensor(x, requires_grad=True)
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    coords = np.asarray(coords)
    if max_coords is not None and coords.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(coords, size=max_coords, replace=False)

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        rel = abs(analytic[i] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, rel)
    return worst
