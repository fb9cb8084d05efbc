"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations needed by the attention model and its losses are
provided. Every op checks its output for NaN/Inf and raises
:class:`NonFiniteError`, so a diverging run fails at the op that produced
the bad value instead of at the optimizer.
"""

from __future__ import annotations

import collections
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "hinge",
    "tsum",
    "mean",
    "masked_mean",
    "masked_max",
    "logsumexp",
    "matmul",
    "einsum",
    "softmax",
    "softmax_rows",
    "normalize",
    "cosine",
    "take",
    "stack",
    "reshape",
    "transpose",
    "backward",
    "Adam",
    "AdamState",
    "adam_step",
    "degenerate_counts",
]

# Incremented whenever a zero-norm vector is met by ``cosine``/``normalize``.
degenerate_counts: collections.Counter = collections.Counter()


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """An array node in a recorded computation.

    ``requires_grad`` marks leaves whose gradient is wanted. Interior nodes
    requiring grad hold a closure mapping the output gradient to the
    gradients of their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite value produced by op {_op or 'leaf'!r}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def hinge(a) -> Tensor:
    """``[x]+ = max(0, x)``; the subgradient at exactly 0 is 0."""
    a = _as_tensor(a)
    active = a.data > 0
    return _make(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), "hinge")


# -- reductions ----------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def masked_mean(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Mean over ``axis`` of entries where ``mask`` is true; 0 where none are."""
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    count = m.sum(axis=axis, keepdims=True)
    scale = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0) * m
    out = (a.data * scale).sum(axis=axis)
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * scale,), "masked_mean")


def masked_max(a, mask: np.ndarray | None = None, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Max over ``axis`` restricted to ``mask``; returns ``(values, valid)``.

    Slices with no allowed entry give value 0 and ``valid`` False there.
    Ties resolve to the lowest index.
    """
    a = _as_tensor(a)
    m = np.ones(a.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    filled = np.where(m, a.data, -np.inf)
    idx = np.argmax(filled, axis=axis)
    valid = m.any(axis=axis)
    picked = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    out = np.where(valid, picked, 0.0)

    def bw(g):
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g * valid, axis), axis=axis)
        return (grad,)

    return _make(out, (a,), bw, "masked_max"), valid


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None, temperature: float = 1.0) -> Tensor:
    """``(1/t) log sum exp(t x)`` over ``axis`` (restricted to ``mask``).

    Slices with nothing selected give 0.
    """
    a = _as_tensor(a)
    m = np.ones(a.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    z = np.where(m, temperature * a.data, -np.inf)
    valid = m.any(axis=axis, keepdims=True)
    zmax = np.where(valid, np.max(z, axis=axis, keepdims=True), 0.0)
    ez = np.where(m, np.exp(z - zmax), 0.0)
    tot = ez.sum(axis=axis, keepdims=True)
    safe_tot = np.where(valid, tot, 1.0)
    out = np.where(valid, (np.log(safe_tot) + zmax) / temperature, 0.0).squeeze(axis)
    p = ez / safe_tot

    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * p,), "logsumexp")


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` for explicit-output subscripts.

    Each operand's indices must be distinct and must each appear either in
    the output or in another operand, so that every input gradient is itself
    an einsum.
    """
    ops = [_as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError("einsum operand count does not match subscripts")
    for k, s in enumerate(in_subs):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in operand {k}: {s!r}")
        others = out_sub + "".join(t for j, t in enumerate(in_subs) if j != k)
        if any(c not in others for c in s):
            raise ValueError(f"index of operand {k} is summed away without a partner: {s!r}")
    out = np.einsum(subscripts, *(o.data for o in ops))

    def bw(g):
        grads = []
        for k, s in enumerate(in_subs):
            if not ops[k].requires_grad:
                grads.append(None)
                continue
            rest = [t for j, t in enumerate(in_subs) if j != k]
            expr = ",".join([out_sub, *rest]) + "->" + s
            grads.append(np.einsum(expr, g, *(o.data for j, o in enumerate(ops) if j != k)))
        return grads

    return _make(out, tuple(ops), bw, "einsum")


def softmax(a, axis: int = -1, temperature_inv: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax of ``temperature_inv * a`` along ``axis`` with max subtraction.

    Masked-out entries receive weight 0. A slice with no allowed entry is
    returned as all zeros.
    """
    a = _as_tensor(a)
    z = temperature_inv * a.data
    if mask is None:
        z = z - z.max(axis=axis, keepdims=True)
        ez = np.exp(z)
        out = ez / ez.sum(axis=axis, keepdims=True)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        zf = np.where(m, z, -np.inf)
        valid = m.any(axis=axis, keepdims=True)
        zmax = np.where(valid, zf.max(axis=axis, keepdims=True), 0.0)
        ez = np.where(m, np.exp(np.where(m, z - zmax, 0.0)), 0.0)
        tot = ez.sum(axis=axis, keepdims=True)
        out = ez / np.where(tot > 0, tot, 1.0)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (temperature_inv * out * (g - inner),)

    return _make(out, (a,), bw, "softmax")


def softmax_rows(e, temperature_inv: float = 1.0) -> Tensor:
    e = _as_tensor(e)
    if e.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D tensor")
    return softmax(e, axis=1, temperature_inv=temperature_inv)


def normalize(a, axis: int = -1, count: bool = True) -> Tensor:
    """L2-normalize along ``axis``; zero vectors map to zero."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    zero = norm == 0
    if count and zero.any():
        degenerate_counts["zero_norm"] += int(zero.sum())
    safe = np.where(zero, 1.0, norm)
    out = np.where(zero, 0.0, a.data / safe)

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - out * proj) / safe),)

    return _make(out, (a,), bw, "normalize")


def cosine(a, b, axis: int = -1, count: bool = True) -> Tensor:
    """Cosine similarity along ``axis``; 0 when either vector has zero norm."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ValueError(f"cosine length mismatch: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    zero = (na == 0) | (nb == 0)
    if count and zero.any():
        degenerate_counts["zero_norm_cosine"] += int(np.broadcast_to(zero, np.broadcast_shapes(na.shape, nb.shape)).sum())
    sa = np.where(na == 0, 1.0, na)
    sb = np.where(nb == 0, 1.0, nb)
    cos = np.where(zero, 0.0, dot / (sa * sb))
    cos = np.clip(cos, -1.0, 1.0)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = np.where(zero, 0.0, g * (b.data / (sa * sb) - cos * a.data / (sa * sa)))
        gb = np.where(zero, 0.0, g * (a.data / (sa * sb) - cos * b.data / (sb * sb)))
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(cos.squeeze(axis), (a, b), bw, "cosine")


# -- shape ---------------------------------------------------------------


def take(a, idx) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(a.data[idx], (a,), bw, "take")


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = tuple(_as_tensor(t) for t in items)
    out = np.stack([t.data for t in items], axis=axis)
    return _make(out, items, lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


# -- backward pass -------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    A graph can be walked once; a second call on the same root raises
    :class:`GraphError` (rebuild the graph for a new pass).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already called on this graph")
    loss._consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- optimizer -----------------------------------------------------------


class AdamState:
    def __init__(self, shapes: Iterable[tuple[int, ...]]):
        shapes = list(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One Adam update; returns new parameter arrays and advances ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have equal length")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[k].shape:
            raise ValueError(f"shape mismatch for parameter {k}: {p.shape} vs grad {g.shape}")
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


class Adam:
    """Adam over a list of leaf tensors, reading their ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState(p.shape for p in self.params)

    def step(self) -> None:
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        new = adam_step(
            [p.data for p in self.params], grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps
        )
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
