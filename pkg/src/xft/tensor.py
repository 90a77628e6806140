"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Tensors hold flat row-major float buffers (float32 by default; float64 is
used by the finite-difference oracle). Every differentiable operation records
its inputs and a backward rule; ``backward`` replays the recorded graph in
reverse topological order and accumulates gradients into the leaves.

Broadcasting is deliberately limited to the cases the transformer needs:
bias addition (1-d vector against the last axis), scalar scaling, and
per-row column scaling. Anything else raises.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float array with an optional gradient slot.

    ``grad`` is populated on leaves (tensors created with
    ``requires_grad=True`` and not produced by an operation) by ``backward``,
    additively: running backward twice without clearing doubles it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic operators delegate to the module-level ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; divide by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def transpose(self):
        return transpose(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        backward(self)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the tracked subgraph (each node once)."""
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
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every tracked leaf's ``grad``.

    Non-leaf gradients are transient (scoped to this call), so repeated
    backward passes over the same graph add independent contributions.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        else:
            node.grad = g.copy() if node.grad is None else node.grad + g


def _is_scalar_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _sum_to_last_axis(g: np.ndarray) -> np.ndarray:
    """Reduce a gradient to a 1-d bias shape by summing leading axes."""
    if g.ndim == 1:
        return g
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b) -> Tensor:
    if _is_scalar_number(b):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    if not isinstance(b, Tensor):
        raise TypeError(f"cannot add Tensor and {type(b).__name__}")
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    # bias add: 1-d vector against the last axis of the other operand
    if b.ndim == 1 and a.shape[-1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, _sum_to_last_axis(g)))
    if a.ndim == 1 and b.shape[-1] == a.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (_sum_to_last_axis(g), g))
    raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar_number(b):
        c = float(b)
        return _make(a.data - c, (a,), lambda g: (g,))
    if not isinstance(b, Tensor):
        raise TypeError(f"cannot subtract {type(b).__name__} from Tensor")
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def rsub(c, a: Tensor) -> Tensor:
    """c - a for a Python scalar c (used for complement gates like 1 - s)."""
    if not _is_scalar_number(c):
        raise TypeError(f"cannot subtract Tensor from {type(c).__name__}")
    return _make(float(c) - a.data, (a,), lambda g: (-g,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar_number(b):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(b, Tensor):
        raise TypeError(f"cannot multiply Tensor and {type(b).__name__}")
    if a.shape == b.shape:
        return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    # size-1 tensor scaling an arbitrary tensor
    if a.size == 1 or b.size == 1:
        s, m = (a, b) if a.size == 1 else (b, a)
        s_scalar = s.data.reshape(())

        def bw_scalar(g, s=s, m=m, s_scalar=s_scalar):
            gs = (g * m.data).sum().reshape(s.shape).astype(g.dtype)
            gm = g * s_scalar
            return (gs, gm) if s is a else (gm, gs)

        return _make(m.data * s_scalar, (a, b), bw_scalar)
    # per-row column scaling: [T, 1] against [T, n]
    if a.ndim == 2 and b.ndim == 2 and a.shape[0] == b.shape[0] and 1 in (a.shape[1], b.shape[1]):
        col, m = (a, b) if a.shape[1] == 1 else (b, a)

        def bw_col(g, col=col, m=m):
            gc = (g * m.data).sum(axis=1, keepdims=True)
            gm = g * col.data
            return (gc, gm) if col is a else (gm, gc)

        return _make(col.data * m.data, (a, b), bw_col)
    raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul requires two Tensors")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _make(a.data.mean(), (a,), bw)


def gather_rows(a: Tensor, indices) -> Tensor:
    """out[i] = a[indices[i]] along the first axis. Backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows expects 1-d indices, got shape {idx.shape}")

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), bw)


def take_along_rows(a: Tensor, indices) -> Tensor:
    """out[i, j] = a[i, indices[i, j]] for a matrix a and [T, k] indices."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ValueError(f"take_along_rows shape mismatch: {a.shape} with indices {idx.shape}")
    rows = np.arange(a.shape[0])[:, None]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (np.broadcast_to(rows, idx.shape), idx), g)
        return (ga,)

    return _make(np.take_along_axis(a.data, idx, axis=1), (a,), bw)


def scatter_rows(values: Tensor, indices, n_rows: int) -> Tensor:
    """Zeros of shape [n_rows, d] with values[i] added at row indices[i]."""
    idx = np.asarray(indices, dtype=np.intp)
    if values.ndim != 2 or idx.ndim != 1 or idx.shape[0] != values.shape[0]:
        raise ValueError(f"scatter_rows shape mismatch: {values.shape} with indices {idx.shape}")
    out = np.zeros((n_rows, values.shape[1]), dtype=values.data.dtype)
    np.add.at(out, idx, values.data)
    return _make(out, (values,), lambda g: (g[idx],))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"slice_cols expects a matrix, got shape {a.shape}")

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _make(a.data[:, start:stop].copy(), (a,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts or any(p.ndim != 2 for p in parts):
        raise ValueError("concat_cols expects a nonempty sequence of matrices")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; output is positive and sums to 1."""
    if not np.isfinite(a.data).all():
        raise ValueError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _make(y, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(a.data).all():
        raise ValueError("log_softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        return (g * dy,)

    return _make(y, (a,), bw)


def identity(a: Tensor) -> Tensor:
    """Identity activation (testing stand-in for the FFN nonlinearity)."""
    return _make(a.data.copy(), (a,), lambda g: (g,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization with learned gain and bias."""
    if x.shape[-1] != gain.shape[0] or gain.shape != bias.shape:
        raise ValueError(f"layer_norm shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        n = x.shape[-1]
        gb = _sum_to_last_axis(g) if bias.requires_grad else None
        gg = _sum_to_last_axis(g * xhat) if gain.requires_grad else None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        else:
            gx = None
        return gx, gg, gb

    return _make(y, (x, gain, bias), bw)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-3,
    n_probes: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of the current parameter
    values. The error per probed element is
    |analytic - central| / (|analytic| + |central| + eps). With ``n_probes``
    set, a seeded random subset of parameter elements is probed; otherwise
    every element is. Run this on float64 parameters: float32 evaluation
    noise divided by 2h dominates the quantity being measured.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    probes: list[tuple[int, int]] = [
        (pi, j) for pi, p in enumerate(params) for j in range(p.size)
    ]
    if n_probes is not None and n_probes < len(probes):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(probes), size=n_probes, replace=False)
        probes = [probes[int(c)] for c in chosen]

    max_err = 0.0
    with no_grad():
        for pi, j in probes:
            flat = params[pi].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            central = (fp - fm) / (2.0 * h)
            a = float(analytic[pi].reshape(-1)[j])
            err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            max_err = max(max_err, err)
    return max_err
