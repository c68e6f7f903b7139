"""Dense float64 tensors with eager reverse-mode automatic differentiation.

Every operation builds its graph node at call time; ``backward`` walks the
node list in reverse topological order and frees it afterwards. Broadcasting
is limited to python scalars and per-row bias vectors so that shape mistakes
fail loudly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "sum",
    "mean",
    "max",
    "softmax",
    "reshape",
    "transpose",
    "concat",
    "gather",
    "repeat_rows",
    "conv2d",
    "conv_output_size",
    "grad_check",
    "no_grad",
]

Scalar = (int, float, np.floating, np.integer)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("root does not depend on any tensor with requires_grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not isinstance(other, Scalar):
            raise TypeError("only division by a python scalar is supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ------------------------------------------------------------
def _binary_kind(a: Tensor, b) -> str:
    if isinstance(b, Scalar):
        return "scalar"
    if not isinstance(b, Tensor):
        raise TypeError(f"expected Tensor or python scalar, got {type(b).__name__}")
    if b.shape == a.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "row"
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}: only scalars and per-row bias broadcast")


def add(a: Tensor, b) -> Tensor:
    if isinstance(a, Scalar):
        a, b = b, a
    kind = _binary_kind(a, b)
    if kind == "scalar":
        return Tensor._make(a.data + float(b), (a,), lambda g: (g,))
    if kind == "same":
        return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))
    lead = tuple(range(a.ndim - 1))
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Scalar):
        return add(a, -float(b))
    kind = _binary_kind(a, b)
    if kind == "same":
        return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))
    lead = tuple(range(a.ndim - 1))
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g.sum(axis=lead)))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(a, Scalar):
        a, b = b, a
    kind = _binary_kind(a, b)
    if kind == "scalar":
        s = float(b)
        return Tensor._make(a.data * s, (a,), lambda g: (g * s,))
    ad, bd = a.data, b.data
    if kind == "same":
        return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    lead = tuple(range(a.ndim - 1))
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum(axis=lead)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor._make(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    x = a.data
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions -------------------------------------------------------------
def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _normalize_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes)

    def backward(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axes), 1.0 / count)


def max(a: Tensor, axis: int = 0) -> Tensor:  # noqa: A001
    """Max-pool along ``axis``; gradient goes to the first maximal entry."""
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.put_along_axis(grad, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (grad,)

    return Tensor._make(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(a.data).any():
        raise ValueError("softmax received NaN input")
    ax = axis % a.ndim
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return Tensor._make(s, (a,), backward)


# -- shape manipulation -----------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(np.ascontiguousarray(out), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            pieces.append(g[tuple(sl)])
        return pieces

    return Tensor._make(out, tuple(tensors), backward)


def _scatter_rows(idx: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``g`` into an n-row array at positions ``idx`` (deterministic order)."""
    m = idx.size
    flat = g.reshape(m, -1)
    sel = sparse.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))
    return np.asarray(sel @ flat).reshape((n,) + g.shape[1:])


def gather(a: Tensor, index) -> Tensor:
    """Select rows (first axis) by integer index; repeated indices accumulate."""
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for first axis of size {n}")
    return Tensor._make(a.data[idx], (a,), lambda g: (_scatter_rows(idx, g, n),))


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each row ``k`` times consecutively (gather by repeat(arange(n), k))."""
    shape = a.shape
    out = np.repeat(a.data, k, axis=0)
    return Tensor._make(out, (a,), lambda g: (g.reshape((shape[0], k) + shape[1:]).sum(axis=1),))


def _slice(a: Tensor, key) -> Tensor:
    if isinstance(key, (np.ndarray, list)):
        return gather(a, key)
    out = a.data[key]
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[key] += g
        return (grad,)

    return Tensor._make(np.array(out, dtype=np.float64), (a,), backward)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def conv_output_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _conv_taps(xp, kh, kw, stride, dilation, ho, wo):
    for ky in range(kh):
        for kx in range(kw):
            y0, x0 = ky * dilation, kx * dilation
            yield ky, kx, xp[:, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    exact: bool = False,
) -> Tensor:
    """2-D cross-correlation of a single C_in×H×W image with a C_out×C_in×kh×kw kernel.

    The default path is an im2col matrix product. ``exact=True`` instead
    accumulates taps one at a time in (c_in, ky, kx) order, which reproduces a
    naive nested loop bit for bit but is slow for many channels.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d expects C×H×W input and 4-D kernel, got {x.shape}, {w.shape}")
    c_in, h, wd = x.shape
    c_out, kc, kh, kw = w.shape
    if kc != c_in:
        raise ValueError(f"kernel expects {kc} input channels, input has {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel sizes must be odd")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(wd, kw, stride, dilation, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be {ho}×{wo}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wdat = w.data
    if exact:
        out = np.zeros((c_out, ho, wo))
        taps = list(_conv_taps(xp, kh, kw, stride, dilation, ho, wo))
        for ci in range(c_in):
            for ky, kx, patch in taps:
                out += wdat[:, ci, ky, kx, None, None] * patch[ci]
        cols = None
    else:
        cols = np.empty((c_in, kh, kw, ho, wo))
        for ky, kx, patch in _conv_taps(xp, kh, kw, stride, dilation, ho, wo):
            cols[:, ky, kx] = patch
        cols = cols.reshape(c_in * kh * kw, ho * wo)
        out = (wdat.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo)
    if b is not None:
        if b.shape != (c_out,):
            raise ValueError(f"bias must have shape ({c_out},), got {b.shape}")
        out = out + b.data[:, None, None]

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = gx = gb = None
        if w.requires_grad:
            if cols is None:
                gw = np.zeros_like(wdat)
                for ky, kx, patch in _conv_taps(xp, kh, kw, stride, dilation, ho, wo):
                    gw[:, :, ky, kx] = g2 @ patch.reshape(c_in, -1).T
            else:
                gw = (g2 @ cols.T).reshape(wdat.shape)
        if x.requires_grad:
            gcols = (wdat.reshape(c_out, -1).T @ g2).reshape(c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape)
            for ky in range(kh):
                for kx in range(kw):
                    y0, x0 = ky * dilation, kx * dilation
                    gxp[:, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride] += gcols[:, ky, kx]
            gx = gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, backward)


# -- gradient checking ------------------------------------------------------
def grad_check(f: Callable[..., Tensor], inputs: Iterable, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` maps tensors (one per input) to a scalar tensor. The error for each
    input element is ``|ad - fd| / max(1e-8, |ad| + |fd|)``.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            fm = f(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            ad = analytic[k].reshape(-1)[i]
            denom = abs(ad) + abs(fd)
            err = abs(ad - fd) / (denom if denom > 1e-8 else 1e-8)
            worst = err if err > worst else worst
    return worst
