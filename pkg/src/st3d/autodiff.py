"""A small reverse-mode automatic differentiation kernel over 2-D float64 arrays.

Every value is a matrix; scalars are ``(1, 1)``.  Each primitive computes
its forward value with numpy and registers a closure that maps the
upstream gradient to gradients of its inputs.  :meth:`Tensor.backward`
walks the graph once in reverse topological order, summing contributions
from every consumer.

A graph lives on one thread; nothing here is shared between graphs.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import FormatError, UsageError

LEAKY_SLOPE = 0.2


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, name=None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise UsageError(f"tensors are 2-D, got shape {v.shape}")
        self.value = v
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise UsageError(f"item() needs a single element, shape is {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf."""
        if grad is None:
            if self.value.size != 1:
                raise UsageError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
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

    # operators
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named leaf that always requires gradients."""

    __slots__ = ()

    def __init__(self, value, name):
        super().__init__(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(value, req, parents if req else (), backward if req else None)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(op, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise UsageError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# linear algebra and arithmetic


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise UsageError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.value * c, (x,), lambda g: (g * c,))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _make(v * v, (x,), lambda g: (2.0 * g * v,))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.value.T.copy(), (x,), lambda g: (g.T,))


def concat_cols(xs: Sequence) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise UsageError(f"concat_cols: row counts differ: {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([x.value for x in xs], axis=1), tuple(xs), back)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise UsageError(f"slice_cols: [{start}, {stop}) out of range for shape {x.shape}")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make(x.value[:, start:stop].copy(), (x,), back)


def _segment_reduce(ufunc, values, seg, n: int, fill: float) -> np.ndarray:
    # ufunc.at is slow; sort once and reduce contiguous runs instead
    order = np.argsort(seg, kind="stable")
    s = seg[order]
    out = np.full((n,) + values.shape[1:], fill)
    if s.size == 0:
        return out
    starts = np.flatnonzero(np.concatenate(([True], s[1:] != s[:-1])))
    out[s[starts]] = ufunc.reduceat(values[order], starts, axis=0)
    return out


def gather_rows(x, idx) -> Tensor:
    """Rows ``x[idx]``; the backward pass scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def back(g):
        return (_segment_reduce(np.add, g, idx, shape[0], 0.0),)

    return _make(x.value[idx], (x,), back)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(x.value.sum().reshape(1, 1), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.value.size
    return _make(x.value.mean().reshape(1, 1), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def mean_rows(x) -> Tensor:
    """Mean over columns, shape ``(rows, 1)``."""
    x = as_tensor(x)
    shape, n = x.shape, x.shape[1]
    return _make(x.value.mean(axis=1, keepdims=True), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def segment_sum(x, segments, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets given by ``segments``."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    out = _segment_reduce(np.add, x.value, seg, n_segments, 0.0)
    return _make(out, (x,), lambda g: (g[seg],))


# ---------------------------------------------------------------------------
# nonlinearities


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    v = x.value
    d = np.where(v > 0, 1.0, slope)
    return _make(v * d, (x,), lambda g: (g * d,))


def elu(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    neg = np.expm1(np.minimum(v, 0.0))
    out = np.where(v > 0, v, neg)
    d = np.where(v > 0, 1.0, neg + 1.0)
    return _make(out, (x,), lambda g: (g * d,))


def softmax_rows(x, mask=None) -> Tensor:
    """Row-wise softmax; entries where ``mask`` is false get probability 0."""
    x = as_tensor(x)
    v = x.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise UsageError(f"softmax_rows: mask shape {mask.shape} differs from input {v.shape}")
        v = np.where(mask, v, -np.inf)
    e = np.exp(v - v.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), back)


def segment_softmax(scores, segments, n_segments: int) -> Tensor:
    """Softmax of a column of edge scores within each segment."""
    x = as_tensor(scores)
    seg = np.asarray(segments, dtype=np.int64)
    v = x.value
    m = _segment_reduce(np.maximum, v, seg, n_segments, -np.inf)
    e = np.exp(v - m[seg])
    s = e / _segment_reduce(np.add, e, seg, n_segments, 0.0)[seg]

    def back(g):
        gs = _segment_reduce(np.add, g * s, seg, n_segments, 0.0)
        return (s * (g - gs[seg]),)

    return _make(s, (x,), back)


def layer_norm_rows(x, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance (no affine part)."""
    x = as_tensor(x)
    v = x.value
    n = v.shape[1]
    mu = v.mean(axis=1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        return (inv * (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True)),)

    return _make(xhat, (x,), back)


def pearson_rows(x, y) -> Tensor:
    """Per-row Pearson correlation between ``x`` and ``y``, shape ``(rows, 1)``.

    Rows where either side has zero variance get correlation 0 and a
    zero gradient.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise UsageError(f"pearson_rows: shape mismatch {x.shape} vs {y.shape}")
    a = x.value - x.value.mean(axis=1, keepdims=True)
    b = y.value - y.value.mean(axis=1, keepdims=True)
    na = np.sqrt((a * a).sum(axis=1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=1, keepdims=True))
    ok = (na > 0) & (nb > 0)
    safe_na, safe_nb = np.where(ok, na, 1.0), np.where(ok, nb, 1.0)
    r = np.where(ok, (a * b).sum(axis=1, keepdims=True) / (safe_na * safe_nb), 0.0)

    def back(g):
        g = np.where(ok, g, 0.0)
        gx = g * (b / (safe_na * safe_nb) - r * a / safe_na ** 2)
        gy = g * (a / (safe_na * safe_nb) - r * b / safe_nb ** 2)
        return (gx, gy)

    return _make(r, (x, y), back)


def constant_rows(x) -> np.ndarray:
    """Boolean mask of rows with zero variance."""
    v = as_tensor(x).value
    return np.all(v == v[:, :1], axis=1)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` recomputes a scalar from the current ``params`` values.  Each
    coordinate is perturbed in place and restored.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    f().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            an = analytic.reshape(-1)[i]
            err = abs(an - num) / max(1e-8, abs(an) + abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ST3D-CKPT\0"
CKPT_VERSION = 1
_HEADER = struct.Struct("<10sHI")


def save_checkpoint(params, path) -> None:
    """Write ``(name, rows, cols, float64 values)`` records.

    ``params`` is a mapping name -> Tensor/array or an iterable of
    Parameters; record order is preserved.
    """
    items = list(params.items()) if hasattr(params, "items") else [(p.name, p) for p in params]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(items)))
        for name, t in items:
            v = t.value if isinstance(t, Tensor) else np.atleast_2d(np.asarray(t, np.float64))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *v.shape))
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint into an ordered ``{name: ndarray}`` dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos, out = _HEADER.size, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + n > len(data):
                raise struct.error("name runs past end of file")
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(data):
                raise struct.error("values run past end of file")
            out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return out
