"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Everything downstream (embeddings, pooling, MLPs, ODE solvers, losses) is
expressed in the small op set below, so one vector-Jacobian product per op
is all the calculus the package contains.  Graphs are rebuilt per forward
pass; backward walks nodes in reverse construction order exactly once.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: shapes {' and '.join(str(s) for s in self.shapes)} do not conform")


_seq_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (forward values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient buffer and graph linkage.

    Leaf tensors created with ``requires_grad=True`` (parameters) keep a
    persistent ``grad`` buffer that backward passes accumulate into.
    Intermediate nodes carry a vector-Jacobian closure instead.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._vjp = None
        self._seq = next(_seq_counter)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.data.shape)
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        _backward_from(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; floats are lifted to constants
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
        return div(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make_node(data: np.ndarray, parents, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    out._seq = next(_seq_counter)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.data.shape, b.data.shape) from None

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make_node(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.data.shape, b.data.shape) from None

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make_node(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.data.shape, b.data.shape) from None

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make_node(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.data.shape, b.data.shape) from None

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make_node(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make_node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python float constant (no gradient to the constant)."""
    c = float(c)
    return _make_node(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = ad @ bd

        def vjp(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = ad @ bd

        def vjp(g):
            return np.outer(g, bd), ad.T @ g

    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = ad @ bd

        def vjp(g):
            return bd @ g, np.outer(ad, g)

    else:
        raise ShapeError("matmul", ad.shape, bd.shape)
    return _make_node(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.data.shape)
    return _make_node(a.data.T, (a,), lambda g: (g.T,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError("dot", a.data.shape, b.data.shape)
    out = np.asarray(a.data @ b.data)

    def vjp(g):
        return g * b.data, g * a.data

    return _make_node(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size and -1 not in shape:
        raise ShapeError("reshape", a.data.shape, shape)
    out = a.data.reshape(shape)
    src = a.data.shape
    return _make_node(out, (a,), lambda g: (g.reshape(src),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.data.shape for t in tensors]) from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_node(out, tensors, vjp)


def stack(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack: empty input")
    shape0 = tensors[0].data.shape
    for t in tensors:
        if t.data.shape != shape0:
            raise ShapeError("stack", shape0, t.data.shape)
    out = np.stack([t.data for t in tensors])

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make_node(out, tensors, vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by integer index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]
    src_shape = a.data.shape
    # plain assignment beats np.add.at when no row repeats
    unique = idx.size < 2 or np.unique(idx).size == idx.size

    def vjp(g):
        ga = np.zeros(src_shape)
        if unique:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _make_node(out, (a,), vjp)


def take_prefix(a: Tensor, n: int) -> Tensor:
    """First ``n`` rows as a view; backward zero-pads the dropped rows."""
    if not (0 <= n <= a.data.shape[0]):
        raise ShapeError("take_prefix", a.data.shape, (n,))
    out = a.data[:n]
    src_shape = a.data.shape

    def vjp(g):
        ga = np.zeros(src_shape)
        ga[:n] = g
        return (ga,)

    return _make_node(out, (a,), vjp)


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given per-row ids."""
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != a.data.shape[0]:
        raise ShapeError("segment_sum", a.data.shape, seg.shape)
    out = np.zeros((num_segments,) + a.data.shape[1:])
    np.add.at(out, seg, a.data)

    def vjp(g):
        return (g[seg],)

    return _make_node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)
    src = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make_node(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # one exp call, stable on both tails: e = exp(-|x|) is always in (0, 1]
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_values(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make_node(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make_node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = np.log(a.data)
    return _make_node(out, (a,), lambda g: (g / a.data,))


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """PReLU with a learnable scalar slope for the negative part."""
    if slope.data.size != 1:
        raise ShapeError("prelu", slope.data.shape)
    x = a.data
    s = float(slope.data.reshape(()))
    mask = x > 0
    out = np.where(mask, x, s * x)

    def vjp(g):
        ga = g * np.where(mask, 1.0, s)
        gs = np.asarray((g * np.where(mask, 0.0, x)).sum()).reshape(slope.data.shape)
        return ga, gs

    return _make_node(out, (a, slope), vjp)


def softmax(a: Tensor) -> Tensor:
    """Softmax over a 1-D tensor, computed with max subtraction."""
    if a.data.ndim != 1:
        raise ShapeError("softmax", a.data.shape)
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def vjp(g):
        return (out * (g - (g * out).sum()),)

    return _make_node(out, (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only where unclamped."""
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _make_node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# fused kernels for the ODE-solver hot path; each is mathematically the
# composition of ops above, collapsed into one graph node


def linear_sigmoid(x: Tensor, w_t: Tensor, b: Tensor) -> Tensor:
    """sigmoid(x @ w_t + b) as a single node (x is (B, d) or (d,))."""
    xd, wd = x.data, w_t.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError("linear_sigmoid", xd.shape, wd.shape)
    out = _sigmoid_values(xd @ wd + b.data)

    def vjp(g):
        gpre = g * out * (1.0 - out)
        if xd.ndim == 2:
            return gpre @ wd.T, xd.T @ gpre, _unbroadcast(gpre, b.data.shape)
        return wd @ gpre, np.outer(xd, gpre), _unbroadcast(gpre, b.data.shape)

    return _make_node(out, (x, w_t, b), vjp)


def add_scaled(z: Tensor, c: np.ndarray, k: Tensor) -> Tensor:
    """z + c * k with a constant (gradient-free) scale array ``c``."""
    out = z.data + c * k.data

    def vjp(g):
        return g, _unbroadcast(g * c, k.data.shape)

    return _make_node(out, (z, k), vjp)


def rk4_combine(z: Tensor, h6: np.ndarray, k1: Tensor, k2: Tensor, k3: Tensor, k4: Tensor) -> Tensor:
    """z + h6 * (k1 + 2*k2 + 2*k3 + k4) with a constant scale array ``h6``."""
    out = z.data + h6 * (k1.data + 2.0 * (k2.data + k3.data) + k4.data)

    def vjp(g):
        gk1 = g * h6
        gk2 = 2.0 * gk1
        return g, gk1, gk2, gk2, gk1

    return _make_node(out, (z, k1, k2, k3, k4), vjp)


def custom_node(data: np.ndarray, parents, vjp) -> Tensor:
    """Graph node with a caller-supplied vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or None) per parent, shaped like
    that parent's data.  Used for hand-fused kernels.
    """
    return _make_node(np.asarray(data, dtype=np.float64), tuple(parents), vjp)


# ---------------------------------------------------------------------------
# parameters and backward


class ParameterStore:
    """Named parameter tensors with persistent gradient buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, values) -> Tensor:
        if path in self._params:
            raise ValueError(f"parameter path already registered: {path!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def set_(self, path: str, values):
        """Overwrite a parameter's values in place (shape-checked)."""
        t = self._params[path]
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != t.data.shape:
            raise ShapeError("set_", t.data.shape, arr.shape)
        t.data[...] = arr


def _backward_from(loss: Tensor):
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    # collect the reachable subgraph, then sweep in reverse construction order
    visited = {id(loss): loss}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        for p in node._parents:
            if id(p) not in visited:
                visited[id(p)] = p
                stack_.append(p)
    order = sorted(visited.values(), key=lambda t: t._seq, reverse=True)

    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in order:
        a = adjoint.pop(id(node), None)
        if a is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad += a
            continue
        grads = node._vjp(a)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg
    return visited


def backward(loss: Tensor, store: ParameterStore | None = None):
    """Backpropagate from a scalar loss, accumulating into parameter buffers.

    When a store is given, at least one of its parameters must be reachable
    from the loss; returns the map path -> gradient buffer for convenience.
    """
    visited = _backward_from(loss)
    if store is None:
        return None
    if not any(id(t) in visited for _, t in store.items()):
        raise ValueError("backward: graph is detached from the parameter store")
    return {path: t.grad for path, t in store.items()}


def finite_diff_grad(fn, x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar-valued fn at x (test oracle)."""
    if not (1e-8 <= eps <= 1e-3):
        raise ValueError(f"finite_diff_grad: eps {eps} outside [1e-8, 1e-3]")

    def evaluate() -> float:
        with no_grad():
            out = fn(x)
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not math.isfinite(val):
            raise ValueError("finite_diff_grad: fn returned a non-finite value")
        return val

    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        f_plus = evaluate()
        flat[k] = orig - eps
        f_minus = evaluate()
        flat[k] = orig
        grad[k] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad.reshape(x.data.shape))
