"""Dense 2-D matrices with a define-by-run reverse-mode differentiation engine.

Every value is a :class:`Matrix` wrapping a 2-D numpy array. Operations that
touch a matrix with ``requires_grad`` record their parents and a backward
closure; :func:`backward` replays the resulting :class:`GradTape` in reverse
topological order. Shapes never broadcast silently: the only expansion is the
explicit ``J_{n x 1} @ row`` pattern exposed as :func:`expand_rows`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Matrix",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "ContractError",
    "no_grad",
    "allow_nonfinite",
    "backward",
    "gradcheck",
    "constant",
    "ones",
    "zeros",
    "eye",
    "add",
    "sub",
    "elementwise_mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "rsub_scalar",
    "matmul",
    "transpose",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "gelu",
    "cumprod_dim2",
    "cumsum_dim2",
    "triu",
    "roll_last",
    "expand_rows",
    "sum_all",
    "sum_rows",
    "mean_all",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "gather_rows",
    "pick",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm_rows",
    "custom_op",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a call violates an operation precondition."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf from its inputs."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _nonfinite_allowed() -> bool:
    return getattr(_state, "nonfinite_ok", False)


@contextlib.contextmanager
def no_grad():
    """Run forward operations without recording a graph (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def allow_nonfinite():
    """Permit NaN/Inf results; used only to study unstable estimators."""
    prev = _nonfinite_allowed()
    _state.nonfinite_ok = True
    try:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
            yield
    finally:
        _state.nonfinite_ok = prev


class Matrix:
    """Immutable dense 2-D array that can participate in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"Matrix needs at least one row and column, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Matrix, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Matrix, ...], op: str,
                backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Matrix":
        if not _nonfinite_allowed() and not np.isfinite(data).all():
            raise NonFiniteError(f"operation {op!r} produced non-finite values")
        out = cls.__new__(cls)
        data = np.asarray(data)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.op = op
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward_fn if track else None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 matrix, got {self.data.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Matrix":
        return Matrix(self.data)

    def __repr__(self) -> str:
        return f"Matrix(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Matrix):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Matrix):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return rsub_scalar(self, float(other))

    def __mul__(self, other):
        if isinstance(other, Matrix):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Matrix):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Matrix":
        return transpose(self)


def _as_matrix(x) -> Matrix:
    return x if isinstance(x, Matrix) else Matrix(x)


def _same_shape(a: Matrix, b: Matrix, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def constant(data) -> Matrix:
    return Matrix(data)


def ones(rows: int, cols: int) -> Matrix:
    """The all-ones matrix J_{rows x cols}."""
    return Matrix(np.ones((rows, cols)))


def zeros(rows: int, cols: int) -> Matrix:
    return Matrix(np.zeros((rows, cols)))


def eye(n: int) -> Matrix:
    return Matrix(np.eye(n))


def custom_op(op: str, data: np.ndarray, parents: Sequence[Matrix],
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Matrix:
    """Register an operation computed outside this module.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per parent, each shaped like that parent.
    """
    return Matrix._result(data, tuple(parents), op, backward_fn)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "add")
    return Matrix._result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "sub")
    return Matrix._result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def elementwise_mul(a: Matrix, b: Matrix) -> Matrix:
    """Hadamard product ``a ⊙ b``."""
    _same_shape(a, b, "elementwise_mul")
    ad, bd = a.data, b.data
    return Matrix._result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Matrix._result(out, (a, b), "div", lambda g: (g / bd, -g * out / bd))


def neg(a: Matrix) -> Matrix:
    return Matrix._result(-a.data, (a,), "neg", lambda g: (-g,))


def scale(a: Matrix, c: float) -> Matrix:
    return Matrix._result(a.data * c, (a,), "scale", lambda g: (g * c,))


def add_scalar(a: Matrix, c: float) -> Matrix:
    return Matrix._result(a.data + c, (a,), "add_scalar", lambda g: (g,))


def rsub_scalar(a: Matrix, c: float) -> Matrix:
    """``c - a`` elementwise (``1 - p`` is the common case)."""
    return Matrix._result(c - a.data, (a,), "rsub_scalar", lambda g: (-g,))


def exp(a: Matrix) -> Matrix:
    out = np.exp(a.data)
    return Matrix._result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Matrix) -> Matrix:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Matrix._result(out, (a,), "log", lambda g: (g / ad,))


def sigmoid(a: Matrix) -> Matrix:
    ad = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return Matrix._result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a: Matrix) -> Matrix:
    out = np.tanh(a.data)
    return Matrix._result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Matrix) -> Matrix:
    """GELU, tanh approximation. Smooth everywhere, so finite differences behave."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Matrix._result(out, (a,), "gelu", bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Matrix._result(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Matrix) -> Matrix:
    return Matrix._result(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def expand_rows(row: Matrix, n: int) -> Matrix:
    """``J_{n x 1} @ row``: repeat a 1 x m row ``n`` times."""
    if row.rows != 1:
        raise ShapeError(f"expand_rows: expected a 1 x m row, got {row.shape}")
    out = np.repeat(row.data, n, axis=0)
    return Matrix._result(out, (row,), "expand", lambda g: (g.sum(axis=0, keepdims=True),))


def slice_rows(a: Matrix, start: int, stop: int) -> Matrix:
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return Matrix._result(a.data[start:stop].copy(), (a,), "slice", bwd)


def slice_cols(a: Matrix, start: int, stop: int) -> Matrix:
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return Matrix._result(a.data[:, start:stop].copy(), (a,), "slice", bwd)


def concat_rows(parts: Sequence[Matrix]) -> Matrix:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def bwd(g):
        return [g[bounds[k]:bounds[k + 1]] for k in range(len(parts))]

    return Matrix._result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), "concat", bwd)


def concat_cols(parts: Sequence[Matrix]) -> Matrix:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def bwd(g):
        return [g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts))]

    return Matrix._result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat", bwd)


def gather_rows(table: Matrix, index: Sequence[int]) -> Matrix:
    """Embedding lookup: row ``index[k]`` of ``table`` becomes output row ``k``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("gather_rows: index must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= table.rows:
        raise ContractError(f"gather_rows: index out of range for table with {table.rows} rows")
    shape = table.shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Matrix._result(table.data[idx], (table,), "gather", bwd)


def pick(a: Matrix, index: Sequence[int]) -> Matrix:
    """Column ``index[r]`` of each row ``r``, as an n x 1 matrix."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.rows,):
        raise ShapeError(f"pick: need one index per row ({a.rows}), got {idx.shape}")
    rows = np.arange(a.rows)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[rows, idx] = g[:, 0]
        return (full,)

    return Matrix._result(a.data[rows, idx][:, None], (a,), "pick", bwd)


# ---------------------------------------------------------------------------
# reductions and scans


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return Matrix._result(np.array([[a.data.sum()]]), (a,), "sum", lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Matrix) -> Matrix:
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_rows(a: Matrix) -> Matrix:
    """Sum along the last dimension: n x m -> n x 1."""
    m = a.cols
    return Matrix._result(a.data.sum(axis=1, keepdims=True), (a,), "sum_rows",
                          lambda g: (np.repeat(g, m, axis=1),))


def cumsum_dim2(a: Matrix) -> Matrix:
    """Prefix sums along each row."""
    def bwd(g):
        return (np.cumsum(g[:, ::-1], axis=1)[:, ::-1],)

    return Matrix._result(np.cumsum(a.data, axis=1), (a,), "cumsum", bwd)


def cumprod_dim2(a: Matrix) -> Matrix:
    """Prefix products along each row.

    The backward pass never divides by the input. For out = cumprod(x),
    ``dL/dx_k = (prod_{l<k} x_l) * S_k`` with the reverse scan
    ``S_k = g_k + x_{k+1} S_{k+1}``, so rows with exact zeros keep finite,
    correct gradients.
    """
    x = a.data
    out = np.cumprod(x, axis=1)

    def bwd(g):
        n = x.shape[1]
        s = np.empty_like(g)
        s[:, n - 1] = g[:, n - 1]
        for k in range(n - 2, -1, -1):
            s[:, k] = g[:, k] + x[:, k + 1] * s[:, k + 1]
        excl = np.ones_like(x)
        excl[:, 1:] = out[:, :-1]
        return (excl * s,)

    return Matrix._result(out, (a,), "cumprod", bwd)


def triu(a: Matrix, offset: int = 0) -> Matrix:
    """Keep entries with ``col >= row + offset``, zero the rest."""
    mask = np.triu(np.ones(a.shape), k=offset)
    return Matrix._result(a.data * mask, (a,), "triu", lambda g: (g * mask,))


def roll_last(a: Matrix, k: int) -> Matrix:
    """Circularly shift every row right by ``k`` places."""
    return Matrix._result(np.roll(a.data, k, axis=1), (a,), "roll", lambda g: (np.roll(g, -k, axis=1),))


# ---------------------------------------------------------------------------
# normalisations with analytic backward


def softmax_rows(a: Matrix) -> Matrix:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Matrix._result(out, (a,), "softmax", bwd)


def log_softmax_rows(a: Matrix) -> Matrix:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return Matrix._result(out, (a,), "log_softmax", bwd)


def layer_norm_rows(a: Matrix, gain: Matrix, bias: Matrix, eps: float = 1e-5) -> Matrix:
    """Per-row standardisation followed by a learned 1 x m gain and bias."""
    if gain.shape != (1, a.cols) or bias.shape != (1, a.cols):
        raise ShapeError(f"layer_norm_rows: gain {gain.shape} / bias {bias.shape} vs input {a.shape}")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bwd(g):
        gx = g * gd
        m = x.shape[1]
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True) / m)
        return (dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return Matrix._result(out, (a, gain, bias), "layer_norm", bwd)


# ---------------------------------------------------------------------------
# tape and differentiation


class GradTape:
    """Executed operations reachable from an output, in topological order.

    ``grads`` maps each node to its accumulated gradient once
    :meth:`backward` has run.
    """

    def __init__(self, output: Matrix):
        self.output = output
        self.nodes: list[Matrix] = _topological(output)
        self.grads: dict[Matrix, np.ndarray] = {}

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def backward(self, seed: np.ndarray | None = None) -> dict[Matrix, np.ndarray]:
        """Propagate from the output; return the gradients that reached leaves."""
        out = self.output
        grads: dict[Matrix, np.ndarray] = {out: np.ones(out.shape) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.get(node)
            if g is None or not node._parents:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                grads[parent] = grads[parent] + pg if parent in grads else pg
        self.grads = grads
        return {n: g for n, g in grads.items() if not n._parents}


def _topological(output: Matrix) -> list[Matrix]:
    order: list[Matrix] = []
    seen: set[int] = set()
    stack: list[tuple[Matrix, bool]] = [(output, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(output: Matrix) -> dict[Matrix, np.ndarray]:
    """Differentiate a scalar output; accumulate into every leaf's ``.grad``.

    Returns the map from leaf to the gradient contributed by this call.
    """
    if output.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 output, got {output.shape}")
    if not output.requires_grad:
        raise ContractError("backward: output is not connected to any requires_grad leaf")
    tape = GradTape(output)
    leaf_grads = tape.backward()
    for leaf, g in leaf_grads.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaf_grads


def gradcheck(fn: Callable[[], Matrix], params: Iterable[Matrix], h: float = 1e-5,
              entries: Iterable[tuple[Matrix, tuple[int, int]]] | None = None, order: int = 2) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` rebuilds the scalar output from the current parameter values.
    Parameters are perturbed in place through their (otherwise read-only)
    buffers and restored afterwards. ``order`` picks the 2-point (error
    O(h^2)) or 5-point (O(h^4)) stencil; the latter tolerates a larger ``h``
    and so loses less to cancellation on tiny gradients. Relative error uses
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if order not in _STENCILS:
        raise ContractError(f"unsupported stencil order {order}; use one of {sorted(_STENCILS)}")
    params = list(params)
    for p in params:
        p.grad = None
    backward(fn())
    if entries is None:
        entries = [(p, idx) for p in params for idx in np.ndindex(*p.shape)]
    worst = 0.0
    with no_grad():
        for p, idx in entries:
            analytic = 0.0 if p.grad is None else float(p.grad[idx])
            numeric = _central_difference(fn, p, idx, h, order)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


_STENCILS = {2: ((1, 0.5), (-1, -0.5)),
             4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))}


def _central_difference(fn: Callable[[], Matrix], p: Matrix, idx: tuple[int, int], h: float,
                        order: int = 2) -> float:
    buf = p.data
    buf.flags.writeable = True
    orig = buf[idx]
    total = 0.0
    try:
        for shift, weight in _STENCILS[order]:
            buf[idx] = orig + shift * h
            total += weight * fn().item()
    finally:
        buf[idx] = orig
        buf.flags.writeable = False
    return total / h
