"""Dense matrix arithmetic with a reverse-mode tape and an Adam optimizer.

Every value is a 2-D float64 :class:`Tensor`. Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) are recorded if any operand
requires gradients; :func:`backward` then walks the tape in reverse.

Adjacency matrices coming out of row-wise top-k selection may carry a CSR
payload instead of a dense array. Their gradient is a vector aligned with the
stored entries: structural zeros are constants, which is exact because the
selection that produced them passes no gradient to unselected entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit

EPS_LOG = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if sparse.issparse(data):
            data = sparse.csr_array(data, dtype=np.float64)
            data.sum_duplicates()
            data.sort_indices()
        else:
            data = np.asarray(data, dtype=np.float64)
            if data.ndim == 0:
                data = data.reshape(1, 1)
            elif data.ndim == 1:
                data = data.reshape(1, -1)
            elif data.ndim != 2:
                raise ShapeError(f"tensors are 2-D, got {data.ndim}-D input")
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def is_sparse(self):
        return sparse.issparse(self.data)

    def numpy(self):
        """Dense copy of the values."""
        if self.is_sparse:
            return self.data.toarray()
        return self.data.copy()

    def item(self):
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"Tensor({self.rows}x{self.cols}, {kind}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of operations, plus the registry of trainable tensors."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes = []
        self.params = {}

    def watch(self, name, tensor):
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def watch_all(self, params):
        for name, tensor in params.items():
            self.watch(name, tensor)

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return Tape._stack[-1] if Tape._stack else None


def _record(value, parents, vjp):
    out = Tensor.__new__(Tensor)
    out.data = value
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, parents, vjp))
    return out


def backward(tape, loss):
    """Gradients of a scalar ``loss`` for every tensor registered on ``tape``."""
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be a 1x1 tensor, got {loss.shape}")
    grads = {id(loss): np.ones((1, 1))}
    for out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {}
    for name, tensor in tape.params.items():
        g = grads.get(id(tensor))
        if g is None:
            g = np.zeros(tensor.data.nnz) if tensor.is_sparse else np.zeros(tensor.shape)
        result[name] = g
    return result


# ---------------------------------------------------------------------------
# sparse helpers


def csr_rows(a):
    """Row index of every stored entry of a canonical CSR matrix."""
    return np.repeat(np.arange(a.shape[0]), np.diff(a.indptr))


def csr_keys(a):
    return csr_rows(a).astype(np.int64) * a.shape[1] + a.indices


def gather_csr(src, keys):
    """Values of ``src`` at flat positions ``keys`` (0 where not stored)."""
    src_keys = csr_keys(src)
    pos = np.searchsorted(src_keys, keys)
    pos_c = np.minimum(pos, max(len(src_keys) - 1, 0))
    hit = (pos < len(src_keys)) & (src_keys[pos_c] == keys) if len(src_keys) else np.zeros(len(keys), bool)
    out = np.zeros(len(keys))
    out[hit] = src.data[pos_c[hit]]
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a, b):
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    if b.is_sparse:
        raise ShapeError("matmul: right operand must be dense")
    A, B = a.data, b.data
    if a.is_sparse:
        rows, cols = csr_rows(A), A.indices

        def vjp(g):
            ga = np.einsum("ij,ij->i", g[rows], B[cols]) if a.requires_grad else None
            gb = A.T @ g if b.requires_grad else None
            return ga, gb

        return _record(np.asarray(A @ B), (a, b), vjp)

    def vjp(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _record(A @ B, (a, b), vjp)


def _check_binary(a, b, op):
    if a.is_sparse or b.is_sparse:
        raise ShapeError(f"{op}: sparse operands are not supported")
    if a.shape == b.shape:
        return False
    if b.rows == 1 and b.cols == a.cols:
        return True
    raise ShapeError(f"{op}: {a.shape} vs {b.shape}")


def _unbroadcast(g, broadcast):
    return g.sum(axis=0, keepdims=True) if broadcast else g


def add(a, b):
    bc = _check_binary(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, bc)))


def sub(a, b):
    bc = _check_binary(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, bc)))


def mul(a, b):
    bc = _check_binary(a, b, "mul")
    A, B = a.data, b.data

    def vjp(g):
        return (g * B if a.requires_grad else None,
                _unbroadcast(g * A, bc) if b.requires_grad else None)

    return _record(A * B, (a, b), vjp)


def scale(a, c):
    c = float(c)
    if a.is_sparse:
        raise ShapeError("scale: sparse operand")
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    A = a.data
    return _record(np.maximum(A, 0.0), (a,), lambda g: (g * (A > 0),))


def sigmoid(a):
    s = expit(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def abs_(a):
    A = a.data
    return _record(np.abs(A), (a,), lambda g: (g * np.sign(A),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid, "abs": abs_}


def elementwise(op, a, b=None):
    """Dispatch one of ``add, sub, mul, relu, sigmoid, abs`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


def row_softmax(a, exclude_diagonal=False):
    """Row-wise softmax; ``exclude_diagonal`` gives the diagonal zero mass (square input)."""
    if a.rows == 0 or a.cols == 0:
        raise ShapeError("row_softmax of an empty tensor")
    x = a.data
    if exclude_diagonal:
        if a.rows != a.cols or a.cols < 2:
            raise ShapeError(f"exclude_diagonal needs a square input with >= 2 columns, got {a.shape}")
        x = x.copy()
        np.fill_diagonal(x, -np.inf)
    s = x - x.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(s, (a,), vjp)


def concat_cols(a, b):
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: {a.rows} vs {b.rows} rows")
    k = a.cols
    return _record(np.hstack([a.data, b.data]), (a, b), lambda g: (g[:, :k], g[:, k:]))


def concat_rows(tensors):
    tensors = tuple(tensors)
    cols = {t.cols for t in tensors}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts {sorted(cols)}")
    bounds = np.cumsum([0] + [t.rows for t in tensors])

    def vjp(g):
        return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(np.vstack([t.data for t in tensors]), tensors, vjp)


def transpose(a):
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, rows, cols):
    if rows * cols != a.rows * a.cols:
        raise ShapeError(f"reshape {a.shape} -> ({rows}, {cols})")
    shape = a.shape
    return _record(a.data.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),))


def take_row(a, i):
    n, m = a.shape

    def vjp(g):
        out = np.zeros((n, m))
        out[i] = g[0]
        return (out,)

    return _record(a.data[i:i + 1].copy(), (a,), vjp)


def sum_all(a):
    if a.is_sparse:
        total = a.data.data.sum()
        return _record(np.array([[total]]), (a,), lambda g: (np.full(a.data.nnz, g[0, 0]),))
    shape = a.shape
    return _record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def dropout(a, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


def masked_cross_entropy(p, y, mask):
    """``-sum_{i in mask} sum_c y[i, c] log(p[i, c] + 1e-12)``."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("masked_cross_entropy: empty mask, nothing is supervised")
    Y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if Y.shape != p.shape:
        raise ShapeError(f"cross entropy: predictions {p.shape} vs labels {Y.shape}")
    Pm = p.data[mask] + EPS_LOG
    Ym = Y[mask]
    value = -(Ym * np.log(Pm)).sum()
    shape = p.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, mask, -g[0, 0] * Ym / Pm)
        return (out,)

    return _record(np.array([[value]]), (p,), vjp)


def l1_diff(a, b):
    """Entry-wise ``sum |a - b|`` with the sign subgradient (0 at 0)."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_diff: {a.shape} vs {b.shape}")
    if a.is_sparse != b.is_sparse:
        raise ShapeError("l1_diff: operands must both be dense or both sparse")
    if not a.is_sparse:
        d = a.data - b.data
        sgn = np.sign(d)
        return _record(np.array([[np.abs(d).sum()]]), (a, b),
                       lambda g: (g[0, 0] * sgn, -g[0, 0] * sgn))
    diff = sparse.csr_array(a.data - b.data)
    diff.sum_duplicates()
    diff.sort_indices()
    value = np.abs(diff.data).sum()

    def vjp(g):
        sgn = sparse.csr_array((np.sign(diff.data), diff.indices, diff.indptr), shape=diff.shape)
        ga = gather_csr(sgn, csr_keys(a.data)) * g[0, 0] if a.requires_grad else None
        gb = -gather_csr(sgn, csr_keys(b.data)) * g[0, 0] if b.requires_grad else None
        return ga, gb

    return _record(np.array([[value]]), (a, b), vjp)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 0.01
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update with decoupled weight decay, applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= state.lr * update
    return params, state
