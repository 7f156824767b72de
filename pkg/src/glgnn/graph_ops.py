"""Graph operators: normalization, top-k sparsification, hop powers, kNN graphs,
noise injection and denoising scores, plus the edge-list text format.

``normalize_adjacency``, ``topk_rows`` and ``gram_topk`` are differentiable and
record onto the active tape; the rest work on plain numpy / scipy values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import kernels
from .numerics import Tensor, _record, csr_keys, csr_rows, gather_csr


class GraphError(ValueError):
    pass


# ---------------------------------------------------------------------------
# edge lists


@dataclass
class EdgeList:
    """Directed weighted edges over ``n_nodes`` nodes, 0-based, no self-loops."""

    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    n_nodes: int

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64).ravel()
        self.dst = np.asarray(self.dst, dtype=np.int64).ravel()
        self.weight = np.asarray(self.weight, dtype=np.float64).ravel()
        if not (len(self.src) == len(self.dst) == len(self.weight)):
            raise GraphError("edge arrays differ in length")
        if len(self.src):
            lo = min(self.src.min(), self.dst.min())
            hi = max(self.src.max(), self.dst.max())
            if lo < 0 or hi >= self.n_nodes:
                raise GraphError(f"edge index out of range [0, {self.n_nodes})")
            if np.any(self.src == self.dst):
                raise GraphError("self-loops are not allowed in an edge list")
            if np.any(self.weight <= 0) or np.any(self.weight > 1):
                raise GraphError("edge weights must lie in (0, 1]")

    def __len__(self):
        return len(self.src)

    def pairs(self):
        return set(zip(self.src.tolist(), self.dst.tolist()))

    def to_csr(self, symmetric=False):
        n = self.n_nodes
        src, dst, w = self.src, self.dst, self.weight
        if symmetric:
            src, dst, w = np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([w, w])
        a = sparse.coo_array((w, (src, dst)), shape=(n, n)).tocsr()
        # duplicates keep the largest weight, not the sum
        if a.nnz != len(w):
            m = sparse.coo_array((w, (src, dst)), shape=(n, n))
            dense = np.zeros((n, n))
            np.maximum.at(dense, (m.row, m.col), m.data)
            a = sparse.csr_array(dense)
        a.sort_indices()
        return a

    def to_dense(self, symmetric=False):
        return self.to_csr(symmetric).toarray()

    @classmethod
    def from_matrix(cls, a, symmetric=False):
        """Edges from nonzero off-diagonal entries (upper triangle when ``symmetric``)."""
        a = sparse.coo_array(a)
        keep = (a.row != a.col) & (a.data != 0)
        if symmetric:
            keep &= a.row < a.col
        return cls(a.row[keep], a.col[keep], a.data[keep], a.shape[0])


def read_edgelist(path, n_nodes=None):
    """Parse ``src<TAB>dst<TAB>weight`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"edge list not found: {path}")
    src, dst, w = [], [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                s, d, x = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise GraphError(f"{path}:{lineno}: malformed edge {line!r}") from None
            src.append(s)
            dst.append(d)
            w.append(x)
    if n_nodes is None:
        n_nodes = max(max(src, default=-1), max(dst, default=-1)) + 1
    return EdgeList(src, dst, w, n_nodes)


def write_edgelist(edges, path, header=None):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for s, d, x in zip(edges.src.tolist(), edges.dst.tolist(), edges.weight.tolist()):
            fh.write(f"{s}\t{d}\t{x!r}\n")
    return path


# ---------------------------------------------------------------------------
# differentiable operators


def normalize_adjacency(a):
    """``D^-1/2 (A + I) D^-1/2`` with ``D(i, i) = 1 + sum_j A(i, j)``.

    Accepts dense or CSR tensors; a CSR input yields a CSR output whose pattern
    is the input pattern plus the diagonal.
    """
    if a.rows != a.cols:
        raise GraphError(f"adjacency must be square, got {a.shape}")
    A = a.data
    vals = A.data if a.is_sparse else A
    if vals.size and vals.min() < 0:
        raise GraphError("adjacency has negative entries; clamp before normalizing")
    n = a.rows
    if not a.is_sparse:
        d = 1.0 + A.sum(axis=1)
        dinv = 1.0 / np.sqrt(d)
        out = (A + np.eye(n)) * dinv[:, None] * dinv[None, :]

        def vjp(g):
            t = g * out
            gd = -0.5 / d * (t.sum(axis=1) + t.sum(axis=0))
            return (g * dinv[:, None] * dinv[None, :] + gd[:, None],)

        return _record(out, (a,), vjp)

    b = sparse.csr_array(A + sparse.eye_array(n, format="csr"))
    b.sum_duplicates()
    b.sort_indices()
    rb, cb = csr_rows(b), b.indices
    pos_a = np.searchsorted(csr_keys(b), csr_keys(A))
    rows_a = csr_rows(A)
    d = np.asarray(b.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(d)
    scale_b = dinv[rb] * dinv[cb]
    out_vals = b.data * scale_b
    out = sparse.csr_array((out_vals, b.indices.copy(), b.indptr.copy()), shape=(n, n))

    def vjp(g):
        t = g * out_vals
        gd = -0.5 / d * (np.bincount(rb, t, minlength=n) + np.bincount(cb, t, minlength=n))
        return ((g * scale_b)[pos_a] + gd[rows_a],)

    return _record(out, (a,), vjp)


def _topk_csr(idx, vals, n_cols):
    n, kk = idx.shape
    keep = vals > 0
    counts = keep.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return sparse.csr_array((vals[keep], idx[keep], indptr), shape=(n, n_cols)), keep


def topk_rows(r, k, sparse_out=False):
    """Keep the ``k`` largest entries of each row, zero the rest.

    Negative entries are clamped to 0 first; ties go to the lower column.
    With ``sparse_out`` the result is CSR and zero-valued picks are dropped.
    """
    if k < 1:
        raise GraphError("k must be >= 1")
    if r.is_sparse:
        raise GraphError("topk_rows expects a dense tensor")
    R = np.ascontiguousarray(r.data)
    n, m = R.shape
    idx = kernels.topk_select(R, k, clamp=True)
    rr = np.arange(n)[:, None]
    vals = np.maximum(R[rr, idx], 0.0)
    live = R[rr, idx] > 0
    if sparse_out:
        out, keep = _topk_csr(idx, vals, m)
        kr, kc = np.nonzero(keep)
        sel_r, sel_c = kr, idx[kr, kc]

        def vjp(g):
            gr = np.zeros((n, m))
            gr[sel_r, sel_c] = g
            return (gr,)

        return _record(out, (r,), vjp)

    out = np.zeros((n, m))
    out[rr, idx] = vals

    def vjp(g):
        gr = np.zeros((n, m))
        gr[rr, idx] = g[rr, idx] * live
        return (gr,)

    return _record(out, (r,), vjp)


def gram_topk(z, k, dense=False, self_loops=True):
    """``topk_rows(relu(Z Z^T), k)`` without a dense gradient (CSR unless ``dense``).

    Without ``self_loops`` the diagonal is zeroed before selection.
    """
    Z = z.data
    n = Z.shape[0]
    gram = kernels.gram(Z)
    if not self_loops:
        np.fill_diagonal(gram, 0.0)
    idx = kernels.topk_select(gram, k, clamp=True)
    rr = np.arange(n)[:, None]
    vals = np.maximum(gram[rr, idx], 0.0)
    if dense:
        out = np.zeros((n, n))
        out[rr, idx] = vals

        def vjp(g):
            p = np.zeros((n, n))
            p[rr, idx] = g[rr, idx] * (vals > 0)
            return ((p + p.T) @ Z,)

        return _record(out, (z,), vjp)
    out, _ = _topk_csr(idx, vals, n)
    cols = out.indices

    def vjp(g):
        p = sparse.csr_array((g, cols, out.indptr), shape=(n, n))
        return (p @ Z + p.T @ Z,)

    return _record(out, (z,), vjp)


# ---------------------------------------------------------------------------
# multi-hop structure


@dataclass
class HopPowers:
    """Hop matrices ``H^1..H^K`` of a graph plus their joint support."""

    powers: list
    reach: sparse.csr_array
    on_reach: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.reach.shape[0]

    @property
    def K(self):
        return len(self.powers)

    def unreachable(self):
        """Dense binary matrix: 1 where ``j`` is not within K hops of ``i`` and ``i != j``."""
        far = np.ones((self.n, self.n))
        far[csr_rows(self.reach), self.reach.indices] = 0.0
        np.fill_diagonal(far, 0.0)
        return far


def _binary(a):
    a = sparse.csr_array(a)
    a.data = (a.data != 0).astype(np.float64)
    a.eliminate_zeros()
    a.sort_indices()
    return a


@dataclass
class DenseHops:
    """Dense counterpart of :class:`HopPowers` for small or dense graphs."""

    powers: list
    far: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.far.shape[0]

    @property
    def K(self):
        return len(self.powers)

    def unreachable(self):
        return self.far


def hop_powers(a, K, mode="support", dense=False):
    """Multi-hop matrices of ``a``.

    ``mode="support"`` returns binary walk-reachability indicators
    ``1[(A^l)_ij > 0]``; ``mode="weighted"`` returns raw matrix powers.
    ``dense`` returns a :class:`DenseHops` computed with dense products.
    """
    if K < 1:
        raise GraphError("hop cutoff K must be >= 1")
    if mode not in ("support", "weighted"):
        raise GraphError(f"unknown hop mode {mode!r}")
    a = a.data if isinstance(a, Tensor) else a
    if a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got {a.shape}")
    if dense:
        A = a.toarray() if sparse.issparse(a) else np.asarray(a, dtype=np.float64)
        base = (A != 0).astype(np.float64) if mode == "support" else A.astype(np.float64)
        powers = [base]
        for _ in range(K - 1):
            nxt = powers[-1] @ base
            powers.append((nxt > 0).astype(np.float64) if mode == "support" else nxt)
        reached = np.zeros(A.shape, dtype=bool)
        for p in powers:
            reached |= p != 0
        far = (~reached).astype(np.float64)
        np.fill_diagonal(far, 0.0)
        return DenseHops(powers, far)
    a = sparse.csr_array(a, dtype=np.float64)
    a.eliminate_zeros()
    a.sort_indices()
    base = _binary(a) if mode == "support" else a
    powers = [base]
    for _ in range(K - 1):
        nxt = sparse.csr_array(powers[-1] @ base)
        nxt = _binary(nxt) if mode == "support" else nxt
        nxt.sort_indices()
        powers.append(nxt)
    reach = powers[0]
    for p in powers[1:]:
        reach = reach + p
    reach = _binary(reach)
    keys = csr_keys(reach)
    on_reach = np.vstack([gather_csr(p, keys) for p in powers])
    return HopPowers(powers, reach, on_reach)


# ---------------------------------------------------------------------------
# kNN graphs


def knn_graph(x, k, metric="cosine"):
    """Dense binary kNN adjacency (self excluded), symmetrized by ``max(A, A^T)``."""
    X = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise GraphError(f"knn_graph needs 1 <= k < N, got k={k}, N={n}")
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        U = X / safe[:, None]
        score = U @ U.T  # similarity, larger is nearer
    elif metric == "euclidean":
        sq = (X * X).sum(axis=1)
        score = -(sq[:, None] + sq[None, :] - 2.0 * X @ X.T)
        score = np.minimum(score, 0.0)
    else:
        raise GraphError(f"unknown metric {metric!r}")
    np.fill_diagonal(score, -np.inf)
    idx = kernels.topk_select(np.ascontiguousarray(score), k)
    a = np.zeros((n, n))
    a[np.arange(n)[:, None], idx] = 1.0
    return np.maximum(a, a.T)


# ---------------------------------------------------------------------------
# noise edges


@dataclass
class NoiseRecord:
    """Undirected noise edges (``src < dst``) planted into a graph."""

    planted: EdgeList
    seed: int

    @property
    def added(self):
        return len(self.planted)


def inject_noise_edges(graph, n_noise, seed):
    """Add ``n_noise`` random absent node pairs with Uniform(0, 1) weights.

    ``graph`` is a dense array, a sparse matrix or an :class:`EdgeList`;
    the same kind is returned. Noise edges are added in both directions.
    """
    as_edges = isinstance(graph, EdgeList)
    as_sparse = sparse.issparse(graph)
    if as_edges:
        n = graph.n_nodes
        present = graph.to_csr(symmetric=True)
    else:
        present = sparse.csr_array(graph)
        n = present.shape[0]
    support = sparse.csr_array(_binary(present) + _binary(present).T)
    occupied = np.zeros((n, n), dtype=bool)
    occupied[csr_rows(support), support.indices] = True
    iu, ju = np.triu_indices(n, k=1)
    free = ~occupied[iu, ju]
    cand_i, cand_j = iu[free], ju[free]
    if n_noise < 0 or n_noise > len(cand_i):
        raise GraphError(f"cannot plant {n_noise} noise edges, only {len(cand_i)} absent pairs")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(cand_i), size=n_noise, replace=False))
    w = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=n_noise)
    planted = EdgeList(cand_i[pick], cand_j[pick], w, n)
    record = NoiseRecord(planted, seed)
    if as_edges:
        out = EdgeList(
            np.concatenate([graph.src, planted.src, planted.dst]),
            np.concatenate([graph.dst, planted.dst, planted.src]),
            np.concatenate([graph.weight, w, w]),
            n,
        )
        return out, record
    noisy = present + planted.to_csr(symmetric=True)
    if as_sparse:
        return sparse.csr_array(noisy), record
    return np.asarray(sparse.csr_array(noisy).toarray()), record


def remaining_noise(learned, record):
    """(planted pairs still carrying a nonzero learned weight in either direction, planted count)."""
    p = record.planted
    if sparse.issparse(learned):
        lc = sparse.csr_array(learned)
        keys_f = p.src * lc.shape[1] + p.dst
        keys_b = p.dst * lc.shape[1] + p.src
        fwd = gather_csr(lc, keys_f) != 0
        bwd = gather_csr(lc, keys_b) != 0
    else:
        L = learned.data if isinstance(learned, Tensor) else np.asarray(learned)
        fwd = L[p.src, p.dst] != 0
        bwd = L[p.dst, p.src] != 0
    return int(np.count_nonzero(fwd | bwd)), len(p)
