"""One sub-module: feature selection, label-augmented relation graph with
multi-hop reweighting, top-k sparsification and a two-layer generalized GCN.

Shapes: ``X`` is N x F, the label block N x C, ``s`` 1 x F, ``W1`` F x hidden,
``W2`` hidden x C and ``V_raw`` 1 x (K + 1). After a sigmoid ``V_raw`` gives
the hop weights ``v[0..K-1]`` for 1..K hops and ``v[K]`` for farther pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import kernels
from .graph_ops import gram_topk, hop_powers, normalize_adjacency
from .numerics import (
    ShapeError, Tensor, _record, concat_cols, csr_rows, dropout, matmul, mul,
    relu, row_softmax, sigmoid, transpose,
)

FUSION_GRAPHS = ("sparse", "normalized", "second")
STORAGE = ("auto", "dense", "sparse")
AGG_MODES = ("previous", "mean", "learned")

# "auto" storage goes dense at or below this node count or above this k/N ratio
DENSE_MAX_N = 300
DENSE_MIN_RATIO = 0.05


@dataclass
class ModelConfig:
    modules: int = 3
    hops: int = 2
    k: int = 10
    hidden: int = 32
    dropout: float = 0.5
    hop_mode: str = "support"
    fusion_graph: str = "sparse"
    agg_mode: str = "previous"
    freeze_selection: bool = False
    freeze_hops: bool = False
    knn_init: int = 10
    knn_metric: str = "cosine"
    storage: str = "auto"
    self_loops: bool = False

    def __post_init__(self):
        if self.modules < 1 or self.k < 1 or self.hops < 1 or self.hidden < 1:
            raise ValueError("modules, k, hops and hidden must all be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.fusion_graph not in FUSION_GRAPHS:
            raise ValueError(f"fusion_graph must be one of {FUSION_GRAPHS}")
        if self.hop_mode not in ("support", "weighted"):
            raise ValueError("hop_mode must be 'support' or 'weighted'")
        if self.agg_mode not in AGG_MODES:
            raise ValueError(f"agg_mode must be one of {AGG_MODES}")
        if self.storage not in STORAGE:
            raise ValueError(f"storage must be one of {STORAGE}")

    def dense_for(self, n):
        if self.storage != "auto":
            return self.storage == "dense"
        return n <= DENSE_MAX_N or self.k / n > DENSE_MIN_RATIO


@dataclass
class SubmoduleParams:
    s: Tensor
    W1: Tensor
    W2: Tensor
    V_raw: Tensor

    def named(self, prefix, cfg):
        out = {f"{prefix}.W1": self.W1, f"{prefix}.W2": self.W2}
        if not cfg.freeze_selection:
            out[f"{prefix}.s"] = self.s
        if not cfg.freeze_hops:
            out[f"{prefix}.V_raw"] = self.V_raw
        return out


@dataclass
class SubmoduleState:
    """Graph carried from the previous iteration, with its hop structure cached."""

    A_last: sparse.csr_array | np.ndarray
    _hops: dict = field(default_factory=dict, repr=False, compare=False)

    def hops(self, K, mode, dense=False):
        key = (K, mode, dense)
        if key not in self._hops:
            self._hops[key] = hop_powers(self.A_last, K, mode, dense=dense)
        return self._hops[key]


@dataclass
class SubmoduleOutput:
    X2: Tensor
    A: Tensor
    A_norm: Tensor
    A1_norm: Tensor
    X1: Tensor
    graph_for_fusion: Tensor
    eval_X2: np.ndarray


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_submodule(F, C, cfg, rng):
    s = np.ones((1, F)) if cfg.freeze_selection else rng.uniform(0.9, 1.1, size=(1, F))
    return SubmoduleParams(
        s=Tensor(s),
        W1=Tensor(glorot(rng, F, cfg.hidden)),
        W2=Tensor(glorot(rng, cfg.hidden, C)),
        V_raw=Tensor(np.zeros((1, cfg.hops + 1))),
    )


def select_features(x, s):
    if s.rows != 1 or s.cols != x.cols:
        raise ShapeError(f"selection vector {s.shape} does not match {x.cols} features")
    return mul(x, s)


def concat_labels(xf, y, train):
    """Label block (training rows only, zeros elsewhere) followed by the features."""
    Y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if Y.shape[0] != xf.rows:
        raise ShapeError(f"labels have {Y.shape[0]} rows, features {xf.rows}")
    block = np.zeros_like(Y)
    train = np.asarray(train, dtype=np.int64)
    block[train] = Y[train]
    return concat_cols(Tensor(block), xf)


def hop_values(v, cfg):
    if cfg.freeze_hops:
        return Tensor(np.ones((1, cfg.hops + 1)))
    return sigmoid(v)


def hop_weights(hops, v):
    """Dense ``sum_k H^k v_k + H_far v_far`` as a tape operation."""
    K = hops.K
    if v.shape != (1, K + 1):
        raise ShapeError(f"hop weights need shape (1, {K + 1}), got {v.shape}")
    V = v.data.ravel()
    far = hops.unreachable()
    dense_powers = [p.toarray() if sparse.issparse(p) else p for p in hops.powers]
    M = far * V[K]
    for k in range(K):
        M = M + dense_powers[k] * V[k]

    def vjp(g):
        gv = [(g * h).sum() for h in dense_powers] + [(g * far).sum()]
        return (np.array([gv]),)

    return _record(M, (v,), vjp)


def relation_graph(z, hops, v, self_loops=True):
    """Dense ``row_softmax(Z Z^T) * hop_weights`` built from tape primitives.

    Without ``self_loops`` the softmax runs over the other samples only.
    """
    sim = row_softmax(matmul(z, transpose(z)), exclude_diagonal=not self_loops)
    return mul(sim, hop_weights(hops, v))


def _similarity(Z, self_loops):
    S = kernels.gram(Z)
    if not self_loops:
        np.fill_diagonal(S, -np.inf)
    S -= S.max(axis=1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=1, keepdims=True)
    return S


def relation_topk(z, hops, v, k, self_loops=True):
    """CSR ``topk_rows(relation_graph(z, hops, v), k)`` with a fused backward.

    The mask and the product are never materialised densely; only the
    softmax similarity is kept for the backward pass.
    """
    K = hops.K
    if v.shape != (1, K + 1):
        raise ShapeError(f"hop weights need shape (1, {K + 1}), got {v.shape}")
    Z = z.data
    n = Z.shape[0]
    V = v.data.ravel()
    reach = hops.reach
    near = V[:K] @ hops.on_reach if reach.nnz else np.zeros(0)
    S = kernels.gram(Z)
    # S becomes the row softmax in place
    idx, rv, mv, pos = kernels.softmax_relation_topk(
        S, reach.indptr.astype(np.int64), reach.indices.astype(np.int64), near, V[K], k,
        not self_loops)
    keep = rv > 0
    counts = keep.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    out = sparse.csr_array((rv[keep], idx[keep], indptr), shape=(n, n))
    rows, cols = csr_rows(out), out.indices
    m_sel, p_sel = mv[keep], pos[keep]

    def vjp(g):
        s_sel = S[rows, cols]
        gs = g * s_sel
        gv = np.zeros(K + 1)
        is_near = p_sel >= 0
        if K and is_near.any():
            gv[:K] = hops.on_reach[:, p_sel[is_near]] @ gs[is_near]
        gv[K] = gs[(~is_near) & (cols != rows)].sum()
        gz = None
        if z.requires_grad:
            t = g * m_sel * s_sel
            r = np.bincount(rows, t, minlength=n)
            p = sparse.csr_array((t, cols, indptr), shape=(n, n))
            # softmax normalisation term: diag(r) S Z + S^T diag(r) Z
            rz = r[:, None] * Z
            gz = p @ Z + p.T @ Z - r[:, None] * (S @ Z) - S.T @ rz
        return gz, gv.reshape(1, -1)

    return _record(out, (z, v), vjp)


def relation_topk_dense(z, hops, v, k, self_loops=True):
    """Dense-output ``topk_rows(relation_graph(z, hops, v), k)`` for :class:`DenseHops`."""
    K = hops.K
    if v.shape != (1, K + 1):
        raise ShapeError(f"hop weights need shape (1, {K + 1}), got {v.shape}")
    Z = z.data
    n = Z.shape[0]
    S = _similarity(Z, self_loops)
    V = v.data.ravel()
    Mw = hops.far * V[K]
    for j in range(K):
        Mw += hops.powers[j] * V[j]
    R = S * Mw
    idx = kernels.topk_select(R, k)
    rr = np.arange(n)[:, None]
    out = np.zeros((n, n))
    out[rr, idx] = R[rr, idx]

    def vjp(g):
        gr = np.zeros((n, n))
        gr[rr, idx] = g[rr, idx]
        gm = gr * S
        gv = np.array([[(gm * p).sum() for p in hops.powers] + [(gm * hops.far).sum()]])
        gz = None
        if z.requires_grad:
            gs = gr * Mw
            gl = S * (gs - (gs * S).sum(axis=1, keepdims=True))
            gz = (gl + gl.T) @ Z
        return gz, gv

    return _record(out, (z, v), vjp)


def submodule_forward(x, label_block, params, state, cfg, training=False, rng=None):
    """Run one sub-module.

    ``label_block`` already carries zeros outside the training rows. Dropout
    acts on the input of the second GCN layer only, so the learned graphs are
    identical in training and evaluation mode.
    """
    xs = select_features(x, params.s)
    lb = Tensor(label_block)
    z = concat_cols(lb, xs)
    v = hop_values(params.V_raw, cfg)
    dense = cfg.dense_for(x.rows)
    hops = state.hops(cfg.hops, cfg.hop_mode, dense)
    a = (relation_topk_dense if dense else relation_topk)(z, hops, v, cfg.k, cfg.self_loops)
    a_norm = normalize_adjacency(a)
    x1 = relu(matmul(a_norm, matmul(xs, params.W1)))
    z1 = concat_cols(lb, x1)
    a1_norm = normalize_adjacency(gram_topk(z1, cfg.k, dense=dense, self_loops=cfg.self_loops))
    h = dropout(x1, cfg.dropout, rng) if training else x1
    x2 = row_softmax(matmul(a_norm, matmul(h, params.W2)))
    if h is x1:
        eval_x2 = x2.data
    else:
        logits = a_norm.data @ (x1.data @ params.W2.data)
        logits -= logits.max(axis=1, keepdims=True)
        eval_x2 = np.exp(logits)
        eval_x2 /= eval_x2.sum(axis=1, keepdims=True)
    fusion = {"sparse": a, "normalized": a_norm, "second": a1_norm}[cfg.fusion_graph]
    return SubmoduleOutput(x2, a, a_norm, a1_norm, x1, fusion, eval_x2)
