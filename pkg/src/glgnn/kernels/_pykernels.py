"""Numpy implementations of the selection kernels (same contract as ``_ckernels``)."""
import numpy as np


def topk_select(values, k, clamp=False):
    values = np.asarray(values, dtype=np.float64)
    n_rows, n_cols = values.shape
    kk = min(k, n_cols)
    if kk == 0 or n_rows == 0:
        return np.empty((n_rows, kk), dtype=np.int64)
    if kk == n_cols:
        return np.tile(np.arange(n_cols, dtype=np.int64), (n_rows, 1))
    if clamp:
        values = np.maximum(values, 0.0)
    thresh = np.partition(values, n_cols - kk, axis=1)[:, n_cols - kk][:, None]
    above = values > thresh
    need = kk - above.sum(axis=1, keepdims=True)
    tied = values == thresh
    keep = above | (tied & (np.cumsum(tied, axis=1) <= need))
    cols = np.nonzero(keep)[1]
    return cols.reshape(n_rows, kk).astype(np.int64, copy=False)


def relation_topk(sim, indptr, indices, near_vals, far_val, k):
    n, m = sim.shape
    mask = np.full((n, m), far_val, dtype=np.float64)
    diag = np.arange(min(n, m))
    mask[diag, diag] = 0.0
    rows = np.repeat(np.arange(n), np.diff(indptr))
    mask[rows, indices] = near_vals
    posmat = np.full((n, m), -1, dtype=np.int64)
    posmat[rows, indices] = np.arange(len(indices))
    prod = sim * mask
    idx = topk_select(prod, k)
    r = np.arange(n)[:, None]
    return idx, prod[r, idx], mask[r, idx], posmat[r, idx]


def gram(Z):
    Z = np.asarray(Z, dtype=np.float64)
    return Z @ Z.T


def softmax_relation_topk(logits, indptr, indices, near_vals, far_val, k, exclude_diagonal):
    if exclude_diagonal:
        np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return relation_topk(logits, indptr, indices, near_vals, far_val, k)
