"""Selection kernels: compiled when available, numpy otherwise.

Set ``GLGNN_PURE_PYTHON=1`` to force the numpy implementations.
"""
import os

from . import _pykernels

if os.environ.get("GLGNN_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"


def topk_select(values, k, clamp=False):
    return _impl.topk_select(values, int(k), bool(clamp))


def relation_topk(sim, indptr, indices, near_vals, far_val, k):
    return _impl.relation_topk(sim, indptr, indices, near_vals, float(far_val), int(k))


def gram(Z):
    """Symmetric ``Z @ Z.T``."""
    return _impl.gram(Z)


def softmax_relation_topk(logits, indptr, indices, near_vals, far_val, k, exclude_diagonal=False):
    """Row-softmax ``logits`` in place, then select as :func:`relation_topk`."""
    return _impl.softmax_relation_topk(logits, indptr, indices, near_vals, float(far_val),
                                       int(k), bool(exclude_diagonal))


__all__ = ["BACKEND", "gram", "relation_topk", "softmax_relation_topk", "topk_select"]
