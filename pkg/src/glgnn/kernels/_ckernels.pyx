# distutils: language = c++
# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Row-wise top-k selection kernels.

Ordering everywhere: larger value first, equal values resolved toward the
lower column index. Returned column indices are sorted ascending per row.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cdef extern from "_rowexp.h" nogil:
    double glgnn_row_max(const double* r, Py_ssize_t m)
    double glgnn_row_exp(double* r, Py_ssize_t m, double mx)
    void glgnn_row_scale(double* r, Py_ssize_t m, double c)
from scipy.linalg.blas import dsyrk

cnp.import_array()


cdef extern from "_select.h" nogil:
    double _kth_largest "glgnn_kth_largest"(double* a, Py_ssize_t n, Py_ssize_t k) noexcept


cdef inline double _val(double v, bint clamp) noexcept nogil:
    if clamp and v < 0.0:
        return 0.0
    return v


cdef void _emit(const double* vals, const cnp.int64_t* cols, Py_ssize_t m, Py_ssize_t k,
                double thr, bint clamp, cnp.int64_t* out) noexcept nogil:
    # branchless over the unpredictable keep/skip decisions; cols NULL means j
    cdef Py_ssize_t j, c = 0, at_least = 0, need
    cdef double v
    cdef bint eq, take
    for j in range(m):
        at_least += _val(vals[j], clamp) >= thr
    if at_least == k:
        # no surplus ties at the threshold: a single running count suffices
        for j in range(m):
            out[c] = cols[j] if cols != NULL else j
            c += _val(vals[j], clamp) >= thr
            if c == k:
                return
        return
    need = k
    for j in range(m):
        need -= _val(vals[j], clamp) > thr
    for j in range(m):
        v = _val(vals[j], clamp)
        eq = v == thr
        take = (v > thr) | (eq & (need > 0))
        if c < k:
            out[c] = cols[j] if cols != NULL else j
        c += take
        need -= eq & take


cdef void _select_row(const double* row, Py_ssize_t n, Py_ssize_t k, bint clamp,
                      double* work, double* cval, cnp.int64_t* cidx,
                      cnp.int64_t* out) noexcept nogil:
    # Exact threshold by quickselect, then emit in ascending column order with
    # threshold ties going to the lowest columns. For small k a strided
    # sample's k-th largest bounds the row's k-th largest from below, so only
    # entries above it need selecting.
    cdef Py_ssize_t j, m, stride
    cdef double v, tau
    if k >= n:
        for j in range(n):
            out[j] = j
        return
    stride = n // (8 * k)
    if stride < 2:
        for j in range(n):
            work[j] = _val(row[j], clamp)
        _emit(row, NULL, n, k, _kth_largest(work, n, k), clamp, out)
        return
    m = 0
    j = 0
    while j < n:
        work[m] = _val(row[j], clamp)
        m += 1
        j += stride
    tau = _kth_largest(work, m, k)
    m = 0
    for j in range(n):
        # branchless append: the slot is overwritten unless kept
        v = _val(row[j], clamp)
        cval[m] = v
        cidx[m] = j
        m += v >= tau
    for j in range(m):
        work[j] = cval[j]
    _emit(cval, cidx, m, k, _kth_largest(work, m, k), False, out)


cdef void _select_rows(const double[:, ::1] values, Py_ssize_t kk, bint clamp, double[::1] work,
                       double[::1] cval, cnp.int64_t[::1] cidx, cnp.int64_t[:, ::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(values.shape[0]):
            _select_row(&values[i, 0], values.shape[1], kk, clamp, &work[0], &cval[0], &cidx[0],
                        &out[i, 0])


def topk_select(const double[:, ::1] values, Py_ssize_t k, bint clamp=False):
    """Column indices (rows x min(k, cols)) of the k largest entries per row."""
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t n_cols = values.shape[1]
    cdef Py_ssize_t kk = min(k, n_cols)
    cdef Py_ssize_t i
    out_arr = np.empty((n_rows, kk), dtype=np.int64)
    if kk == 0 or n_rows == 0:
        return out_arr
    cdef cnp.int64_t[:, ::1] out = out_arr
    if kk == n_cols:
        out_arr[:] = np.arange(n_cols)
        return out_arr
    if n_cols // (8 * kk) >= 2:
        work_arr = np.empty(n_cols, dtype=np.float64)
        cval_arr = np.empty(n_cols, dtype=np.float64)
        cidx_arr = np.empty(n_cols, dtype=np.int64)
        _select_rows(values, kk, clamp, work_arr, cval_arr, cidx_arr, out)
        return out_arr
    # numpy's vectorised partition finds the per-row threshold faster than
    # a scalar select; the emit pass then applies the tie rule
    thr_arr = np.partition(values, n_cols - kk, axis=1)[:, n_cols - kk]
    if clamp:
        np.maximum(thr_arr, 0.0, out=thr_arr)
    cdef double[::1] thr = np.ascontiguousarray(thr_arr)
    with nogil:
        for i in range(n_rows):
            _emit(&values[i, 0], NULL, n_cols, kk, thr[i], clamp, &out[i, 0])
    return out_arr


def relation_topk(const double[:, ::1] sim, const cnp.int64_t[::1] indptr,
                  const cnp.int64_t[::1] indices, const double[::1] near_vals,
                  double far_val, Py_ssize_t k):
    """Top-k of ``sim * mask`` without materialising the mask.

    The mask is ``near_vals`` on the CSR pattern ``(indptr, indices)``,
    ``far_val`` elsewhere off the diagonal and 0 on an uncovered diagonal.
    Returns the selected columns, the product values, the mask values and the
    position of each selection in the CSR pattern (-1 for far entries).
    """
    cdef Py_ssize_t n = sim.shape[0]
    cdef Py_ssize_t m = sim.shape[1]
    cdef Py_ssize_t kk = min(k, m)
    cdef Py_ssize_t i, j, p, c
    idx_arr = np.empty((n, kk), dtype=np.int64)
    rv_arr = np.empty((n, kk), dtype=np.float64)
    mv_arr = np.empty((n, kk), dtype=np.float64)
    pos_arr = np.empty((n, kk), dtype=np.int64)
    if kk == 0 or n == 0:
        return idx_arr, rv_arr, mv_arr, pos_arr
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] rv = rv_arr
    cdef double[:, ::1] mv = mv_arr
    cdef cnp.int64_t[:, ::1] pos = pos_arr
    rowbuf_arr = np.empty(m, dtype=np.float64)
    posbuf_arr = np.full(m, -1, dtype=np.int64)
    cdef double[::1] rowbuf = rowbuf_arr
    cdef cnp.int64_t[::1] posbuf = posbuf_arr
    cdef double[::1] work = np.empty(m, dtype=np.float64)
    cdef double[::1] cval = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] cidx = np.empty(m, dtype=np.int64)
    cdef double mval
    with nogil:
        for i in range(n):
            for j in range(m):
                rowbuf[j] = sim[i, j] * far_val
            if i < m:
                rowbuf[i] = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                rowbuf[j] = sim[i, j] * near_vals[p]
                posbuf[j] = p
            _select_row(&rowbuf[0], m, kk, False, &work[0], &cval[0], &cidx[0], &idx[i, 0])
            for c in range(kk):
                j = idx[i, c]
                p = posbuf[j]
                if p >= 0:
                    mval = near_vals[p]
                elif j == i:
                    mval = 0.0
                else:
                    mval = far_val
                rv[i, c] = rowbuf[j]
                mv[i, c] = mval
                pos[i, c] = p
            for p in range(indptr[i], indptr[i + 1]):
                posbuf[indices[p]] = -1
    return idx_arr, rv_arr, mv_arr, pos_arr


cdef void _fill_upper(double* a, Py_ssize_t n) noexcept nogil:
    # copy the lower triangle onto the upper one, in cache-sized tiles
    cdef Py_ssize_t B = 64, ib, jb, i, j, iend, jend
    ib = 0
    while ib < n:
        iend = min(ib + B, n)
        jb = ib
        while jb < n:
            jend = min(jb + B, n)
            for i in range(ib, iend):
                for j in range(max(jb, i + 1), jend):
                    a[i * n + j] = a[j * n + i]
            jb += B
        ib += B


def gram(Z):
    """Symmetric ``Z @ Z.T`` from one rank-k update, returned C-contiguous."""
    Z = np.asarray(Z, dtype=np.float64)
    cdef Py_ssize_t n = Z.shape[0]
    if n == 0 or Z.shape[1] == 0:
        return np.zeros((n, n))
    # dsyrk fills the upper triangle of a Fortran array; its transpose is a
    # C-ordered array with the lower triangle filled
    out = dsyrk(1.0, Z).T
    if not out.flags.c_contiguous:
        out = np.ascontiguousarray(out)
    cdef double[:, ::1] view = out
    with nogil:
        _fill_upper(&view[0, 0], n)
    return out


def softmax_relation_topk(double[:, ::1] logits, const cnp.int64_t[::1] indptr,
                          const cnp.int64_t[::1] indices, const double[::1] near_vals,
                          double far_val, Py_ssize_t k, bint exclude_diagonal):
    """Row softmax of ``logits`` (in place) followed by :func:`relation_topk`."""
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t m = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, tot
    cdef bint skip
    with nogil:
        for i in range(n):
            skip = exclude_diagonal and i < m
            if skip:
                logits[i, i] = -INFINITY
            mx = glgnn_row_max(&logits[i, 0], m)
            if skip:
                # exp(0) = 1 exactly, removed from the total below
                logits[i, i] = mx
            tot = glgnn_row_exp(&logits[i, 0], m, mx)
            if skip:
                logits[i, i] = 0.0
                tot -= 1.0
            glgnn_row_scale(&logits[i, 0], m, 1.0 / tot)
    return relation_topk(logits, indptr, indices, near_vals, far_val, k)
