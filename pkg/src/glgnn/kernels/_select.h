/* k-th largest by introselect; reorders a[0..n) */
#ifndef GLGNN_SELECT_H
#define GLGNN_SELECT_H
#include <algorithm>
#include <functional>

static inline double glgnn_kth_largest(double* a, Py_ssize_t n, Py_ssize_t k)
{
    std::nth_element(a, a + (k - 1), a + n, std::greater<double>());
    return a[k - 1];
}

#endif
