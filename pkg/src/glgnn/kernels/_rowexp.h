/* Vectorised row helpers for the fused softmax kernel.
 * On x86-64 glibc the SIMD variants of exp from libmvec are declared
 * explicitly so the loop vectorises without -ffast-math. */
#ifndef GLGNN_ROWEXP_H
#define GLGNN_ROWEXP_H

#include <math.h>
#include <stddef.h>

#ifdef __cplusplus
#define GLGNN_RESTRICT __restrict__
#define GLGNN_NOTHROW throw()
extern "C" {
#else
#define GLGNN_RESTRICT restrict
#define GLGNN_NOTHROW
#endif

#if defined(__x86_64__) && defined(__GLIBC__) && defined(__GNUC__) && !defined(__clang__)
__attribute__((simd("notinbranch"))) double exp(double) GLGNN_NOTHROW;
#define GLGNN_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define GLGNN_CLONES
#endif

GLGNN_CLONES static double glgnn_row_max(const double *GLGNN_RESTRICT r, ptrdiff_t m)
{
    double mx = -INFINITY;
#pragma omp simd reduction(max:mx)
    for (ptrdiff_t j = 0; j < m; j++)
        mx = r[j] > mx ? r[j] : mx;
    return mx;
}

/* r = exp(r - mx) in place; returns the sum */
GLGNN_CLONES static double glgnn_row_exp(double *GLGNN_RESTRICT r, ptrdiff_t m, double mx)
{
    double tot = 0.0;
#pragma omp simd reduction(+:tot)
    for (ptrdiff_t j = 0; j < m; j++) {
        double v = exp(r[j] - mx);
        r[j] = v;
        tot += v;
    }
    return tot;
}

GLGNN_CLONES static void glgnn_row_scale(double *GLGNN_RESTRICT r, ptrdiff_t m, double c)
{
#pragma omp simd
    for (ptrdiff_t j = 0; j < m; j++)
        r[j] *= c;
}

#ifdef __cplusplus
}
#endif

#endif
