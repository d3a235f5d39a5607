#pragma once

// Dense float64 kernels behind the tensor library. Every kernel assigns each
// output element from an inner loop whose iteration order does not depend on
// how the outer loop is scheduled, so the OpenMP path is bit-identical to the
// serial reference (enforced by tests/test_tensor.cpp and the bench target).

#include <algorithm>
#include <cstdint>
#include <vector>

namespace minivlm::kernels {

using i64 = std::int64_t;

enum class ExecMode { serial, parallel, automatic };

// Process-wide switch, default automatic (parallel above a work threshold).
void set_exec_mode(ExecMode mode);
ExecMode exec_mode();

// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

// Decision used by the tensor layer: parallelize when the mode allows it and
// the element count is worth the dispatch overhead.
bool use_parallel(i64 work);

// ---- elementwise -----------------------------------------------------------

template <class F>
void map1(double* out, const double* x, i64 n, bool parallel, F f) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 i = 0; i < n; ++i) out[i] = f(x[i]);
}

template <class F>
void map2(double* out, const double* a, const double* b, i64 n, bool parallel,
          F f) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
}

// b is a repeating suffix block of length nb (row-major suffix broadcast).
template <class F>
void map2_suffix(double* out, const double* a, const double* b, i64 n, i64 nb,
                 bool parallel, F f) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 i = 0; i < n; ++i) out[i] = f(a[i], b[i % nb]);
}

void fill(double* dst, i64 n, double v);
void accumulate(double* dst, const double* src, i64 n, bool parallel);

// ---- matmul ----------------------------------------------------------------

// C[b] = A[b] * B[b] with row-major [m,k] x [k,n] -> [m,n] per batch entry.
// a_stride/b_stride are the element offsets between consecutive batch entries
// (0 broadcasts one operand across the batch). When `acc` is set the product
// is added onto C instead of overwriting it. Inner accumulation runs in fixed
// k order for every output element.
void matmul(double* c, const double* a, const double* b, i64 batch, i64 m,
            i64 k, i64 n, i64 a_stride, i64 b_stride, bool acc, bool parallel);

// Like matmul but each output element sums its k addends in ascending value
// order, making the result invariant to permutations of the contraction axis
// (used by the view-fusion path, k is tiny there).
void matmul_value_ordered(double* c, const double* a, const double* b,
                          i64 batch, i64 m, i64 k, i64 n, i64 a_stride,
                          i64 b_stride, bool parallel);

// out[j,i] = in[i,j]
void transpose2d(double* out, const double* in, i64 rows, i64 cols,
                 bool parallel);

// Generic copy that swaps two axes of a dense row-major tensor.
// shape/strides describe the source; dim0/dim1 are the swapped axes.
void swap_axes_copy(double* out, const double* in,
                    const std::vector<i64>& shape, int dim0, int dim1,
                    bool parallel);

// ---- reductions along one axis (outer, len, inner indexing) ----------------
// Element (o, t, i) lives at (o*len + t)*inner + i.

void sum_axis(double* out, const double* in, i64 outer, i64 len, i64 inner,
              bool value_ordered, bool parallel);

// Broadcast dy/len (or dy) back along the reduced axis.
void broadcast_axis_acc(double* dx, const double* dy, i64 outer, i64 len,
                        i64 inner, double scale, bool parallel);

// ---- softmax ----------------------------------------------------------------

// Max-subtracted softmax along the middle axis. -inf entries become exact
// zeros; a fully masked lane reports failure via the return value.
// When value_ordered is set the normalizer sums exponentials in ascending
// order (permutation-invariant accumulation).
bool softmax_axis(double* out, const double* in, i64 outer, i64 len, i64 inner,
                  bool value_ordered, bool parallel);

// dx = y .* (dy - sum(dy .* y)) along the same axis layout.
void softmax_backward_axis(double* dx, const double* y, const double* dy,
                           i64 outer, i64 len, i64 inner, bool parallel);

// ---- row standardization (last axis) ---------------------------------------

// Per row: mean, rstd = 1/sqrt(var + eps), xhat = (x - mean)*rstd,
// out = xhat * gamma + beta (gamma/beta may be null for plain
// standardization). mean/rstd buffers hold one value per row.
void rowstd_forward(double* out, double* mean, double* rstd, const double* x,
                    i64 rows, i64 d, double eps, const double* gamma,
                    const double* beta, bool parallel);

void rowstd_backward_dx(double* dx, const double* dy, const double* x,
                        const double* mean, const double* rstd,
                        const double* gamma, i64 rows, i64 d, bool parallel);

// dgamma[j] += sum_rows dy[r,j] * xhat[r,j]; dbeta[j] += sum_rows dy[r,j].
// Parallel over j, serial over rows: deterministic.
void rowstd_backward_affine(double* dgamma, double* dbeta, const double* dy,
                            const double* x, const double* mean,
                            const double* rstd, i64 rows, i64 d,
                            bool parallel);

// ---- rows ------------------------------------------------------------------

void gather_rows(double* out, const double* table, const i64* ids, i64 n,
                 i64 d, bool parallel);
// Serial scatter (deterministic accumulation for repeated ids).
void scatter_rows_acc(double* table, const double* grads, const i64* ids,
                      i64 n, i64 d);

}  // namespace minivlm::kernels
