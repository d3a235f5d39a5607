#include "minivlm/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace minivlm::kernels {

namespace {

std::atomic<ExecMode> g_mode{ExecMode::automatic};

// Below this many output elements the OpenMP dispatch costs more than it buys.
constexpr i64 kParallelGrain = 1 << 12;

// Insertion sort: the contraction axes this is used on hold at most a handful
// of views, and the sort must be by value so that permuted inputs produce the
// same addend order.
inline double sum_ascending(double* buf, i64 n) {
  for (i64 i = 1; i < n; ++i) {
    double key = buf[i];
    i64 j = i - 1;
    while (j >= 0 && buf[j] > key) {
      buf[j + 1] = buf[j];
      --j;
    }
    buf[j + 1] = key;
  }
  double s = 0.0;
  for (i64 i = 0; i < n; ++i) s += buf[i];
  return s;
}

}  // namespace

void set_exec_mode(ExecMode mode) { g_mode.store(mode); }
ExecMode exec_mode() { return g_mode.load(); }

int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

bool use_parallel(i64 work) {
  switch (g_mode.load()) {
    case ExecMode::serial:
      return false;
    case ExecMode::parallel:
      return max_threads() > 1;
    case ExecMode::automatic:
    default:
      return max_threads() > 1 && work >= kParallelGrain;
  }
}

void fill(double* dst, i64 n, double v) { std::fill(dst, dst + n, v); }

void accumulate(double* dst, const double* src, i64 n, bool parallel) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 i = 0; i < n; ++i) dst[i] += src[i];
}

void matmul(double* c, const double* a, const double* b, i64 batch, i64 m,
            i64 k, i64 n, i64 a_stride, i64 b_stride, bool acc, bool parallel) {
  // ikj order: the j loop vectorizes and every c element accumulates its k
  // addends in the same order on both execution paths.
#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (i64 bi = 0; bi < batch; ++bi) {
    for (i64 i = 0; i < m; ++i) {
      const double* a_row = a + bi * a_stride + i * k;
      const double* b_base = b + bi * b_stride;
      double* c_row = c + (bi * m + i) * n;
      if (!acc) std::fill(c_row, c_row + n, 0.0);
      for (i64 kk = 0; kk < k; ++kk) {
        const double av = a_row[kk];
        const double* b_row = b_base + kk * n;
        for (i64 j = 0; j < n; ++j) c_row[j] += av * b_row[j];
      }
    }
  }
}

void matmul_value_ordered(double* c, const double* a, const double* b,
                          i64 batch, i64 m, i64 k, i64 n, i64 a_stride,
                          i64 b_stride, bool parallel) {
#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (i64 bi = 0; bi < batch; ++bi) {
    for (i64 i = 0; i < m; ++i) {
      const double* a_row = a + bi * a_stride + i * k;
      const double* b_base = b + bi * b_stride;
      double* c_row = c + (bi * m + i) * n;
      std::vector<double> heap_buf;
      double stack_buf[32];
      double* buf = k <= 32 ? stack_buf : (heap_buf.resize(k), heap_buf.data());
      for (i64 j = 0; j < n; ++j) {
        for (i64 kk = 0; kk < k; ++kk) buf[kk] = a_row[kk] * b_base[kk * n + j];
        c_row[j] = sum_ascending(buf, k);
      }
    }
  }
}

void transpose2d(double* out, const double* in, i64 rows, i64 cols,
                 bool parallel) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 i = 0; i < rows; ++i)
    for (i64 j = 0; j < cols; ++j) out[j * rows + i] = in[i * cols + j];
}

void swap_axes_copy(double* out, const double* in,
                    const std::vector<i64>& shape, int dim0, int dim1,
                    bool parallel) {
  const int nd = static_cast<int>(shape.size());
  std::vector<i64> in_strides(nd, 1);
  for (int d = nd - 2; d >= 0; --d) in_strides[d] = in_strides[d + 1] * shape[d + 1];
  std::vector<i64> out_shape(shape);
  std::swap(out_shape[dim0], out_shape[dim1]);
  std::vector<i64> out_strides(nd, 1);
  for (int d = nd - 2; d >= 0; --d)
    out_strides[d] = out_strides[d + 1] * out_shape[d + 1];
  // stride of the source dimension that lands at output dimension d
  std::vector<i64> src_stride(nd);
  for (int d = 0; d < nd; ++d) src_stride[d] = in_strides[d];
  std::swap(src_stride[dim0], src_stride[dim1]);

  i64 total = 1;
  for (i64 s : shape) total *= s;
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 oi = 0; oi < total; ++oi) {
    i64 rem = oi;
    i64 src = 0;
    for (int d = 0; d < nd; ++d) {
      const i64 idx = rem / out_strides[d];
      rem -= idx * out_strides[d];
      src += idx * src_stride[d];
    }
    out[oi] = in[src];
  }
}

void sum_axis(double* out, const double* in, i64 outer, i64 len, i64 inner,
              bool value_ordered, bool parallel) {
  const i64 lanes = outer * inner;
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 lane = 0; lane < lanes; ++lane) {
    const i64 o = lane / inner;
    const i64 i = lane % inner;
    const double* base = in + o * len * inner + i;
    if (value_ordered) {
      std::vector<double> heap_buf;
      double stack_buf[32];
      double* buf =
          len <= 32 ? stack_buf : (heap_buf.resize(len), heap_buf.data());
      for (i64 t = 0; t < len; ++t) buf[t] = base[t * inner];
      out[lane] = sum_ascending(buf, len);
    } else {
      double s = 0.0;
      for (i64 t = 0; t < len; ++t) s += base[t * inner];
      out[lane] = s;
    }
  }
}

void broadcast_axis_acc(double* dx, const double* dy, i64 outer, i64 len,
                        i64 inner, double scale, bool parallel) {
  const i64 lanes = outer * inner;
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 lane = 0; lane < lanes; ++lane) {
    const i64 o = lane / inner;
    const i64 i = lane % inner;
    const double g = dy[lane] * scale;
    double* base = dx + o * len * inner + i;
    for (i64 t = 0; t < len; ++t) base[t * inner] += g;
  }
}

bool softmax_axis(double* out, const double* in, i64 outer, i64 len, i64 inner,
                  bool value_ordered, bool parallel) {
  const i64 lanes = outer * inner;
  std::atomic<bool> ok{true};
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 lane = 0; lane < lanes; ++lane) {
    const i64 o = lane / inner;
    const i64 i = lane % inner;
    const double* src = in + o * len * inner + i;
    double* dst = out + o * len * inner + i;
    double mx = -std::numeric_limits<double>::infinity();
    for (i64 t = 0; t < len; ++t) mx = std::max(mx, src[t * inner]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      ok.store(false);
      continue;
    }
    double denom;
    if (value_ordered) {
      std::vector<double> heap_buf;
      double stack_buf[32];
      double* buf =
          len <= 32 ? stack_buf : (heap_buf.resize(len), heap_buf.data());
      for (i64 t = 0; t < len; ++t) {
        buf[t] = std::exp(src[t * inner] - mx);
        dst[t * inner] = buf[t];
      }
      denom = sum_ascending(buf, len);
    } else {
      denom = 0.0;
      for (i64 t = 0; t < len; ++t) {
        const double e = std::exp(src[t * inner] - mx);
        dst[t * inner] = e;
        denom += e;
      }
    }
    const double inv = 1.0 / denom;
    for (i64 t = 0; t < len; ++t) dst[t * inner] *= inv;
  }
  return ok.load();
}

void softmax_backward_axis(double* dx, const double* y, const double* dy,
                           i64 outer, i64 len, i64 inner, bool parallel) {
  const i64 lanes = outer * inner;
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 lane = 0; lane < lanes; ++lane) {
    const i64 o = lane / inner;
    const i64 i = lane % inner;
    const i64 base = o * len * inner + i;
    double dot = 0.0;
    for (i64 t = 0; t < len; ++t) dot += dy[base + t * inner] * y[base + t * inner];
    for (i64 t = 0; t < len; ++t) {
      const i64 p = base + t * inner;
      dx[p] += y[p] * (dy[p] - dot);
    }
  }
}

void rowstd_forward(double* out, double* mean, double* rstd, const double* x,
                    i64 rows, i64 d, double eps, const double* gamma,
                    const double* beta, bool parallel) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double* yr = out + r * d;
    double mu = 0.0;
    for (i64 j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (i64 j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    if (gamma != nullptr) {
      for (i64 j = 0; j < d; ++j)
        yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
    } else {
      for (i64 j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs;
    }
  }
}

void rowstd_backward_dx(double* dx, const double* dy, const double* x,
                        const double* mean, const double* rstd,
                        const double* gamma, i64 rows, i64 d, bool parallel) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    const double* dyr = dy + r * d;
    double* dxr = dx + r * d;
    const double mu = mean[r];
    const double rs = rstd[r];
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (i64 j = 0; j < d; ++j) {
      const double g = gamma != nullptr ? dyr[j] * gamma[j] : dyr[j];
      const double xh = (xr[j] - mu) * rs;
      sum_g += g;
      sum_gx += g * xh;
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    for (i64 j = 0; j < d; ++j) {
      const double g = gamma != nullptr ? dyr[j] * gamma[j] : dyr[j];
      const double xh = (xr[j] - mu) * rs;
      dxr[j] += rs * (g - inv_d * sum_g - xh * inv_d * sum_gx);
    }
  }
}

void rowstd_backward_affine(double* dgamma, double* dbeta, const double* dy,
                            const double* x, const double* mean,
                            const double* rstd, i64 rows, i64 d,
                            bool parallel) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 j = 0; j < d; ++j) {
    double dg = 0.0;
    double db = 0.0;
    for (i64 r = 0; r < rows; ++r) {
      const double xh = (x[r * d + j] - mean[r]) * rstd[r];
      dg += dy[r * d + j] * xh;
      db += dy[r * d + j];
    }
    dgamma[j] += dg;
    dbeta[j] += db;
  }
}

void gather_rows(double* out, const double* table, const i64* ids, i64 n,
                 i64 d, bool parallel) {
#pragma omp parallel for schedule(static) if (parallel)
  for (i64 i = 0; i < n; ++i)
    std::memcpy(out + i * d, table + ids[i] * d, sizeof(double) * d);
}

void scatter_rows_acc(double* table, const double* grads, const i64* ids,
                      i64 n, i64 d) {
  for (i64 i = 0; i < n; ++i) {
    double* dst = table + ids[i] * d;
    const double* src = grads + i * d;
    for (i64 j = 0; j < d; ++j) dst[j] += src[j];
  }
}

}  // namespace minivlm::kernels
