#include "minivlm/tensor.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "minivlm/kernels.hpp"

namespace minivlm {

namespace testing {
bool corrupt_layer_norm_backward = false;
}

namespace {

namespace ker = minivlm::kernels;

thread_local int g_no_grad_depth = 0;

using NodePtr = std::shared_ptr<detail::TensorNode>;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

NodePtr new_node(Shape shape) {
  auto n = std::make_shared<detail::TensorNode>();
  n->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  return n;
}

// Attaches parents + backward rule when the graph is being recorded and at
// least one input can receive gradients.
Tensor finish(NodePtr result, std::vector<Tensor> inputs,
              std::function<void(detail::TensorNode&)> backward) {
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor& t : inputs) needs = needs || t.node()->needs_grad;
  }
  if (needs) {
    result->needs_grad = true;
    result->parents.reserve(inputs.size());
    for (Tensor& t : inputs) result->parents.push_back(t.node());
    result->backward_fn = std::move(backward);
  }
  return Tensor(std::move(result));
}

int norm_axis(int axis, int ndim, const char* op) {
  int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim)
    fail(std::string(op) + ": axis " + std::to_string(axis) +
         " out of range for rank " + std::to_string(ndim));
  return a;
}

// (outer, len, inner) decomposition around one axis.
struct AxisSplit {
  i64 outer = 1, len = 1, inner = 1;
};
AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int d = 0; d < axis; ++d) r.outer *= s[d];
  r.len = s[axis];
  for (size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

struct MatmulDims {
  i64 batch, m, k, n;
  i64 a_stride, b_stride;  // 0 when that operand broadcasts over the batch
  Shape out_shape;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() >= 2 && sb.size() >= 2,
          std::string(op) + ": operands must be at least 2-D, got " +
              shape_str(sa) + " x " + shape_str(sb));
  MatmulDims d;
  d.m = sa[sa.size() - 2];
  d.k = sa[sa.size() - 1];
  const i64 kb = sb[sb.size() - 2];
  d.n = sb[sb.size() - 1];
  require(d.k == kb, std::string(op) + ": inner dimensions disagree, " +
                         shape_str(sa) + " x " + shape_str(sb));
  Shape la(sa.begin(), sa.end() - 2);
  Shape lb(sb.begin(), sb.end() - 2);
  if (la == lb) {
    d.batch = shape_numel(la);
    d.a_stride = d.m * d.k;
    d.b_stride = d.k * d.n;
    d.out_shape = la;
  } else if (lb.empty()) {
    d.batch = shape_numel(la);
    d.a_stride = d.m * d.k;
    d.b_stride = 0;
    d.out_shape = la;
  } else if (la.empty()) {
    d.batch = shape_numel(lb);
    d.a_stride = 0;
    d.b_stride = d.k * d.n;
    d.out_shape = lb;
  } else {
    fail(std::string(op) + ": leading dimensions not broadcast-compatible, " +
         shape_str(sa) + " x " + shape_str(sb));
  }
  d.out_shape.push_back(d.m);
  d.out_shape.push_back(d.n);
  return d;
}

// dC [batch,m,n] against A [.,m,k], B [.,k,n]; accumulates into grads.
void matmul_backward_impl(detail::TensorNode& self, const MatmulDims& dims) {
  auto& a = *self.parents[0];
  auto& b = *self.parents[1];
  const double* dc = self.grad.data();
  const i64 batch = dims.batch, m = dims.m, k = dims.k, n = dims.n;
  if (a.needs_grad || a.requires_grad) {
    a.ensure_grad();
    // dA = dC * B^T, batch by batch with a materialized transpose. When A
    // broadcasts, contributions accumulate serially over the batch.
    std::vector<double> bt(static_cast<size_t>(k) * n);
    for (i64 bi = 0; bi < batch; ++bi) {
      if (bi == 0 || dims.b_stride != 0)
        ker::transpose2d(bt.data(), b.data.data() + bi * dims.b_stride, k, n,
                         ker::use_parallel(k * n));
      double* da = a.grad.data() + bi * dims.a_stride;
      ker::matmul(da, dc + bi * m * n, bt.data(), 1, m, n, k, 0, 0, true,
                  ker::use_parallel(m * n * k));
    }
  }
  if (b.needs_grad || b.requires_grad) {
    b.ensure_grad();
    std::vector<double> at(static_cast<size_t>(m) * k);
    for (i64 bi = 0; bi < batch; ++bi) {
      if (bi == 0 || dims.a_stride != 0)
        ker::transpose2d(at.data(), a.data.data() + bi * dims.a_stride, m, k,
                         ker::use_parallel(m * k));
      double* db = b.grad.data() + bi * dims.b_stride;
      ker::matmul(db, at.data(), dc + bi * m * n, 1, k, m, n, 0, 0, true,
                  ker::use_parallel(k * m * n));
    }
  }
}

Tensor matmul_common(const Tensor& a, const Tensor& b, bool value_ordered) {
  const char* op = value_ordered ? "matmul_value_ordered" : "matmul";
  MatmulDims dims = matmul_dims(a, b, op);
  NodePtr out = new_node(dims.out_shape);
  const bool par = ker::use_parallel(dims.batch * dims.m * dims.k * dims.n);
  if (value_ordered) {
    ker::matmul_value_ordered(out->data.data(), a.data().data(),
                              b.data().data(), dims.batch, dims.m, dims.k,
                              dims.n, dims.a_stride, dims.b_stride, par);
  } else {
    ker::matmul(out->data.data(), a.data().data(), b.data().data(), dims.batch,
                dims.m, dims.k, dims.n, dims.a_stride, dims.b_stride, false,
                par);
  }
  return finish(std::move(out), {a, b}, [dims](detail::TensorNode& self) {
    matmul_backward_impl(self, dims);
  });
}

// b broadcast as a trailing suffix of a (or exact same shape).
i64 suffix_len(const Shape& a, const Shape& b, const char* op) {
  require(!b.empty() && b.size() <= a.size() &&
              std::equal(b.begin(), b.end(), a.end() - b.size()),
          std::string(op) + ": shape " + shape_str(b) +
              " is not a trailing suffix of " + shape_str(a));
  return shape_numel(b);
}

// Reduce dy over the broadcast leading dims of b and accumulate.
void reduce_suffix_acc(detail::TensorNode& b, const double* dy, i64 n,
                       double sign) {
  b.ensure_grad();
  const i64 nb = b.numel();
  const i64 reps = n / nb;
  // lane j sums dy[t*nb + j] over t, serial in t: deterministic.
  std::vector<double> tmp(static_cast<size_t>(nb));
  ker::sum_axis(tmp.data(), dy, 1, reps, nb, false, ker::use_parallel(n));
  for (i64 j = 0; j < nb; ++j) b.grad[j] += sign * tmp[j];
}

template <class F, class DF>
Tensor binary_suffix_op(const Tensor& a, const Tensor& b, const char* op, F f,
                        DF backward) {
  const i64 nb = suffix_len(a.shape(), b.shape(), op);
  NodePtr out = new_node(a.shape());
  const i64 n = a.numel();
  if (nb == n) {
    ker::map2(out->data.data(), a.data().data(), b.data().data(), n,
              ker::use_parallel(n), f);
  } else {
    ker::map2_suffix(out->data.data(), a.data().data(), b.data().data(), n, nb,
                     ker::use_parallel(n), f);
  }
  return finish(std::move(out), {a, b}, std::move(backward));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) {
    if (d <= 0) fail("shape " + shape_str(s) + " has a non-positive extent");
    n *= d;
  }
  return n;
}

i64 Tensor::dim(int d) const {
  const int nd = ndim();
  int a = d < 0 ? d + nd : d;
  require(a >= 0 && a < nd, "dim " + std::to_string(d) +
                                " out of range for shape " + shape_str(shape()));
  return node_->shape[a];
}

std::span<double> Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  require(numel() == 1,
          "item(): tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
  require(node_->is_leaf(), "requires_grad can only be set on leaf tensors");
  node_->requires_grad = rg;
  node_->needs_grad = rg;
  return *this;
}

Tensor Tensor::clone() const {
  NodePtr n = new_node(node_->shape);
  n->data = node_->data;
  n->requires_grad = node_->requires_grad;
  n->needs_grad = node_->requires_grad;
  return Tensor(std::move(n));
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

void Tensor::backward() const {
  require(numel() == 1,
          "backward(): loss must be scalar, got " + shape_str(shape()));
  // Iterative post-order DFS: children before consumers.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited;
  struct Frame {
    detail::TensorNode* node;
    size_t next_parent;
  };
  std::vector<Frame> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::TensorNode* p = f.node->parents[f.next_parent++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  // Intermediate gradients are transient per pass; leaves accumulate.
  for (detail::TensorNode* n : order) {
    if (!n->is_leaf())
      n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---- construction ----------------------------------------------------------

Tensor zeros(Shape shape, bool requires_grad) {
  NodePtr n = new_node(std::move(shape));
  Tensor t(std::move(n));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor scalar(double v) { return full({1}, v); }

Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
  require(shape_numel(shape) == static_cast<i64>(values.size()),
          "from_vector: " + std::to_string(values.size()) +
              " values do not fill shape " + shape_str(shape));
  NodePtr n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  Tensor t(std::move(n));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor randn(Shape shape, std::mt19937_64& rng, double mean, double stddev,
             bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                    bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  return matmul_common(a, b, false);
}

Tensor matmul_value_ordered(const Tensor& a, const Tensor& b) {
  return matmul_common(a, b, true);
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_suffix_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](detail::TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.needs_grad || pa.requires_grad) {
          pa.ensure_grad();
          ker::accumulate(pa.grad.data(), self.grad.data(), self.numel(),
                          ker::use_parallel(self.numel()));
        }
        if (pb.needs_grad || pb.requires_grad)
          reduce_suffix_acc(pb, self.grad.data(), self.numel(), 1.0);
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_suffix_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](detail::TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.needs_grad || pa.requires_grad) {
          pa.ensure_grad();
          ker::accumulate(pa.grad.data(), self.grad.data(), self.numel(),
                          ker::use_parallel(self.numel()));
        }
        if (pb.needs_grad || pb.requires_grad)
          reduce_suffix_acc(pb, self.grad.data(), self.numel(), -1.0);
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_suffix_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](detail::TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const i64 n = self.numel();
        const i64 nb = pb.numel();
        if (pa.needs_grad || pa.requires_grad) {
          pa.ensure_grad();
          double* da = pa.grad.data();
          const double* dy = self.grad.data();
          const double* bd = pb.data.data();
#pragma omp parallel for schedule(static) if (ker::use_parallel(n))
          for (i64 i = 0; i < n; ++i) da[i] += dy[i] * bd[i % nb];
        }
        if (pb.needs_grad || pb.requires_grad) {
          std::vector<double> prod(static_cast<size_t>(n));
          ker::map2(prod.data(), self.grad.data(), pa.data.data(), n,
                    ker::use_parallel(n), [](double g, double x) { return g * x; });
          reduce_suffix_acc(pb, prod.data(), n, 1.0);
        }
      });
}

Tensor scale(const Tensor& a, double c) {
  NodePtr out = new_node(a.shape());
  ker::map1(out->data.data(), a.data().data(), a.numel(),
            ker::use_parallel(a.numel()), [c](double x) { return x * c; });
  return finish(std::move(out), {a}, [c](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    double* da = pa.grad.data();
    const double* dy = self.grad.data();
    const i64 n = self.numel();
#pragma omp parallel for schedule(static) if (ker::use_parallel(n))
    for (i64 i = 0; i < n; ++i) da[i] += c * dy[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  NodePtr out = new_node(x.shape());
  // Clamp into the open unit interval so saturated gates stay strictly
  // inside (0,1) even where exp underflows.
  const double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  ker::map1(out->data.data(), x.data().data(), x.numel(),
            ker::use_parallel(x.numel()), [lo, hi](double v) {
              double y;
              if (v >= 0.0) {
                y = 1.0 / (1.0 + std::exp(-v));
              } else {
                const double e = std::exp(v);
                y = e / (1.0 + e);
              }
              return std::min(hi, std::max(lo, y));
            });
  return finish(std::move(out), {x}, [](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    const i64 n = self.numel();
    double* da = pa.grad.data();
    const double* y = self.data.data();
    const double* dy = self.grad.data();
#pragma omp parallel for schedule(static) if (ker::use_parallel(n))
    for (i64 i = 0; i < n; ++i) da[i] += dy[i] * y[i] * (1.0 - y[i]);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  NodePtr out = new_node(x.shape());
  ker::map1(out->data.data(), x.data().data(), x.numel(),
            ker::use_parallel(x.numel()), [](double v) {
              const double u = kGeluC * (v + kGeluA * v * v * v);
              return 0.5 * v * (1.0 + std::tanh(u));
            });
  return finish(std::move(out), {x}, [](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    const i64 n = self.numel();
    double* da = pa.grad.data();
    const double* xd = pa.data.data();
    const double* dy = self.grad.data();
#pragma omp parallel for schedule(static) if (ker::use_parallel(n))
    for (i64 i = 0; i < n; ++i) {
      const double v = xd[i];
      const double u = kGeluC * (v + kGeluA * v * v * v);
      const double t = std::tanh(u);
      const double sech2 = 1.0 - t * t;
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      da[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
    }
  });
}

Tensor softmax(const Tensor& x, int axis, bool value_ordered) {
  const int a = norm_axis(axis, x.ndim(), "softmax");
  const AxisSplit sp = split_axis(x.shape(), a);
  NodePtr out = new_node(x.shape());
  const bool ok = ker::softmax_axis(out->data.data(), x.data().data(), sp.outer,
                                    sp.len, sp.inner, value_ordered,
                                    ker::use_parallel(x.numel()));
  if (!ok)
    throw std::runtime_error(
        "softmax: a lane along axis " + std::to_string(axis) +
        " is fully masked (all -inf) in tensor of shape " + shape_str(x.shape()));
  return finish(std::move(out), {x}, [sp](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    ker::softmax_backward_axis(pa.grad.data(), self.data.data(),
                               self.grad.data(), sp.outer, sp.len, sp.inner,
                               ker::use_parallel(self.numel()));
  });
}

namespace {

Tensor rowstd_common(const Tensor& x, const Tensor* gamma, const Tensor* beta,
                     double eps, const char* op) {
  require(x.ndim() >= 1, std::string(op) + ": input must have rank >= 1");
  const i64 d = x.dim(-1);
  require(d >= 2, std::string(op) + ": last dimension must be >= 2, got shape " +
                      shape_str(x.shape()));
  require(eps > 0.0, std::string(op) + ": eps must be positive");
  if (gamma != nullptr) {
    require(gamma->ndim() == 1 && gamma->dim(0) == d &&
                beta->ndim() == 1 && beta->dim(0) == d,
            std::string(op) + ": gamma/beta " + shape_str(gamma->shape()) + "/" +
                shape_str(beta->shape()) + " do not match feature size " +
                std::to_string(d));
  }
  const i64 rows = x.numel() / d;
  NodePtr out = new_node(x.shape());
  auto mean = std::make_shared<std::vector<double>>(rows);
  auto rstd = std::make_shared<std::vector<double>>(rows);
  ker::rowstd_forward(out->data.data(), mean->data(), rstd->data(),
                      x.data().data(), rows, d, eps,
                      gamma ? gamma->data().data() : nullptr,
                      beta ? beta->data().data() : nullptr,
                      ker::use_parallel(x.numel()));
  std::vector<Tensor> inputs{x};
  if (gamma != nullptr) {
    inputs.push_back(*gamma);
    inputs.push_back(*beta);
  }
  const bool affine = gamma != nullptr;
  auto backward = [mean, rstd, rows, d, affine](detail::TensorNode& self) {
    auto& px = *self.parents[0];
    const double* g = affine ? self.parents[1]->data.data() : nullptr;
    if (px.needs_grad || px.requires_grad) {
      px.ensure_grad();
      if (minivlm::testing::corrupt_layer_norm_backward) {
        std::vector<double> tmp(px.data.size(), 0.0);
        ker::rowstd_backward_dx(tmp.data(), self.grad.data(), px.data.data(),
                                mean->data(), rstd->data(), g, rows, d,
                                ker::use_parallel(self.numel()));
        for (size_t i = 0; i < tmp.size(); ++i) px.grad[i] -= tmp[i];
      } else {
        ker::rowstd_backward_dx(px.grad.data(), self.grad.data(), px.data.data(),
                                mean->data(), rstd->data(), g, rows, d,
                                ker::use_parallel(self.numel()));
      }
    }
    if (affine) {
      auto& pg = *self.parents[1];
      auto& pb = *self.parents[2];
      if (pg.needs_grad || pg.requires_grad || pb.needs_grad ||
          pb.requires_grad) {
        pg.ensure_grad();
        pb.ensure_grad();
        ker::rowstd_backward_affine(pg.grad.data(), pb.grad.data(),
                                    self.grad.data(), px.data.data(),
                                    mean->data(), rstd->data(), rows, d,
                                    ker::use_parallel(self.numel()));
      }
    }
  };
  return finish(std::move(out), std::move(inputs), std::move(backward));
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  return rowstd_common(x, &gamma, &beta, eps, "layer_norm");
}

Tensor standardize(const Tensor& x, double eps) {
  return rowstd_common(x, nullptr, nullptr, eps, "standardize");
}

namespace {

Tensor reduce_axis(const Tensor& x, int axis, bool is_mean, bool value_ordered,
                   const char* op) {
  const int a = norm_axis(axis, x.ndim(), op);
  const AxisSplit sp = split_axis(x.shape(), a);
  Shape out_shape;
  for (int d = 0; d < x.ndim(); ++d)
    if (d != a) out_shape.push_back(x.shape()[d]);
  if (out_shape.empty()) out_shape.push_back(1);
  NodePtr out = new_node(out_shape);
  ker::sum_axis(out->data.data(), x.data().data(), sp.outer, sp.len, sp.inner,
                value_ordered, ker::use_parallel(x.numel()));
  const double fwd_scale = is_mean ? 1.0 / static_cast<double>(sp.len) : 1.0;
  if (is_mean) {
    for (double& v : out->data) v *= fwd_scale;
  }
  return finish(std::move(out), {x}, [sp, fwd_scale](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    ker::broadcast_axis_acc(pa.grad.data(), self.grad.data(), sp.outer, sp.len,
                            sp.inner, fwd_scale, ker::use_parallel(pa.numel()));
  });
}

}  // namespace

Tensor sum(const Tensor& x, int axis) {
  return reduce_axis(x, axis, false, false, "sum");
}

Tensor mean(const Tensor& x, int axis, bool value_ordered) {
  return reduce_axis(x, axis, true, value_ordered, "mean");
}

Tensor sum_all(const Tensor& x) {
  NodePtr out = new_node({1});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out->data[0] = s;
  return finish(std::move(out), {x}, [](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    const double g = self.grad[0];
    for (double& v : pa.grad) v += g;
  });
}

Tensor mean_all(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  NodePtr out = new_node({1});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out->data[0] = s * inv;
  return finish(std::move(out), {x}, [inv](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    const double g = self.grad[0] * inv;
    for (double& v : pa.grad) v += g;
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " +
              shape_str(shape));
  NodePtr out = new_node(shape);
  std::memcpy(out->data.data(), x.data().data(),
              sizeof(double) * static_cast<size_t>(x.numel()));
  return finish(std::move(out), {x}, [](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    ker::accumulate(pa.grad.data(), self.grad.data(), self.numel(),
                    ker::use_parallel(self.numel()));
  });
}

Tensor transpose(const Tensor& x, int dim0, int dim1) {
  const int a = norm_axis(dim0, x.ndim(), "transpose");
  const int b = norm_axis(dim1, x.ndim(), "transpose");
  Shape out_shape = x.shape();
  std::swap(out_shape[a], out_shape[b]);
  NodePtr out = new_node(out_shape);
  ker::swap_axes_copy(out->data.data(), x.data().data(), x.shape(), a, b,
                      ker::use_parallel(x.numel()));
  const Shape in_shape = x.shape();
  return finish(std::move(out), {x}, [a, b, out_shape](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    std::vector<double> tmp(pa.data.size());
    ker::swap_axes_copy(tmp.data(), self.grad.data(), out_shape, a, b,
                        ker::use_parallel(self.numel()));
    ker::accumulate(pa.grad.data(), tmp.data(), pa.numel(),
                    ker::use_parallel(pa.numel()));
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const int a = norm_axis(axis, parts[0].ndim(), "concat");
  Shape out_shape = parts[0].shape();
  i64 total = 0;
  for (const Tensor& p : parts) {
    require(p.ndim() == parts[0].ndim(), "concat: rank mismatch, " +
                                             shape_str(p.shape()) + " vs " +
                                             shape_str(parts[0].shape()));
    for (int d = 0; d < p.ndim(); ++d) {
      if (d == a) continue;
      require(p.shape()[d] == parts[0].shape()[d],
              "concat: shape mismatch off axis, " + shape_str(p.shape()) +
                  " vs " + shape_str(parts[0].shape()));
    }
    total += p.shape()[a];
  }
  out_shape[a] = total;
  const AxisSplit sp = split_axis(out_shape, a);
  NodePtr out = new_node(out_shape);
  std::vector<i64> lens;
  i64 off = 0;
  for (const Tensor& p : parts) {
    const i64 len = p.shape()[a];
    lens.push_back(len);
    for (i64 o = 0; o < sp.outer; ++o) {
      std::memcpy(out->data.data() + (o * sp.len + off) * sp.inner,
                  p.data().data() + o * len * sp.inner,
                  sizeof(double) * static_cast<size_t>(len * sp.inner));
    }
    off += len;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return finish(std::move(out), std::move(inputs),
                [sp, lens](detail::TensorNode& self) {
                  i64 off = 0;
                  for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                    auto& p = *self.parents[pi];
                    const i64 len = lens[pi];
                    if (p.needs_grad || p.requires_grad) {
                      p.ensure_grad();
                      for (i64 o = 0; o < sp.outer; ++o) {
                        const double* src =
                            self.grad.data() + (o * sp.len + off) * sp.inner;
                        double* dst = p.grad.data() + o * len * sp.inner;
                        for (i64 t = 0; t < len * sp.inner; ++t) dst[t] += src[t];
                      }
                    }
                    off += len;
                  }
                });
}

Tensor narrow(const Tensor& x, int axis, i64 start, i64 len) {
  const int a = norm_axis(axis, x.ndim(), "narrow");
  require(start >= 0 && len > 0 && start + len <= x.shape()[a],
          "narrow: range [" + std::to_string(start) + "," +
              std::to_string(start + len) + ") out of bounds for axis " +
              std::to_string(axis) + " of " + shape_str(x.shape()));
  const AxisSplit sp = split_axis(x.shape(), a);
  Shape out_shape = x.shape();
  out_shape[a] = len;
  NodePtr out = new_node(out_shape);
  for (i64 o = 0; o < sp.outer; ++o) {
    std::memcpy(out->data.data() + o * len * sp.inner,
                x.data().data() + (o * sp.len + start) * sp.inner,
                sizeof(double) * static_cast<size_t>(len * sp.inner));
  }
  return finish(std::move(out), {x}, [sp, start, len](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    if (!(pa.needs_grad || pa.requires_grad)) return;
    pa.ensure_grad();
    for (i64 o = 0; o < sp.outer; ++o) {
      const double* src = self.grad.data() + o * len * sp.inner;
      double* dst = pa.grad.data() + (o * sp.len + start) * sp.inner;
      for (i64 t = 0; t < len * sp.inner; ++t) dst[t] += src[t];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<i64>& targets,
                     const std::vector<char>& mask) {
  require(logits.ndim() == 2, "cross_entropy: logits must be [n, vocab], got " +
                                  shape_str(logits.shape()));
  const i64 n = logits.dim(0);
  const i64 v = logits.dim(1);
  require(static_cast<i64>(targets.size()) == n &&
              static_cast<i64>(mask.size()) == n,
          "cross_entropy: got " + std::to_string(targets.size()) +
              " targets and " + std::to_string(mask.size()) + " mask entries for " +
              std::to_string(n) + " rows");
  i64 active = 0;
  for (i64 i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++active;
    require(targets[i] >= 0 && targets[i] < v,
            "cross_entropy: target " + std::to_string(targets[i]) + " at row " +
                std::to_string(i) + " outside [0," + std::to_string(v) + ")");
  }
  if (active == 0)
    throw std::invalid_argument("cross_entropy: every position is masked out");

  auto lse = std::make_shared<std::vector<double>>(n, 0.0);
  const double* x = logits.data().data();
  const bool par = ker::use_parallel(n * v);
  double* lse_p = lse->data();
  const char* mk = mask.data();
#pragma omp parallel for schedule(static) if (par)
  for (i64 i = 0; i < n; ++i) {
    if (!mk[i]) continue;
    const double* row = x + i * v;
    double mx = row[0];
    for (i64 j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (i64 j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    lse_p[i] = mx + std::log(s);
  }
  double total = 0.0;
  for (i64 i = 0; i < n; ++i)
    if (mask[i]) total += (*lse)[i] - x[i * v + targets[i]];
  NodePtr out = new_node({1});
  out->data[0] = total / static_cast<double>(active);

  auto tgt = std::make_shared<std::vector<i64>>(targets);
  auto msk = std::make_shared<std::vector<char>>(mask);
  return finish(std::move(out), {logits},
                [lse, tgt, msk, n, v, active](detail::TensorNode& self) {
                  auto& pa = *self.parents[0];
                  if (!(pa.needs_grad || pa.requires_grad)) return;
                  pa.ensure_grad();
                  const double g = self.grad[0] / static_cast<double>(active);
                  const double* x = pa.data.data();
                  double* dx = pa.grad.data();
                  const char* mk = msk->data();
                  const i64* tg = tgt->data();
                  const double* lse_p = lse->data();
#pragma omp parallel for schedule(static) if (ker::use_parallel(n* v))
                  for (i64 i = 0; i < n; ++i) {
                    if (!mk[i]) continue;
                    const double* row = x + i * v;
                    double* drow = dx + i * v;
                    for (i64 j = 0; j < v; ++j) {
                      double p = std::exp(row[j] - lse_p[i]);
                      if (j == tg[i]) p -= 1.0;
                      drow[j] += g * p;
                    }
                  }
                });
}

namespace {

Tensor lookup_common(const Tensor& table_a, const Tensor* table_b, i64 split,
                     const std::vector<i64>& ids) {
  require(table_a.ndim() == 2, "lookup: table must be 2-D, got " +
                                   shape_str(table_a.shape()));
  const i64 d = table_a.dim(1);
  const i64 limit =
      table_b ? split + table_b->dim(0) : table_a.dim(0);
  if (table_b) {
    require(table_b->ndim() == 2 && table_b->dim(1) == d,
            "lookup: tables disagree, " + shape_str(table_a.shape()) + " vs " +
                shape_str(table_b->shape()));
    require(split == table_a.dim(0), "lookup: split must equal first table rows");
  }
  const i64 n = static_cast<i64>(ids.size());
  NodePtr out = new_node({n, d});
  for (i64 i = 0; i < n; ++i) {
    const i64 id = ids[i];
    require(id >= 0 && id < limit, "lookup: id " + std::to_string(id) +
                                       " outside [0," + std::to_string(limit) + ")");
    const double* src = (table_b && id >= split)
                            ? table_b->data().data() + (id - split) * d
                            : table_a.data().data() + id * d;
    std::memcpy(out->data.data() + i * d, src,
                sizeof(double) * static_cast<size_t>(d));
  }
  auto ids_keep = std::make_shared<std::vector<i64>>(ids);
  std::vector<Tensor> inputs{table_a};
  if (table_b) inputs.push_back(*table_b);
  const bool two = table_b != nullptr;
  return finish(std::move(out), std::move(inputs),
                [ids_keep, split, d, two](detail::TensorNode& self) {
                  auto& pa = *self.parents[0];
                  detail::TensorNode* pb = two ? self.parents[1].get() : nullptr;
                  const bool want_a = pa.needs_grad || pa.requires_grad;
                  const bool want_b =
                      pb != nullptr && (pb->needs_grad || pb->requires_grad);
                  if (want_a) pa.ensure_grad();
                  if (want_b) pb->ensure_grad();
                  if (!want_a && !want_b) return;
                  const auto& ids = *ids_keep;
                  for (size_t i = 0; i < ids.size(); ++i) {
                    const i64 id = ids[i];
                    const double* g = self.grad.data() + i * d;
                    if (pb != nullptr && id >= split) {
                      if (!want_b) continue;
                      double* dst = pb->grad.data() + (id - split) * d;
                      for (i64 j = 0; j < d; ++j) dst[j] += g[j];
                    } else {
                      if (!want_a) continue;
                      double* dst = pa.grad.data() + id * d;
                      for (i64 j = 0; j < d; ++j) dst[j] += g[j];
                    }
                  }
                });
}

}  // namespace

Tensor lookup_rows(const Tensor& table_a, const Tensor& table_b, i64 split,
                   const std::vector<i64>& ids) {
  return lookup_common(table_a, &table_b, split, ids);
}

Tensor gather_rows(const Tensor& table, const std::vector<i64>& ids) {
  return lookup_common(table, nullptr, 0, ids);
}

Tensor set_rows(const Tensor& x, const std::vector<i64>& rows, const Tensor& v) {
  require(x.ndim() >= 2, "set_rows: input must be at least 2-D");
  const i64 d = x.dim(-1);
  const i64 nrows = x.numel() / d;
  require(v.ndim() == 2 && v.dim(1) == d &&
              v.dim(0) == static_cast<i64>(rows.size()),
          "set_rows: replacement " + shape_str(v.shape()) + " does not match " +
              std::to_string(rows.size()) + " rows of width " + std::to_string(d));
  for (i64 r : rows)
    require(r >= 0 && r < nrows, "set_rows: row " + std::to_string(r) +
                                     " outside [0," + std::to_string(nrows) + ")");
  NodePtr out = new_node(x.shape());
  out->data = std::vector<double>(x.data().begin(), x.data().end());
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out->data.data() + rows[i] * d, v.data().data() + i * d,
                sizeof(double) * static_cast<size_t>(d));
  auto rows_keep = std::make_shared<std::vector<i64>>(rows);
  return finish(std::move(out), {x, v}, [rows_keep, d](detail::TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pv = *self.parents[1];
    if (pv.needs_grad || pv.requires_grad) {
      pv.ensure_grad();
      for (size_t i = 0; i < rows_keep->size(); ++i) {
        const double* g = self.grad.data() + (*rows_keep)[i] * d;
        double* dst = pv.grad.data() + i * d;
        for (i64 j = 0; j < d; ++j) dst[j] += g[j];
      }
    }
    if (px.needs_grad || px.requires_grad) {
      px.ensure_grad();
      std::vector<double> tmp(self.grad);
      for (i64 r : *rows_keep)
        std::fill(tmp.begin() + r * d, tmp.begin() + (r + 1) * d, 0.0);
      ker::accumulate(px.grad.data(), tmp.data(), px.numel(),
                      ker::use_parallel(px.numel()));
    }
  });
}

}  // namespace minivlm
