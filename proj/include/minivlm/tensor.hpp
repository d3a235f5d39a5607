#pragma once

// Dense float64 tensors with reverse-mode gradients. The op set is exactly
// what the fusion module, the toy language model and the trainer need; shapes
// are row-major and every op validates its operands eagerly (errors carry
// both shapes). Execution is single-threaded at the graph level; the kernels
// underneath may run their data-parallel loops on OpenMP, bit-identically to
// the serial reference.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace minivlm {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

std::string shape_str(const Shape& s);
i64 shape_numel(const Shape& s);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;  // leaf accumulates gradient
  bool needs_grad = false;     // on a path to some requires_grad leaf
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  i64 numel() const { return static_cast<i64>(data.size()); }
  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Handle with shared ownership of the underlying node; copies alias.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  i64 numel() const { return node_->numel(); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  i64 dim(int d) const;

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  std::span<double> grad();              // allocates zeros on first use
  std::span<const double> grad() const;  // empty if never touched
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  double item() const;  // requires numel() == 1

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg);

  // Runs reverse-mode accumulation from this scalar. Leaf gradients
  // accumulate across calls; clear them with zero_grad.
  void backward() const;

  // Deep copy of values (no graph, keeps requires_grad flag).
  Tensor clone() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// While alive, ops do not record the graph (inference mode).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// ---- construction ----------------------------------------------------------

Tensor zeros(Shape shape, bool requires_grad = false);
Tensor full(Shape shape, double v, bool requires_grad = false);
Tensor ones(Shape shape, bool requires_grad = false);
Tensor scalar(double v);
Tensor from_vector(Shape shape, std::vector<double> values,
                   bool requires_grad = false);
Tensor randn(Shape shape, std::mt19937_64& rng, double mean, double stddev,
             bool requires_grad = false);
Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                    bool requires_grad = false);

// ---- ops -------------------------------------------------------------------

// a [.., m, k] x b [.., k, n] -> [.., m, n]; leading dims must match, or one
// operand may be 2-D and broadcasts over the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// Same contract, but each output element accumulates its k products in
// ascending value order (permutation-invariant contraction; small k only).
Tensor matmul_value_ordered(const Tensor& a, const Tensor& b);

// b.shape must equal a.shape or a trailing suffix of it.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

Tensor sigmoid(const Tensor& x);  // output clamped into the open (0,1)
Tensor gelu(const Tensor& x);     // tanh approximation

Tensor softmax(const Tensor& x, int axis, bool value_ordered = false);

// Per-row (last axis) standardization with affine parameters.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// Per-row standardization without affine parameters.
Tensor standardize(const Tensor& x, double eps);

Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis, bool value_ordered = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int dim0, int dim1);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Contiguous slice along one axis.
Tensor narrow(const Tensor& x, int axis, i64 start, i64 len);

// Mean negative log-softmax over rows where mask is true. Targets of masked
// rows are ignored; unmasked targets must lie in [0, V).
Tensor cross_entropy(const Tensor& logits, const std::vector<i64>& targets,
                     const std::vector<char>& mask);

// Two-table row lookup: ids < split read table_a[id], ids >= split read
// table_b[id - split]. Gradients scatter into whichever tables require them.
Tensor lookup_rows(const Tensor& table_a, const Tensor& table_b, i64 split,
                   const std::vector<i64>& ids);

// Single-table row gather with scatter-add backward.
Tensor gather_rows(const Tensor& table, const std::vector<i64>& ids);

// x viewed as [rows, d]: replace rows[i] with v[i]; all other rows pass
// through unchanged. Gradient reaches both v and the untouched rows of x.
Tensor set_rows(const Tensor& x, const std::vector<i64>& rows,
                const Tensor& v);

namespace testing {
// Verification-harness hook: flips the sign of layer_norm's input gradient so
// the finite-difference suite can prove it catches a planted bug.
extern bool corrupt_layer_norm_backward;
}  // namespace testing

}  // namespace minivlm
