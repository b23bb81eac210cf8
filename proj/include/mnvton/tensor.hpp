#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mnvton {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// Dense row-major f64 array that records the operations producing it.
//
// A Tensor is a handle: copies share storage and graph node, the same way the
// blocks share parameter tensors with the optimizer. Use clone() or detach()
// for an independent copy. Ops build a graph only when at least one input
// requires grad and grad mode is enabled on the calling thread.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // Leading dimensions flattened; the last dimension is the row width.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Writable view. Only meant for leaves (parameters, grad-check probes);
  // mutating an interior node does not invalidate recorded backward rules.
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no history, independent storage.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  // Reverse-mode sweep from this scalar. Leaf grads accumulate across calls.
  void backward() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  bool all_finite() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct TensorAccess;
};

// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Makes every op on the current thread verify its output is finite and throw
// NumericalError naming the op otherwise.
class FiniteCheckGuard {
 public:
  FiniteCheckGuard();
  ~FiniteCheckGuard();
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Reverse topological order of the graph reachable from a scalar loss. Each
// node appears once; backward() replays it front to back.
class GradTape {
 public:
  explicit GradTape(const Tensor& loss);
  std::size_t size() const { return order_.size(); }
  std::vector<std::string> op_names() const;
  void backward();

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Broadcast a length-n vector (shape [n] or [1,n]) over the rows of a.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor mul_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, double eps);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
Tensor reshape(const Tensor& a, Shape shape);
// out[i] = a[index[i]]; backward scatters. Used for patchify and friends.
Tensor gather(const Tensor& a, std::span<const std::size_t> index, Shape out_shape);

Tensor mse_loss(const Tensor& prediction, const Tensor& target);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must return a one-element tensor; x must be a leaf. The probe's
// gradient is left zeroed.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

// Same, but perturbs every tensor in xs while f closes over them.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> xs, double h = 1e-5);

}  // namespace mnvton
