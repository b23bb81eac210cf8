#include "mnvton/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "mnvton/errors.hpp"

namespace mnvton {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad, accumulates into parents' grads.
  std::function<void(Node& self)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
  static const NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_finite_check = false;

const NodePtr& node_of(const Tensor& t) {
  if (!t.defined()) throw ContractError("operation on an undefined tensor");
  return TensorAccess::node(t);
}

NodePtr make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

// Wraps an op result; attaches history only if some input needs it.
Tensor finish(const char* op, Shape shape, std::vector<double> value,
              std::initializer_list<const Tensor*> inputs,
              std::function<void(Node&)> backward) {
  auto n = make_node(std::move(shape), std::move(value));
  n->op = op;
  if (t_finite_check) {
    for (double v : n->value) {
      if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + op);
    }
  }
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || node_of(*t)->requires_grad;
    if (any) {
      n->requires_grad = true;
      for (const Tensor* t : inputs) n->parents.push_back(node_of(*t));
      n->backward = std::move(backward);
    }
  }
  return TensorAccess::wrap(std::move(n));
}

Tensor finish_many(const char* op, Shape shape, std::vector<double> value,
                   std::span<const Tensor> inputs, std::function<void(Node&)> backward) {
  auto n = make_node(std::move(shape), std::move(value));
  n->op = op;
  if (t_finite_check) {
    for (double v : n->value) {
      if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + op);
    }
  }
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || node_of(t)->requires_grad;
    if (any) {
      n->requires_grad = true;
      for (const Tensor& t : inputs) n->parents.push_back(node_of(t));
      n->backward = std::move(backward);
    }
  }
  return TensorAccess::wrap(std::move(n));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Parent grad buffer, or nullptr when that parent does not need one.
std::vector<double>* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

std::size_t row_length(const Tensor& row, std::size_t n, const char* op) {
  const std::size_t len = row.numel();
  const bool ok = (row.rank() == 1 || (row.rank() == 2 && row.dim(0) == 1)) && len == n;
  if (!ok) {
    throw DimensionError(std::string(op) + ": row vector " + shape_str(row.shape()) +
                         " does not match width " + std::to_string(n));
  }
  return len;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = mnvton::numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (mnvton::numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                         std::to_string(mnvton::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return node_of(*this)->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this)->value.size(); }

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  return s.empty() ? 1 : s.back();
}

std::size_t Tensor::rows() const {
  const std::size_t c = cols();
  return c == 0 ? 0 : numel() / c;
}

std::span<const double> Tensor::data() const { return node_of(*this)->value; }
std::span<double> Tensor::mutable_data() { return node_of(*this)->value; }
std::vector<double> Tensor::to_vector() const { return node_of(*this)->value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor of shape " + shape_str(shape()));
  return data()[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (r >= rows() || c >= cols()) throw IndexError("at(): index out of range");
  return data()[r * cols() + c];
}

bool Tensor::requires_grad() const { return node_of(*this)->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  auto& n = node_of(*this);
  if (n->backward) throw ContractError("set_requires_grad on a non-leaf tensor");
  n->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return !node_of(*this)->grad.empty(); }

std::span<const double> Tensor::grad() const {
  auto& n = node_of(*this);
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}

std::span<double> Tensor::mutable_grad() { return node_of(*this)->ensure_grad(); }

void Tensor::zero_grad() {
  auto& n = node_of(*this);
  std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto& n = node_of(*this);
  return Tensor(make_node(n->shape, n->value));
}

void Tensor::backward() const {
  GradTape tape(*this);
  tape.backward();
}

bool Tensor::all_finite() const {
  for (double v : data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

FiniteCheckGuard::FiniteCheckGuard() : previous_(t_finite_check) { t_finite_check = true; }
FiniteCheckGuard::~FiniteCheckGuard() { t_finite_check = previous_; }

bool grad_enabled() { return t_grad_enabled; }

// ---- GradTape --------------------------------------------------------------

GradTape::GradTape(const Tensor& loss) : root_(node_of(loss)) {
  if (root_->value.size() != 1) {
    throw ContractError("backward() needs a scalar, got shape " + shape_str(root_->shape));
  }
  if (!root_->requires_grad) return;
  // Iterative post-order DFS; parents are visited in recorded order so the
  // resulting order (and therefore grad accumulation order) is deterministic.
  std::vector<Node*> post;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root_.get(), 0);
  seen.insert(root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  order_.assign(post.rbegin(), post.rend());
}

std::vector<std::string> GradTape::op_names() const {
  std::vector<std::string> names;
  names.reserve(order_.size());
  for (const Node* n : order_) names.emplace_back(n->op);
  return names;
}

void GradTape::backward() {
  if (order_.empty()) return;
  root_->ensure_grad()[0] += 1.0;
  for (Node* n : order_) {
    if (n->backward) n->backward(*n);
  }
  // Interior grads are scratch; drop them so repeated sweeps over a retained
  // graph start clean.
  for (Node* n : order_) {
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return finish("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const Node& A = *self.parents[0];
    const Node& B = *self.parents[1];
    if (auto* ga = pgrad(self, 0)) gemm_nt(self.grad.data(), B.value.data(), ga->data(), m, n, k);
    if (auto* gb = pgrad(self, 1)) gemm_tn(A.value.data(), self.grad.data(), gb->data(), m, k, n);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return finish("matmul_nt", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const Node& A = *self.parents[0];
    const Node& B = *self.parents[1];
    // dA = dC * B ; dB = dC^T * A
    if (auto* ga = pgrad(self, 0)) gemm_nn(self.grad.data(), B.value.data(), ga->data(), m, n, k);
    if (auto* gb = pgrad(self, 1)) gemm_tn(self.grad.data(), A.value.data(), gb->data(), m, n, k);
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  return finish("transpose", {n, m}, std::move(out), {&a}, [m, n](Node& self) {
    if (auto* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += self.grad[j * m + i];
    }
  });
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return finish("add", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = pgrad(self, p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return finish("sub", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = pgrad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return finish("mul", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = pgrad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const std::size_t n = a.cols();
  row_length(row, n, "add_row");
  const std::size_t m = a.rows();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto rv = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  return finish("add_row", a.shape(), std::move(out), {&a, &row}, [m, n](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = pgrad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
  });
}

Tensor mul_row(const Tensor& a, const Tensor& row) {
  const std::size_t n = a.cols();
  row_length(row, n, "mul_row");
  const std::size_t m = a.rows();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto rv = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= rv[j];
  return finish("mul_row", a.shape(), std::move(out), {&a, &row}, [m, n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& rv = self.parents[1]->value;
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[i * n + j] * rv[j];
    if (auto* g = pgrad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j] * av[i * n + j];
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return finish("scale", a.shape(), std::move(out), {&a}, [s](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return finish("add_scalar", a.shape(), std::move(out), {&a}, [](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= v;
  return finish("square", a.shape(), std::move(out), {&a}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.0 * av[i] * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return finish("sum", {1}, {s}, {&a}, [](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (double& v : *g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  if (a.numel() == 0) throw ContractError("mean of an empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return finish("mean", {1}, {s / n}, {&a}, [n](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (double& v : *g) v += self.grad[0] / n;
  });
}

// ---- row-wise nonlinearities -------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t n = x.cols();
  if (n == 0) throw DimensionError("softmax_lastdim: last dimension must be >= 1");
  const std::size_t m = x.rows();
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i) {
    double* r = out.data() + i * n;
    const double mx = *std::max_element(r, r + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = std::exp(r[j] - mx);
      z += r[j];
    }
    for (std::size_t j = 0; j < n; ++j) r[j] /= z;
  }
  return finish("softmax", x.shape(), std::move(out), {&x}, [m, n](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.value.data() + i * n;
      const double* dy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      double* dx = g->data() + i * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, double eps) {
  const std::size_t n = x.cols();
  if (n == 0) throw DimensionError("layer_norm: empty channel dimension");
  const std::size_t m = x.rows();
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(m);
  const auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (r[j] - mu) * inv;
  }
  return finish("layer_norm", x.shape(), std::move(out), {&x},
                [m, n, inv_std = std::move(inv_std)](Node& self) {
                  auto* g = pgrad(self, 0);
                  if (!g) return;
                  const double nn = static_cast<double>(n);
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* y = self.value.data() + i * n;
                    const double* dy = self.grad.data() + i * n;
                    double mdy = 0.0, mdyy = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      mdy += dy[j];
                      mdyy += dy[j] * y[j];
                    }
                    mdy /= nn;
                    mdyy /= nn;
                    double* dx = g->data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) dx[j] += inv_std[i] * (dy[j] - mdy - y[j] * mdyy);
                  }
                });
}

Tensor gelu(const Tensor& x) {
  // tanh approximation
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v)));
  return finish("gelu", x.shape(), std::move(out), {&x}, [](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(k * (v + c * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * c * v * v);
      (*g)[i] += self.grad[i] * d;
    }
  });
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = v / (1.0 + std::exp(-v));
  return finish("silu", x.shape(), std::move(out), {&x}, [](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      (*g)[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

// ---- structural --------------------------------------------------------------

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: part widths differ, " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    offsets.push_back(m);
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return finish_many("concat_rows", {m, n}, std::move(out), parts,
                     [n, offsets = std::move(offsets)](Node& self) {
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         auto* g = pgrad(self, p);
                         if (!g) continue;
                         const double* src = self.grad.data() + offsets[p] * n;
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += src[i];
                       }
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_rows");
  if (begin > end || end > a.dim(0)) {
    throw IndexError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(1);
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  return finish("slice_rows", {end - begin, n}, std::move(out), {&a}, [begin, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      double* dst = g->data() + begin * n;
      for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: part heights differ, " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    const auto src = p.data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(src.data() + i * w, w, out.data() + i * n + off);
    off += w;
  }
  return finish_many("concat_cols", {m, n}, std::move(out), parts,
                     [m, n, widths = std::move(widths)](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         const std::size_t w = widths[p];
                         if (auto* g = pgrad(self, p)) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[i * n + off + j];
                         }
                         off += w;
                       }
                     });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_cols");
  if (begin > end || end > a.dim(1)) {
    throw IndexError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for " + shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1), w = end - begin;
  std::vector<double> out(m * w);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(src.data() + i * n + begin, w, out.data() + i * w);
  return finish("slice_cols", {m, w}, std::move(out), {&a}, [m, n, w, begin](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) (*g)[i * n + begin + j] += self.grad[i * w + j];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t v = table.dim(0), n = table.dim(1);
  std::vector<double> out(ids.size() * n);
  const auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(v) + " rows");
    }
    std::copy_n(src.data() + ids[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return finish("gather_rows", {ids.size(), n}, std::move(out), {&table},
                [n, idv = std::move(idv)](Node& self) {
                  if (auto* g = pgrad(self, 0)) {
                    for (std::size_t i = 0; i < idv.size(); ++i)
                      for (std::size_t j = 0; j < n; ++j) (*g)[idv[i] * n + j] += self.grad[i * n + j];
                  }
                });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (mnvton::numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return finish("reshape", std::move(shape), std::move(out), {&a}, [](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> index, Shape out_shape) {
  if (mnvton::numel(out_shape) != index.size()) {
    throw DimensionError("gather: index count " + std::to_string(index.size()) + " does not fill " +
                         shape_str(out_shape));
  }
  const auto src = a.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= src.size()) throw IndexError("gather: index out of range");
    out[i] = src[index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish("gather", std::move(out_shape), std::move(out), {&a}, [idx = std::move(idx)](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) (*g)[idx[i]] += self.grad[i];
  });
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  return mean(square(sub(prediction, target)));
}

// ---- gradient oracle ---------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> xs, double h) {
  for (Tensor& x : xs) {
    if (!x.requires_grad()) x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    const Tensor y = f();
    if (y.numel() != 1) throw ContractError("grad_check: f must return a scalar, got " + shape_str(y.shape()));
    y.backward();
  }
  double worst = 0.0;
  NoGradGuard no_grad;
  for (Tensor& x : xs) {
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    x.zero_grad();
    auto values = x.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double fp = f().item();
      values[i] = saved - h;
      const double fm = f().item();
      values[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  Tensor xs[] = {x};
  return grad_check([&] { return f(x); }, xs, h);
}

}  // namespace mnvton
