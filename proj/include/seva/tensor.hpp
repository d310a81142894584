#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 arrays.
//
// Shapes are 1-D ({n}) or 2-D ({rows, cols}); scalars are {1}. There is no
// broadcasting: every binary op requires identical shapes, except the named
// row-wise variants (add_rowwise) which take an explicit per-column vector.
// Each op records a node on the graph when any input requires a gradient;
// backward() walks that graph once in reverse topological order, accumulates
// gradients into leaves and then drops the recorded closures.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "seva/kernels.hpp"

namespace seva {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public Error {
public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : Error(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}
  ShapeError(const std::string& op, const std::string& what) : Error(op + ": " + what) {}
};

class NumericError : public Error {
public:
  using Error::Error;
};

class Tensor {
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    double* grad_buffer() {
      if (!requires_grad) return nullptr;
      if (grad.empty()) grad.assign(data.size(), 0.0);
      return grad.data();
    }
  };

public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("leaf", "empty shape");
    for (auto d : shape)
      if (d == 0) throw ShapeError("leaf", "zero-sized dimension in " + shape_str(shape));
    if (numel(shape) != data.size())
      throw ShapeError("leaf", "shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                                   " values, got " + std::to_string(data.size()));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return leaf({1}, {v}, requires_grad); }

  static Tensor zeros(Shape shape) {
    auto n = numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, 0.0));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t rows() const { return dim() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return node_->shape.back(); }
  std::span<const double> data() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  double item() const {
    if (size() != 1) throw ShapeError("item", "tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated yet.
  std::vector<double> grad() const {
    return node_->grad.empty() ? std::vector<double>(size(), 0.0) : node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  void backward() const;

  // Used by op implementations.
  static Tensor make(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                     std::function<void(Node&)> fn) {
    for (double v : data)
      if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->is_leaf = false;
    for (auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
    if (n->requires_grad) {
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node_);
      n->backward_fn = std::move(fn);
    }
    return Tensor(std::move(n));
  }

  // Gradient buffer of the i-th recorded parent, or nullptr when it needs none.
  static double* parent_grad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }
  static const std::vector<double>& parent_data(const Node& self, std::size_t i) { return self.parents[i]->data; }

private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

inline void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward", "loss must be scalar, got " + shape_str(shape()));
  if (!requires_grad()) throw Error("backward: loss does not depend on any tensor requiring grad");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->is_leaf) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad.clear();
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace detail {

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

inline void require_2d(const char* op, const Tensor& a) {
  if (a.dim() != 2) throw ShapeError(op, "expected a 2-D tensor, got " + shape_str(a.shape()));
}

template <class F, class D>
Tensor unary(const char* op, const Tensor& x, F f, D dfdx) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor::make(op, x.shape(), std::move(out), {x}, [dfdx](auto& self) {
    const auto& xd = Tensor::parent_data(self, 0);
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < xd.size(); ++i) g[i] += self.grad[i] * dfdx(xd[i], self.data[i]);
  });
}

}  // namespace detail

// C[m,n] = A[m,k] B[k,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d("matmul", a);
  detail::require_2d("matmul", b);
  if (a.shape()[1] != b.shape()[0]) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  kernels::matmul(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor::make("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    const auto& ad = Tensor::parent_data(self, 0);
    const auto& bd = Tensor::parent_data(self, 1);
    if (double* ga = Tensor::parent_grad(self, 0)) kernels::matmul_nt(self.grad.data(), bd.data(), ga, m, n, k);
    if (double* gb = Tensor::parent_grad(self, 1)) kernels::matmul_tn(ad.data(), self.grad.data(), gb, m, k, n);
  });
}

// C[m,n] = A[m,k] B[n,k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_2d("matmul_nt", a);
  detail::require_2d("matmul_nt", b);
  if (a.shape()[1] != b.shape()[1]) throw ShapeError("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<double> out(m * n, 0.0);
  kernels::matmul_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor::make("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    const auto& ad = Tensor::parent_data(self, 0);
    const auto& bd = Tensor::parent_data(self, 1);
    // dA = dC B, dB = dC^T A
    if (double* ga = Tensor::parent_grad(self, 0)) kernels::matmul(self.grad.data(), bd.data(), ga, m, n, k);
    if (double* gb = Tensor::parent_grad(self, 1)) kernels::matmul_tn(self.grad.data(), ad.data(), gb, m, n, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_2d("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return Tensor::make("transpose", {n, m}, std::move(out), {a}, [m, n](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make("add", a.shape(), std::move(out), {a, b}, [](auto& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = Tensor::parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make("sub", a.shape(), std::move(out), {a, b}, [](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = Tensor::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make("mul", a.shape(), std::move(out), {a, b}, [](auto& self) {
    const auto& ad = Tensor::parent_data(self, 0);
    const auto& bd = Tensor::parent_data(self, 1);
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < ad.size(); ++i) g[i] += self.grad[i] * bd[i];
    if (double* g = Tensor::parent_grad(self, 1))
      for (std::size_t i = 0; i < ad.size(); ++i) g[i] += self.grad[i] * ad[i];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// A[m,n] + b[n] added to every row.
inline Tensor add_rowwise(const Tensor& a, const Tensor& b) {
  detail::require_2d("add_rowwise", a);
  if (b.dim() != 1 || b.size() != a.cols()) throw ShapeError("add_rowwise", a.shape(), b.shape());
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + b[j];
  return Tensor::make("add_rowwise", a.shape(), std::move(out), {a, b}, [m, n](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    if (double* g = Tensor::parent_grad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
  });
}

namespace detail {

// Softmax-family ops normalize along the last axis.
inline std::pair<std::size_t, std::size_t> row_layout(const Tensor& a) { return {a.rows(), a.cols()}; }

}  // namespace detail

inline Tensor softmax(const Tensor& a) {
  auto [m, n] = detail::row_layout(a);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) kernels::softmax_row(a.data().data() + i * n, out.data() + i * n, n);
  return Tensor::make("softmax", a.shape(), std::move(out), {a}, [m, n](auto& self) {
    double* g = Tensor::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

// Row-wise softmax where row i only sees columns j <= max(i + offset,
// prefix - 1); masked entries come out as exactly zero. prefix > 0 gives a
// prefix-LM mask (bidirectional over the first `prefix` columns).
inline Tensor causal_softmax(const Tensor& a, std::size_t offset, std::size_t prefix = 0) {
  detail::require_2d("causal_softmax", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (m + offset > n || prefix > n)
    throw ShapeError("causal_softmax", "offset " + std::to_string(offset) + " too large for " + shape_str(a.shape()));
  std::vector<double> out(a.size(), 0.0);
  for (std::size_t i = 0; i < m; ++i)
    kernels::softmax_row(a.data().data() + i * n, out.data() + i * n, std::max(i + offset + 1, prefix));
  return Tensor::make("causal_softmax", a.shape(), std::move(out), {a}, [m, n, offset, prefix](auto& self) {
    double* g = Tensor::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t len = std::max(i + offset + 1, prefix);
      const double* y = self.data.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < len; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

// Row-wise softmax over the entries where mask[i * n + j] is nonzero; the
// rest come out as exactly zero. Every row needs at least one open entry.
inline Tensor masked_softmax(const Tensor& a, std::shared_ptr<const std::vector<char>> mask) {
  detail::require_2d("masked_softmax", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (!mask || mask->size() != m * n) throw ShapeError("masked_softmax", "mask does not match " + shape_str(a.shape()));
  std::vector<double> out(a.size(), 0.0);
  std::vector<double> buf(n), prob(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t k = 0;
    for (std::size_t j = 0; j < n; ++j)
      if ((*mask)[i * n + j]) buf[k++] = a.data()[i * n + j];
    if (k == 0) throw ShapeError("masked_softmax", "row " + std::to_string(i) + " is fully masked");
    kernels::softmax_row(buf.data(), prob.data(), k);
    k = 0;
    for (std::size_t j = 0; j < n; ++j)
      if ((*mask)[i * n + j]) out[i * n + j] = prob[k++];
  }
  return Tensor::make("masked_softmax", a.shape(), std::move(out), {a}, [m, n, mask](auto& self) {
    double* g = Tensor::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j)
        if ((*mask)[i * n + j]) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

inline Tensor log_softmax(const Tensor& a) {
  auto [m, n] = detail::row_layout(a);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) kernels::log_softmax_row(a.data().data() + i * n, out.data() + i * n, n);
  return Tensor::make("log_softmax", a.shape(), std::move(out), {a}, [m, n](auto& self) {
    double* g = Tensor::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += gy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary("sigmoid", a, kernels::sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary("softplus", a, kernels::softplus, [](double x, double) { return kernels::sigmoid(x); });
}

// log sigma(x) = -softplus(-x)
inline Tensor log_sigmoid(const Tensor& a) {
  return detail::unary(
      "log_sigmoid", a, [](double x) { return -kernels::softplus(-x); },
      [](double x, double) { return kernels::sigmoid(-x); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor gelu(const Tensor& a) { return detail::unary("gelu", a, kernels::gelu, [](double x, double) { return kernels::gelu_grad(x); }); }

inline Tensor exp(const Tensor& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// out[i] = A[i, idx[i]]
inline Tensor gather(const Tensor& a, const std::vector<std::size_t>& idx) {
  auto [m, n] = detail::row_layout(a);
  if (idx.size() != m) throw ShapeError("gather", "index count " + std::to_string(idx.size()) + " vs rows of " + shape_str(a.shape()));
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] >= n) throw ShapeError("gather", "index " + std::to_string(idx[i]) + " out of range for " + shape_str(a.shape()));
    out[i] = a[i * n + idx[i]];
  }
  return Tensor::make("gather", {m}, std::move(out), {a}, [idx, n](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) g[i * n + idx[i]] += self.grad[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make("sum", {1}, {s}, {a}, [](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0)) {
      const std::size_t n = Tensor::parent_data(self, 0).size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Rows of table[V,d] selected by ids.
inline Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
  detail::require_2d("embedding", table);
  const std::size_t v = table.rows(), d = table.cols();
  if (ids.empty()) throw ShapeError("embedding", "empty id list");
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) throw ShapeError("embedding", "id " + std::to_string(ids[i]) + " >= vocabulary " + std::to_string(v));
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  return Tensor::make("embedding", {ids.size(), d}, std::move(out), {table}, [ids, d](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += self.grad[i * d + j];
  });
}

inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  auto [m, n] = detail::row_layout(a);
  if (gain.size() != n || bias.size() != n) throw ShapeError("layer_norm", a.shape(), gain.shape());
  std::vector<double> out(a.size());
  std::vector<double> xhat(a.size());
  std::vector<double> rstd(m);
  for (std::size_t i = 0; i < m; ++i)
    rstd[i] = kernels::layer_norm_row(a.data().data() + i * n, gain.data().data(), bias.data().data(),
                                      out.data() + i * n, xhat.data() + i * n, n, eps);
  return Tensor::make("layer_norm", a.shape(), std::move(out), {a, gain, bias},
                      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](auto& self) {
                        const auto& gd = Tensor::parent_data(self, 1);
                        double* gx = Tensor::parent_grad(self, 0);
                        double* gg = Tensor::parent_grad(self, 1);
                        double* gb = Tensor::parent_grad(self, 2);
                        for (std::size_t i = 0; i < m; ++i) {
                          const double* dy = self.grad.data() + i * n;
                          const double* xh = xhat.data() + i * n;
                          if (gg)
                            for (std::size_t j = 0; j < n; ++j) gg[j] += dy[j] * xh[j];
                          if (gb)
                            for (std::size_t j = 0; j < n; ++j) gb[j] += dy[j];
                          if (gx) {
                            double s1 = 0.0, s2 = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const double dxh = dy[j] * gd[j];
                              s1 += dxh;
                              s2 += dxh * xh[j];
                            }
                            const double inv_n = 1.0 / static_cast<double>(n);
                            for (std::size_t j = 0; j < n; ++j) {
                              const double dxh = dy[j] * gd[j];
                              gx[i * n + j] += rstd[i] * (dxh - inv_n * s1 - xh[j] * inv_n * s2);
                            }
                          }
                        }
                      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make("reshape", std::move(shape), std::move(out), {a}, [](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// Flat elements [begin, end) as a 1-D tensor.
inline Tensor slice_flat(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.size()) throw ShapeError("slice_flat", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(a.shape()));
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin), a.data().begin() + static_cast<std::ptrdiff_t>(end));
  return Tensor::make("slice_flat", {end - begin}, std::move(out), {a}, [begin](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin + i] += self.grad[i];
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_2d("slice_rows", a);
  if (begin >= end || end > a.rows()) throw ShapeError("slice_rows", "rows [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(a.shape()));
  const std::size_t n = a.cols();
  return reshape(slice_flat(reshape(a, {a.size()}), begin * n, end * n), {end - begin, n});
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_2d("slice_cols", a);
  if (begin >= end || end > a.cols()) throw ShapeError("slice_cols", "cols [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols(), w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(a.data().data() + i * n + begin, w, out.data() + i * w);
  return Tensor::make("slice_cols", {m, w}, std::move(out), {a}, [m, n, w, begin](auto& self) {
    if (double* g = Tensor::parent_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows", "no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_2d("concat_rows", p);
    if (p.cols() != n) throw ShapeError("concat_rows", parts[0].shape(), p.shape());
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor::make("concat_rows", {m, n}, std::move(out), parts, [](auto& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t len = Tensor::parent_data(self, p).size();
      if (double* g = Tensor::parent_grad(self, p))
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      off += len;
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols", "no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_2d("concat_cols", p);
    if (p.rows() != m) throw ShapeError("concat_cols", parts[0].shape(), p.shape());
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(parts[p].data().data() + i * widths[p], widths[p], out.data() + i * n + off);
    off += widths[p];
  }
  return Tensor::make("concat_cols", {m, n}, std::move(out), parts, [m, n, widths](auto& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (double* g = Tensor::parent_grad(self, p))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) g[i * widths[p] + j] += self.grad[i * n + off + j];
      off += widths[p];
    }
  });
}

// Scalars stacked into a 1-D tensor.
inline Tensor stack_scalars(const std::vector<Tensor>& parts) {
  std::vector<Tensor> rows;
  rows.reserve(parts.size());
  for (const auto& p : parts) rows.push_back(reshape(p, {1, 1}));
  auto r = concat_rows(rows);
  return reshape(r, {parts.size()});
}

// ---------------------------------------------------------------------------
// Finite-difference checking

// Max over coordinates of |analytic - central| / (|central| + 1e-8).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  std::vector<double> x0(x.data().begin(), x.data().end());
  auto xl = Tensor::leaf(x.shape(), x0, true);
  Tensor y;
  try {
    y = f(xl);
  } catch (const NumericError& e) {
    throw NumericError(std::string("grad_check: f(x) is not finite: ") + e.what());
  }
  if (!std::isfinite(y.item())) throw NumericError("grad_check: f(x) is not finite");
  std::vector<double> analytic(x0.size(), 0.0);
  if (y.requires_grad()) {
    y.backward();
    analytic = xl.grad();
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    auto xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    const double fp = f(Tensor::leaf(x.shape(), xp)).item();
    const double fm = f(Tensor::leaf(x.shape(), xm)).item();
    const double central = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(central) + 1e-8));
  }
  return worst;
}

}  // namespace seva
