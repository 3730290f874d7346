#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation.
//
// Every op returns a Tensor whose node keeps its inputs alive only when at
// least one input requires a gradient, so forward passes over frozen
// parameters build no graph at all. backward() orders the reachable nodes
// topologically and runs each node's gradient rule exactly once.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kadapter/errors.hpp"

namespace kadapter::ndgrad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Lazily allocated; only ever called for nodes that require a gradient.
  std::span<double> grad_buffer() {
    if (!has_grad) {
      grad.assign(data.size(), 0.0);
      has_grad = true;
    }
    return grad;
  }
};

inline std::uint64_t next_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) {
        throw DimensionError("tensor dimensions must be positive, got " +
                             shape_str(shape));
      }
    }
    if (numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    node->id = detail::next_id();
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, value),
                requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access. Writing into a tensor that is part of a live graph
  // invalidates that graph's gradients.
  std::span<double> mutable_data() { return node_->data; }
  double item() const {
    if (size() != 1) {
      throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (!flag) clear_grad();
  }

  bool has_grad() const { return node_->has_grad; }
  std::span<const double> grad() const {
    if (!node_->has_grad) {
      throw ArgumentError("tensor has no gradient");
    }
    return node_->grad;
  }
  void clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
    node_->has_grad = false;
  }

  std::uint64_t node_id() const { return node_->id; }
  const char* op_name() const { return node_->op; }

  // Value copy with no graph history and no gradient.
  Tensor detach() const { return from(shape(), node_->data, false); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node)
      : node_(std::move(node)) {}

  friend Tensor make_result(Shape, std::vector<double>, const char*,
                            std::vector<Tensor>,
                            std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

// Wraps an op's forward value. The gradient rule is kept only when some
// input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          const char* op, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> rule) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->id = detail::next_id();
  node->op = op;
  const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) {
                                     return t.defined() && t.requires_grad();
                                   });
  if (tracked) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(rule);
  }
  return Tensor(std::move(node));
}

namespace detail {

inline Node* grad_target(Node& self, std::size_t i) {
  Node* in = self.inputs[i].get();
  return (in != nullptr && in->requires_grad) ? in : nullptr;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " +
                         std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

inline void require_finite(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericInputError(std::string(what) + ": non-finite input");
    }
  }
}

// out[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(const double* a, const double* b, double* out,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* out,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] += acc;
    }
  }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
inline void gemm_tn(const double* a, const double* b, double* out,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " +
                         shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), "matmul", {a, b},
                     [m, k, n](detail::Node& self) {
                       const double* g = self.grad.data();
                       const auto& A = self.inputs[0]->data;
                       const auto& B = self.inputs[1]->data;
                       if (auto* in = detail::grad_target(self, 0)) {
                         detail::gemm_nt(g, B.data(), in->grad_buffer().data(),
                                         m, n, k);
                       }
                       if (auto* in = detail::grad_target(self, 1)) {
                         detail::gemm_tn(A.data(), g, in->grad_buffer().data(),
                                         m, k, n);
                       }
                     });
}

// x[...×in] · w[in×out] (+ bias[out]); leading dimensions are flattened.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  detail::require_rank(w, 2, "linear weight");
  const std::size_t in_dim = w.dim(0), out_dim = w.dim(1);
  if (x.shape().back() != in_dim) {
    throw DimensionError("linear: input " + shape_str(x.shape()) +
                         " does not match weight " + shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) +
                         " does not match weight " + shape_str(w.shape()));
  }
  const std::size_t rows = x.size() / in_dim;
  std::vector<double> out(rows * out_dim, 0.0);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(bias.data().begin(), bias.data().end(),
                out.begin() + static_cast<std::ptrdiff_t>(r * out_dim));
    }
  }
  detail::gemm_nn(x.data().data(), w.data().data(), out.data(), rows, in_dim,
                  out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  return make_result(
      std::move(shape), std::move(out), "linear", {x, w, bias},
      [rows, in_dim, out_dim](detail::Node& self) {
        const double* g = self.grad.data();
        if (auto* in = detail::grad_target(self, 0)) {
          detail::gemm_nt(g, self.inputs[1]->data.data(),
                          in->grad_buffer().data(), rows, out_dim, in_dim);
        }
        if (auto* in = detail::grad_target(self, 1)) {
          detail::gemm_tn(self.inputs[0]->data.data(), g,
                          in->grad_buffer().data(), rows, in_dim, out_dim);
        }
        if (self.inputs.size() > 2) {
          if (auto* in = detail::grad_target(self, 2)) {
            auto gb = in->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
            }
          }
        }
      });
}

// Batched a[B×m×k] · b[B×k×n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != B || b.dim(1) != k) {
    throw DimensionError("bmm: incompatible " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  std::vector<double> out(B * m * n, 0.0);
  for (std::size_t s = 0; s < B; ++s) {
    detail::gemm_nn(a.data().data() + s * m * k, b.data().data() + s * k * n,
                    out.data() + s * m * n, m, k, n);
  }
  return make_result({B, m, n}, std::move(out), "bmm", {a, b},
                     [B, m, k, n](detail::Node& self) {
                       const double* g = self.grad.data();
                       const double* A = self.inputs[0]->data.data();
                       const double* Bd = self.inputs[1]->data.data();
                       if (auto* in = detail::grad_target(self, 0)) {
                         double* ga = in->grad_buffer().data();
                         for (std::size_t s = 0; s < B; ++s) {
                           detail::gemm_nt(g + s * m * n, Bd + s * k * n,
                                           ga + s * m * k, m, n, k);
                         }
                       }
                       if (auto* in = detail::grad_target(self, 1)) {
                         double* gb = in->grad_buffer().data();
                         for (std::size_t s = 0; s < B; ++s) {
                           detail::gemm_tn(A + s * m * k, g + s * m * n,
                                           gb + s * k * n, m, k, n);
                         }
                       }
                     });
}

// Batched a[B×m×k] · b[B×n×k]ᵀ.
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 3, "bmm_nt");
  detail::require_rank(b, 3, "bmm_nt");
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != B || b.dim(2) != k) {
    throw DimensionError("bmm_nt: incompatible " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  std::vector<double> out(B * m * n, 0.0);
  for (std::size_t s = 0; s < B; ++s) {
    detail::gemm_nt(a.data().data() + s * m * k, b.data().data() + s * n * k,
                    out.data() + s * m * n, m, k, n);
  }
  return make_result({B, m, n}, std::move(out), "bmm_nt", {a, b},
                     [B, m, k, n](detail::Node& self) {
                       const double* g = self.grad.data();
                       const double* A = self.inputs[0]->data.data();
                       const double* Bd = self.inputs[1]->data.data();
                       if (auto* in = detail::grad_target(self, 0)) {
                         double* ga = in->grad_buffer().data();
                         for (std::size_t s = 0; s < B; ++s) {
                           detail::gemm_nn(g + s * m * n, Bd + s * n * k,
                                           ga + s * m * k, m, n, k);
                         }
                       }
                       if (auto* in = detail::grad_target(self, 1)) {
                         double* gb = in->grad_buffer().data();
                         for (std::size_t s = 0; s < B; ++s) {
                           // dB[n×k] += gᵀ[n×m] · A[m×k]
                           detail::gemm_tn(g + s * m * n, A + s * m * k,
                                           gb + s * n * k, m, n, k);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), "add", {a, b},
                     [](detail::Node& self) {
                       for (std::size_t i = 0; i < 2; ++i) {
                         if (auto* in = detail::grad_target(self, i)) {
                           auto g = in->grad_buffer();
                           for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j];
                         }
                       }
                     });
}

// x + c with c a constant of the same size (no gradient flows into c).
inline Tensor add_constant(const Tensor& x, std::span<const double> c) {
  if (c.size() != x.size()) {
    throw DimensionError("add_constant: constant of size " +
                         std::to_string(c.size()) + " for tensor " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c[i];
  return make_result(x.shape(), std::move(out), "add_constant", {x},
                     [](detail::Node& self) {
                       if (auto* in = detail::grad_target(self, 0)) {
                         auto g = in->grad_buffer();
                         for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j];
                       }
                     });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  return make_result(x.shape(), std::move(out), "scale", {x},
                     [c](detail::Node& self) {
                       if (auto* in = detail::grad_target(self, 0)) {
                         auto g = in->grad_buffer();
                         for (std::size_t j = 0; j < g.size(); ++j) g[j] += c * self.grad[j];
                       }
                     });
}

// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), "gelu", {x},
                     [](detail::Node& self) {
                       auto* in = detail::grad_target(self, 0);
                       if (in == nullptr) return;
                       auto g = in->grad_buffer();
                       const auto& xs = in->data;
                       for (std::size_t j = 0; j < g.size(); ++j) {
                         const double v = xs[j];
                         const double u = kC * (v + kA * v * v * v);
                         const double t = std::tanh(u);
                         const double du = kC * (1.0 + 3.0 * kA * v * v);
                         const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                         g[j] += d * self.grad[j];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Last-dimension ops

inline Tensor softmax_lastdim(const Tensor& x) {
  detail::require_finite(x, "softmax_lastdim");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= total;
  }
  return make_result(x.shape(), std::move(out), "softmax", {x},
                     [rows, d](detail::Node& self) {
                       auto* in = detail::grad_target(self, 0);
                       if (in == nullptr) return;
                       auto g = in->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.data.data() + r * d;
                         const double* gy = self.grad.data() + r * d;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
                         for (std::size_t j = 0; j < d; ++j) {
                           g[r * d + j] += y[j] * (gy[j] - dot);
                         }
                       }
                     });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-5) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("layer_norm: empty last dimension");
  }
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) +
                         "/" + shape_str(bias.shape()) + " for input " +
                         shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw ArgumentError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  // Saved per row: normalized values and 1/sigma.
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [rows, d, xhat, inv_std](detail::Node& self) {
        const double* gy = self.grad.data();
        const auto& gamma = self.inputs[1]->data;
        if (auto* in = detail::grad_target(self, 0)) {
          auto g = in->grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_gh = 0.0, sum_ghx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = gy[r * d + j] * gamma[j];
              sum_gh += gh;
              sum_ghx += gh * (*xhat)[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = gy[r * d + j] * gamma[j];
              g[r * d + j] += (*inv_std)[r] *
                              (gh - inv_d * sum_gh -
                               (*xhat)[r * d + j] * inv_d * sum_ghx);
            }
          }
        }
        if (auto* in = detail::grad_target(self, 1)) {
          auto g = in->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j] * (*xhat)[r * d + j];
          }
        }
        if (auto* in = detail::grad_target(self, 2)) {
          auto g = in->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j];
          }
        }
      });
}

inline Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("concat_lastdim: empty list");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) {
      throw DimensionError("concat_lastdim: leading shape " +
                           shape_str(p.shape()) + " differs from " +
                           shape_str(parts[0].shape()));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const double* src = parts[i].data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src + r * widths[i], widths[i], out.data() + r * total + offset);
    }
    offset += widths[i];
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_result(std::move(shape), std::move(out), "concat", parts,
                     [rows, total, widths](detail::Node& self) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < widths.size(); ++i) {
                         if (auto* in = detail::grad_target(self, i)) {
                           auto g = in->grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < widths[i]; ++j) {
                               g[r * widths[i] + j] += self.grad[r * total + off + j];
                             }
                           }
                         }
                         off += widths[i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({1}, {total}, "sum", {x}, [](detail::Node& self) {
    if (auto* in = detail::grad_target(self, 0)) {
      auto g = in->grad_buffer();
      for (double& v : g) v += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// Mean softmax cross-entropy over rows whose label != ignore_index.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                            int ignore_index = -100) {
  detail::require_rank(logits, 2, "cross_entropy");
  detail::require_finite(logits, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
  }
  auto probs = std::make_shared<std::vector<double>>(b * c, 0.0);
  std::vector<int> kept(labels.begin(), labels.end());
  std::size_t n_effective = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    const int y = labels[r];
    if (y == ignore_index) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ArgumentError("cross_entropy: label " + std::to_string(y) +
                          " outside [0," + std::to_string(c) + ")");
    }
    const double* row = logits.data().data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[y];
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = std::exp(row[j] - log_z);
    ++n_effective;
  }
  if (n_effective == 0) {
    throw UndefinedLossError("cross_entropy: every row is ignored");
  }
  const double inv_n = 1.0 / static_cast<double>(n_effective);
  return make_result(
      {1}, {total * inv_n}, "cross_entropy", {logits},
      [b, c, probs, kept, ignore_index, inv_n](detail::Node& self) {
        auto* in = detail::grad_target(self, 0);
        if (in == nullptr) return;
        auto g = in->grad_buffer();
        const double scale_g = self.grad[0] * inv_n;
        for (std::size_t r = 0; r < b; ++r) {
          if (kept[r] == ignore_index) continue;
          for (std::size_t j = 0; j < c; ++j) {
            const double onehot = (static_cast<int>(j) == kept[r]) ? 1.0 : 0.0;
            g[r * c + j] += scale_g * ((*probs)[r * c + j] - onehot);
          }
        }
      });
}

// Mean per-element sigmoid binary cross-entropy against 0/1 targets.
inline Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  detail::require_finite(logits, "bce_with_logits");
  if (targets.size() != logits.size()) {
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.data()[i];
    // log(1 + e^z) - t z, written to avoid overflow
    total += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<double> t(targets.begin(), targets.end());
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_result({1}, {total * inv_n}, "bce_with_logits", {logits},
                     [t, inv_n](detail::Node& self) {
                       auto* in = detail::grad_target(self, 0);
                       if (in == nullptr) return;
                       auto g = in->grad_buffer();
                       const double s = self.grad[0] * inv_n;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double sig = 1.0 / (1.0 + std::exp(-in->data[i]));
                         g[i] += s * (sig - t[i]);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Indexing and layout

// Rows of table[V×H] selected by ids; result shape lead + [H].
inline Tensor embedding(const Tensor& table, std::span<const int> ids, Shape lead) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), h = table.dim(1);
  if (numel(lead) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) +
                         " ids for shape " + shape_str(lead));
  }
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(ids.size() * h);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw VocabularyError("embedding: id " + std::to_string(idx[i]) +
                            " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(idx[i]) * h, h,
                out.data() + i * h);
  }
  lead.push_back(h);
  return make_result(std::move(lead), std::move(out), "embedding", {table},
                     [idx, h](detail::Node& self) {
                       auto* in = detail::grad_target(self, 0);
                       if (in == nullptr) return;
                       auto g = in->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         const std::size_t row = static_cast<std::size_t>(idx[i]) * h;
                         for (std::size_t j = 0; j < h; ++j) g[row + j] += self.grad[i * h + j];
                       }
                     });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x},
                     [](detail::Node& self) {
                       if (auto* in = detail::grad_target(self, 0)) {
                         auto g = in->grad_buffer();
                         for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j];
                       }
                     });
}

// Views x[...×D] as rows of width D and gathers the listed rows into [n×D].
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.shape().back();
  const std::size_t total_rows = x.size() / d;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  if (idx.empty()) throw ArgumentError("gather_rows: no rows requested");
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= total_rows) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[i]) +
                           " outside " + shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + idx[i] * d, d, out.data() + i * d);
  }
  return make_result({idx.size(), d}, std::move(out), "gather_rows", {x},
                     [idx, d](detail::Node& self) {
                       auto* in = detail::grad_target(self, 0);
                       if (in == nullptr) return;
                       auto g = in->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
                       }
                     });
}

// Mean of x[b×l×D] over the half-open token range spans[i] of example i.
inline Tensor span_mean(const Tensor& x,
                        std::span<const std::pair<std::size_t, std::size_t>> spans) {
  detail::require_rank(x, 3, "span_mean");
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (spans.size() != b) {
    throw DimensionError("span_mean: " + std::to_string(spans.size()) +
                         " spans for batch " + shape_str(x.shape()));
  }
  std::vector<std::pair<std::size_t, std::size_t>> sp(spans.begin(), spans.end());
  std::vector<double> out(b * d, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const auto [s, e] = sp[i];
    if (s >= e || e > l) {
      throw AnnotationError("span_mean: span [" + std::to_string(s) + "," +
                            std::to_string(e) + ") invalid for length " +
                            std::to_string(l));
    }
    const double w = 1.0 / static_cast<double>(e - s);
    for (std::size_t t = s; t < e; ++t) {
      const double* row = x.data().data() + (i * l + t) * d;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += w * row[j];
    }
  }
  return make_result({b, d}, std::move(out), "span_mean", {x},
                     [sp, l, d](detail::Node& self) {
                       auto* in = detail::grad_target(self, 0);
                       if (in == nullptr) return;
                       auto g = in->grad_buffer();
                       for (std::size_t i = 0; i < sp.size(); ++i) {
                         const auto [s, e] = sp[i];
                         const double w = 1.0 / static_cast<double>(e - s);
                         for (std::size_t t = s; t < e; ++t) {
                           for (std::size_t j = 0; j < d; ++j) {
                             g[(i * l + t) * d + j] += w * self.grad[i * d + j];
                           }
                         }
                       }
                     });
}

// [b×l×(heads·dh)] -> [(b·heads)×l×dh]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  detail::require_rank(x, 3, "split_heads");
  const std::size_t b = x.dim(0), l = x.dim(1), w = x.dim(2);
  if (heads == 0 || w % heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(w) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = w / heads;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < l; ++t)
        std::copy_n(x.data().data() + (i * l + t) * w + h * dh, dh,
                    out.data() + ((i * heads + h) * l + t) * dh);
  return make_result({b * heads, l, dh}, std::move(out), "split_heads", {x},
                     [b, l, w, heads, dh](detail::Node& self) {
                       auto* in = detail::grad_target(self, 0);
                       if (in == nullptr) return;
                       auto g = in->grad_buffer();
                       for (std::size_t i = 0; i < b; ++i)
                         for (std::size_t h = 0; h < heads; ++h)
                           for (std::size_t t = 0; t < l; ++t)
                             for (std::size_t j = 0; j < dh; ++j)
                               g[(i * l + t) * w + h * dh + j] +=
                                   self.grad[((i * heads + h) * l + t) * dh + j];
                     });
}

// [(b·heads)×l×dh] -> [b×l×(heads·dh)]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  detail::require_rank(x, 3, "merge_heads");
  if (heads == 0 || x.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: leading dimension " +
                         std::to_string(x.dim(0)) + " not divisible by " +
                         std::to_string(heads));
  }
  const std::size_t b = x.dim(0) / heads, l = x.dim(1), dh = x.dim(2);
  const std::size_t w = heads * dh;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < l; ++t)
        std::copy_n(x.data().data() + ((i * heads + h) * l + t) * dh, dh,
                    out.data() + (i * l + t) * w + h * dh);
  return make_result({b, l, w}, std::move(out), "merge_heads", {x},
                     [b, l, w, heads, dh](detail::Node& self) {
                       auto* in = detail::grad_target(self, 0);
                       if (in == nullptr) return;
                       auto g = in->grad_buffer();
                       for (std::size_t i = 0; i < b; ++i)
                         for (std::size_t h = 0; h < heads; ++h)
                           for (std::size_t t = 0; t < l; ++t)
                             for (std::size_t j = 0; j < dh; ++j)
                               g[((i * heads + h) * l + t) * dh + j] +=
                                   self.grad[(i * l + t) * w + h * dh + j];
                     });
}

// ---------------------------------------------------------------------------
// Backward pass

inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ArgumentError("backward: loss must be a scalar, got " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; `order` ends up topologically sorted.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&loss.node(), 0);
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child != nullptr && child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->has_grad) node->backward(*node);
  }
}

}  // namespace kadapter::ndgrad
