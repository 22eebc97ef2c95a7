#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "alignvlm/errors.hpp"
#include "alignvlm/tensor.hpp"

namespace alignvlm {

template <class T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; only valid while the graph lives.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Tape of op records in creation order, which is a topological order. Leaves
/// are either constants, owned inputs, or parameters bound by pointer (their
/// gradient is flushed into Tensor::grad when backward finishes).
template <class T>
class Graph {
 public:
  using Vjp = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push_leaf(std::move(value), false); }

  Var<T> input(Tensor<T> value, bool requires_grad) {
    return push_leaf(std::move(value), requires_grad);
  }

  /// Binds an externally owned tensor without copying it. The tensor must
  /// outlive the graph and must not be mutated while the graph is in use.
  Var<T> param(Tensor<T>& p) {
    Node n;
    n.external = &p;
    n.bound = &p;
    n.needs_grad = p.requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> param(const Tensor<T>& p) {
    Node n;
    n.external = &p;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.own;
  }

  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated on first use.
  std::vector<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
    return n.grad;
  }

  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    Tensor<T> out(value(v.id).shape());
    if (!n.grad.empty()) std::copy(n.grad.begin(), n.grad.end(), out.data().begin());
    return out;
  }

  /// Records an op output. `inputs` decide whether the node participates in
  /// backward; the vjp is dropped when none of them needs a gradient.
  Var<T> emit(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
              Vjp vjp) {
    return emit_list(op, std::move(value), std::vector<Var<T>>(inputs), std::move(vjp));
  }

  Var<T> emit_list(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                   Vjp vjp) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      if (!std::isfinite(value[i])) {
        throw NumericError(std::string("non-finite value produced by ") + op +
                           " at flat index " + std::to_string(i));
      }
    }
    Node n;
    n.own = std::move(value);
    for (const auto& v : inputs) {
      if (v.graph != this) throw Error(std::string(op) + ": operands from different graphs");
      n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    if (n.needs_grad) n.vjp = std::move(vjp);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  void backward(Var<T> out) {
    if (out.value().size() != 1) {
      throw ShapeError("backward without seed requires a scalar output, got " +
                       shape_str(out.shape()));
    }
    backward(out, Tensor<T>(out.shape(), std::vector<T>{T(1)}));
  }

  /// Reverse sweep from `out`. With `flush` set, gradients of bound
  /// parameters are added into their Tensor::grad; otherwise they stay in the
  /// graph and can be read with bound_grads().
  void backward(Var<T> out, const Tensor<T>& seed, bool flush = true) {
    if (backward_done_) {
      throw GradientStateError(
          "backward already ran on this graph; call reset() before running it again");
    }
    if (seed.shape() != out.shape()) {
      throw ShapeError("seed shape " + shape_str(seed.shape()) +
                       " does not match output shape " + shape_str(out.shape()));
    }
    backward_done_ = true;
    auto& g = grad_buffer(out.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::size_t id = out.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty() || !n.vjp) continue;
      n.vjp(*this, id);
    }
    if (flush) {
      for (auto& n : nodes_) {
        if (!n.bound || !n.bound->requires_grad || n.grad.empty()) continue;
        n.bound->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.bound->grad[i] += n.grad[i];
      }
    }
  }

  /// Pairs of (bound parameter, gradient held in the graph).
  std::vector<std::pair<Tensor<T>*, const std::vector<T>*>> bound_grads() const {
    std::vector<std::pair<Tensor<T>*, const std::vector<T>*>> out;
    for (const auto& n : nodes_) {
      if (n.bound && n.bound->requires_grad && !n.grad.empty()) {
        out.emplace_back(n.bound, &n.grad);
      }
    }
    return out;
  }

  /// Clears node gradients so backward may run again on the same tape.
  void reset() {
    for (auto& n : nodes_) n.grad.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* external = nullptr;
    Tensor<T>* bound = nullptr;
    std::vector<T> grad;
    Vjp vjp;
    bool needs_grad = false;
  };

  Var<T> push_leaf(Tensor<T> value, bool requires_grad) {
    Node n;
    n.own = std::move(value);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // deque keeps references to earlier node values valid while ops append.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <class T>
void require_matrix(const char* op, const Var<T>& v) {
  if (v.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(v.shape()));
  }
}

template <class T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

}  // namespace detail

/// C = A · B with A (m×k), B (k×n).
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor<T> c({m, n});
  kernels::gemm_nn(a.value().data().data(), b.value().data().data(), c.data().data(), m, k,
                   n, false);
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->emit("matmul", std::move(c), {a, b}, [=](Graph<T>& g, std::size_t self) {
    const T* dc = g.grad_buffer(self).data();
    if (g.needs_grad(ia)) {
      kernels::gemm_nt(dc, g.value(ib).data().data(), g.grad_buffer(ia).data(), m, n, k, true);
    }
    if (g.needs_grad(ib)) {
      kernels::gemm_tn(g.value(ia).data().data(), dc, g.grad_buffer(ib).data(), k, m, n, true);
    }
  });
}

/// C = A · Bᵀ with A (m×k), B (n×k); the usual "x Wᵀ" linear layer.
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::require_matrix("matmul_nt", a);
  detail::require_matrix("matmul_nt", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()) + "^T");
  }
  Tensor<T> c({m, n});
  kernels::gemm_nt(a.value().data().data(), b.value().data().data(), c.data().data(), m, k,
                   n, false);
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->emit("matmul_nt", std::move(c), {a, b},
                       [=](Graph<T>& g, std::size_t self) {
                         const T* dc = g.grad_buffer(self).data();
                         if (g.needs_grad(ia)) {
                           kernels::gemm_nn(dc, g.value(ib).data().data(),
                                            g.grad_buffer(ia).data(), m, n, k, true);
                         }
                         if (g.needs_grad(ib)) {
                           kernels::gemm_tn(dc, g.value(ia).data().data(),
                                            g.grad_buffer(ib).data(), n, m, k, true);
                         }
                       });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> c = a.value();
  c.requires_grad = false;
  c.grad.clear();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->emit("add", std::move(c), {a, b}, [=](Graph<T>& g, std::size_t self) {
    const auto& dc = g.grad_buffer(self);
    for (std::size_t in : {ia, ib}) {
      if (!g.needs_grad(in)) continue;
      auto& d = g.grad_buffer(in);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
    }
  });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape("mul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> c(av.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->emit("mul", std::move(c), {a, b}, [=](Graph<T>& g, std::size_t self) {
    const auto& dc = g.grad_buffer(self);
    if (g.needs_grad(ia)) {
      auto& d = g.grad_buffer(ia);
      const auto& other = g.value(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * other[i];
    }
    if (g.needs_grad(ib)) {
      auto& d = g.grad_buffer(ib);
      const auto& other = g.value(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * other[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> c(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * s;
  const std::size_t ia = a.id;
  return a.graph->emit("scale", std::move(c), {a}, [=](Graph<T>& g, std::size_t self) {
    const auto& dc = g.grad_buffer(self);
    auto& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * s;
  });
}

/// Adds a length-n vector to every row of an (m×n) matrix.
template <class T>
Var<T> add_rowvec(Var<T> a, Var<T> v) {
  detail::require_matrix("add_rowvec", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (v.value().size() != n) {
    throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " vs matrix " +
                     shape_str(a.shape()));
  }
  Tensor<T> c({m, n});
  const auto& av = a.value();
  const auto& vv = v.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c(i, j) = av(i, j) + vv[j];
  const std::size_t ia = a.id, iv = v.id;
  return a.graph->emit("add_rowvec", std::move(c), {a, v}, [=](Graph<T>& g, std::size_t self) {
    const auto& dc = g.grad_buffer(self);
    if (g.needs_grad(ia)) {
      auto& d = g.grad_buffer(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
    }
    if (g.needs_grad(iv)) {
      auto& d = g.grad_buffer(iv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += dc[i * n + j];
    }
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> c(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] > T(0) ? av[i] : T(0);
  const std::size_t ia = a.id;
  return a.graph->emit("relu", std::move(c), {a}, [=](Graph<T>& g, std::size_t self) {
    const auto& dc = g.grad_buffer(self);
    const auto& x = g.value(ia);
    auto& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x[i] > T(0)) d[i] += dc[i];
  });
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  Tensor<T> c(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = detail::gelu(av[i]);
  const std::size_t ia = a.id;
  return a.graph->emit("gelu", std::move(c), {a}, [=](Graph<T>& g, std::size_t self) {
    const auto& dc = g.grad_buffer(self);
    const auto& x = g.value(ia);
    auto& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * detail::gelu_grad(x[i]);
  });
}

/// Row-wise layer normalization with population variance.
template <class T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  detail::require_matrix("layernorm", x);
  const std::size_t n = x.rows(), d = x.cols();
  if (!(eps > T(0))) {
    throw ConfigError("layernorm: eps must be positive (division-by-zero guard)");
  }
  if (d < 2) throw ShapeError("layernorm: row width must be at least 2");
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layernorm: gamma/beta length must equal row width " + std::to_string(d));
  }
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  auto xhat = std::make_shared<std::vector<T>>(n * d);
  auto rstd = std::make_shared<std::vector<T>>(n);
  Tensor<T> y({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data().data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T r = T(1) / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * r;
      (*xhat)[i * d + j] = h;
      y(i, j) = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.graph->emit(
      "layernorm", std::move(y), {x, gamma, beta}, [=](Graph<T>& g, std::size_t self) {
        const auto& dy = g.grad_buffer(self);
        const auto& gam = g.value(ig);
        if (g.needs_grad(ig)) {
          auto& dg = g.grad_buffer(ig);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) dg[j] += dy[i * d + j] * (*xhat)[i * d + j];
        }
        if (g.needs_grad(ib)) {
          auto& db = g.grad_buffer(ib);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) db[j] += dy[i * d + j];
        }
        if (g.needs_grad(ix)) {
          auto& dx = g.grad_buffer(ix);
          std::vector<T> dh(d);
          for (std::size_t i = 0; i < n; ++i) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = dy[i * d + j] * gam[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * (*xhat)[i * d + j];
            }
            mean_dh /= T(d);
            mean_dh_h /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              dx[i * d + j] +=
                  (*rstd)[i] * (dh[j] - mean_dh - (*xhat)[i * d + j] * mean_dh_h);
            }
          }
        }
      });
}

namespace detail {

// Softmax over the first `width` entries of a row; the rest are set to 0.
template <class T>
void softmax_prefix(const T* in, T* out, std::size_t n, std::size_t width) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < width; ++j) mx = std::max(mx, in[j]);
  T sum = 0;
  for (std::size_t j = 0; j < width; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < width; ++j) out[j] /= sum;
  for (std::size_t j = width; j < n; ++j) out[j] = T(0);
}

template <class T>
Var<T> softmax_impl(const char* op, Var<T> x, bool causal) {
  require_matrix(op, x);
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError(std::string(op) + ": empty rows");
  const auto& xv = x.value();
  Tensor<T> y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t width = causal ? std::min(n, i + 1 + (n > m ? n - m : 0)) : n;
    softmax_prefix(xv.data().data() + i * n, y.data().data() + i * n, n, width);
  }
  const std::size_t ix = x.id;
  return x.graph->emit(op, std::move(y), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad_buffer(self);
    const auto& yv = g.value(self);
    auto& dx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[i * n + j] * yv(i, j);
      for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += yv(i, j) * (dy[i * n + j] - dot);
    }
  });
}

}  // namespace detail

/// Numerically stable row softmax; every output row lies on the simplex.
template <class T>
Var<T> softmax_rows(Var<T> x) {
  return detail::softmax_impl("softmax_rows", x, false);
}

/// Row softmax with a causal mask: for an (m×n) score matrix whose rows are
/// the last m positions of an n-long sequence, row i sees columns
/// [0, n-m+i]. Masked entries come out as exact zeros.
template <class T>
Var<T> causal_softmax_rows(Var<T> x) {
  return detail::softmax_impl("causal_softmax_rows", x, true);
}

/// Divides each row by its sum. Rows must have positive sums.
template <class T>
Var<T> normalize_rows(Var<T> x) {
  detail::require_matrix("normalize_rows", x);
  const std::size_t m = x.rows(), n = x.cols();
  const auto& xv = x.value();
  auto sums = std::make_shared<std::vector<T>>(m);
  Tensor<T> y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += xv(i, j);
    if (!(s > T(0))) {
      throw NumericError("normalize_rows: row " + std::to_string(i) + " has no mass");
    }
    (*sums)[i] = s;
    for (std::size_t j = 0; j < n; ++j) y(i, j) = xv(i, j) / s;
  }
  const std::size_t ix = x.id;
  return x.graph->emit("normalize_rows", std::move(y), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad_buffer(self);
    const auto& yv = g.value(self);
    auto& dx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[i * n + j] * yv(i, j);
      for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += (dy[i * n + j] - dot) / (*sums)[i];
    }
  });
}

/// Rotary position encoding: row i has each column pair (2k, 2k+1) rotated
/// by angle i·base^(−2k/n). The map is orthogonal, so its vjp is the inverse
/// rotation.
template <class T>
Var<T> rotary(Var<T> x, T base = T(10000)) {
  detail::require_matrix("rotary", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (n % 2 != 0) throw ShapeError("rotary needs an even width, got " + std::to_string(n));
  auto cs = std::make_shared<std::vector<T>>(m * n);  // cos, sin per (row, pair)
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double angle = double(i) * std::pow(double(base), -2.0 * double(k) / double(n));
      (*cs)[i * n + 2 * k] = static_cast<T>(std::cos(angle));
      (*cs)[i * n + 2 * k + 1] = static_cast<T>(std::sin(angle));
    }
  const auto& xv = x.value();
  Tensor<T> y({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n; k += 2) {
      const T c = (*cs)[i * n + k], s = (*cs)[i * n + k + 1];
      y(i, k) = c * xv(i, k) - s * xv(i, k + 1);
      y(i, k + 1) = s * xv(i, k) + c * xv(i, k + 1);
    }
  const std::size_t ix = x.id;
  return x.graph->emit("rotary", std::move(y), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad_buffer(self);
    auto& dx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < n; k += 2) {
        const std::size_t a = i * n + k;
        const T c = (*cs)[a], s = (*cs)[a + 1];
        dx[a] += c * dy[a] + s * dy[a + 1];
        dx[a + 1] += -s * dy[a] + c * dy[a + 1];
      }
  });
}

/// Stacks matrices with equal column counts vertically.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_matrix("concat_rows", p);
    if (p.cols() != n) {
      throw ShapeError("concat_rows: width mismatch " + shape_str(parts.front().shape()) +
                       " vs " + shape_str(p.shape()));
    }
    m += p.rows();
  }
  Tensor<T> c({m, n});
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), c.data().begin() + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.value().size();
  }
  return parts.front().graph->emit_list(
      "concat_rows", std::move(c), parts, [=](Graph<T>& g, std::size_t self) {
        const auto& dc = g.grad_buffer(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!g.needs_grad(ids[k])) continue;
          auto& d = g.grad_buffer(ids[k]);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[offsets[k] + i];
        }
      });
}

template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  return concat_rows(std::vector<Var<T>>{a, b});
}

/// Rows [begin, end).
template <class T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  detail::require_matrix("slice_rows", a);
  const std::size_t n = a.cols();
  if (begin > end || end > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") outside " + shape_str(a.shape()));
  }
  Tensor<T> c({end - begin, n});
  std::copy(a.value().data().begin() + begin * n, a.value().data().begin() + end * n,
            c.data().begin());
  const std::size_t ia = a.id;
  return a.graph->emit("slice_rows", std::move(c), {a}, [=](Graph<T>& g, std::size_t self) {
    const auto& dc = g.grad_buffer(self);
    auto& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < dc.size(); ++i) d[begin * n + i] += dc[i];
  });
}

/// out[i] = table[ids[i]]; backward scatter-adds.
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids) {
  detail::require_matrix("gather_rows", table);
  const std::size_t v = table.rows(), n = table.cols();
  Tensor<T> c({ids.size(), n});
  const auto& tv = table.value();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw IndexError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                       std::to_string(v) + " rows");
    }
    std::copy_n(tv.data().begin() + ids[i] * n, n, c.data().begin() + i * n);
  }
  const std::size_t it = table.id;
  return table.graph->emit("gather_rows", std::move(c), {table},
                           [=, ids = std::move(ids)](Graph<T>& g, std::size_t self) {
                             const auto& dc = g.grad_buffer(self);
                             auto& d = g.grad_buffer(it);
                             for (std::size_t i = 0; i < ids.size(); ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 d[ids[i] * n + j] += dc[i * n + j];
                           });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> c = a.value();
  c.requires_grad = false;
  c.grad.clear();
  c.reshape(std::move(shape));
  const std::size_t ia = a.id;
  return a.graph->emit("reshape", std::move(c), {a}, [=](Graph<T>& g, std::size_t self) {
    const auto& dc = g.grad_buffer(self);
    auto& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
  });
}

/// Sum of all entries as a one-element tensor.
template <class T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  const std::size_t ia = a.id;
  return a.graph->emit("sum", Tensor<T>({1}, {s}), {a}, [=](Graph<T>& g, std::size_t self) {
    const T dc = g.grad_buffer(self)[0];
    auto& d = g.grad_buffer(ia);
    for (auto& x : d) x += dc;
  });
}

/// Mean token cross-entropy of `logits` (n×V) against `targets`; entries
/// equal to kIgnore are skipped. Throws InputError when nothing is scored.
inline constexpr long kIgnore = -1;

template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<long>& targets, bool mean = true) {
  detail::require_matrix("cross_entropy", logits);
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  std::size_t count = 0;
  for (long t : targets) {
    if (t == kIgnore) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    }
    ++count;
  }
  if (count == 0) throw InputError("cross_entropy: no target positions to score");
  const auto& lv = logits.value();
  auto probs = std::make_shared<std::vector<T>>(n * v, T(0));
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == kIgnore) continue;
    const T* row = lv.data().data() + i * v;
    detail::softmax_prefix(row, probs->data() + i * v, v, v);
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    total += std::log(s) + mx - row[targets[i]];
  }
  const T norm = mean ? T(1) / T(count) : T(1);
  const std::size_t il = logits.id;
  return logits.graph->emit(
      "cross_entropy", Tensor<T>({1}, {total * norm}), {logits},
      [=, targets = targets](Graph<T>& g, std::size_t self) {
        const T dc = g.grad_buffer(self)[0] * norm;
        auto& d = g.grad_buffer(il);
        for (std::size_t i = 0; i < n; ++i) {
          if (targets[i] == kIgnore) continue;
          for (std::size_t j = 0; j < v; ++j) d[i * v + j] += dc * (*probs)[i * v + j];
          d[i * v + static_cast<std::size_t>(targets[i])] -= dc;
        }
      });
}

}  // namespace alignvlm
