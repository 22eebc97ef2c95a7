#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "alignvlm/autograd.hpp"

namespace alignvlm {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `build` must construct the function on the given graph,
/// reading every tensor in `wrt` through Graph::param so that backward
/// deposits into Tensor::grad. The tensors are perturbed in place and
/// restored afterwards. The numeric derivative uses Ridders' method: h is
/// the largest step, and extrapolation over smaller steps picks the
/// estimate with the least internal error, so one h serves both smooth
/// and high-curvature paths.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-12).
template <class T>
GradCheckResult grad_check(const std::function<Var<T>(Graph<T>&)>& build,
                           const std::vector<Tensor<T>*>& wrt, T h) {
  if (!(h >= T(1e-6) && h <= T(1e-3))) {
    throw ConfigError("grad_check: step must lie in [1e-6, 1e-3]");
  }
  std::vector<bool> saved_flags;
  for (auto* t : wrt) {
    saved_flags.push_back(t->requires_grad);
    t->requires_grad = true;
    t->zero_grad();
  }
  {
    Graph<T> g;
    Var<T> out = build(g);
    if (out.value().size() != 1) {
      throw ShapeError("grad_check: function must be scalar-valued, got " +
                       shape_str(out.shape()));
    }
    g.backward(out);
  }
  auto eval = [&](std::size_t tensor, std::size_t index) {
    Graph<T> g;
    try {
      return static_cast<double>(build(g).value()[0]);
    } catch (const NumericError& e) {
      throw NumericError("grad_check: non-finite intermediate while perturbing tensor " +
                         std::to_string(tensor) + " coordinate " + std::to_string(index) +
                         ": " + e.what());
    }
  };

  GradCheckResult result;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    Tensor<T>& x = *wrt[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T orig = x[i];
      auto central = [&](T step) {
        x[i] = orig + step;
        const double fp = eval(k, i);
        x[i] = orig - step;
        const double fm = eval(k, i);
        x[i] = orig;
        return (fp - fm) / (2.0 * static_cast<double>(step));
      };
      // Ridders: a Neville tableau of central differences over steps
      // h, h/1.4, h/1.4^2, ..., keeping the entry with the smallest
      // estimated error and stopping once higher orders start to diverge.
      constexpr std::size_t kTab = 10;
      constexpr double kCon = 1.4, kCon2 = kCon * kCon;
      double a[kTab][kTab];
      double step = static_cast<double>(h);
      a[0][0] = central(static_cast<T>(step));
      double numeric = a[0][0], err = std::numeric_limits<double>::max();
      for (std::size_t c = 1; c < kTab; ++c) {
        step /= kCon;
        a[0][c] = central(static_cast<T>(step));
        double fac = kCon2;
        for (std::size_t r = 1; r <= c; ++r) {
          a[r][c] = (a[r - 1][c] * fac - a[r - 1][c - 1]) / (fac - 1.0);
          fac *= kCon2;
          const double e = std::max(std::abs(a[r][c] - a[r - 1][c]),
                                    std::abs(a[r][c] - a[r - 1][c - 1]));
          if (e <= err) {
            err = e;
            numeric = a[r][c];
          }
        }
        if (std::abs(a[c][c] - a[c - 1][c - 1]) >= 2.0 * err) break;
      }
      const double analytic = static_cast<double>(x.grad[i]);
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        throw NumericError("grad_check: non-finite derivative at tensor " +
                           std::to_string(k) + " coordinate " + std::to_string(i));
      }
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coords_checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = k;
        result.worst_index = i;
        result.analytic_at_worst = analytic;
        result.numeric_at_worst = numeric;
      }
    }
  }
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    wrt[k]->requires_grad = saved_flags[k];
    wrt[k]->clear_grad();
  }
  return result;
}

/// Single-input convenience form: `f` maps the bound input to a scalar.
template <class T>
GradCheckResult grad_check(const std::function<Var<T>(Graph<T>&, Var<T>)>& f, Tensor<T> x,
                           T h) {
  std::function<Var<T>(Graph<T>&)> build = [&](Graph<T>& g) { return f(g, g.param(x)); };
  return grad_check<T>(build, {&x}, h);
}

}  // namespace alignvlm
