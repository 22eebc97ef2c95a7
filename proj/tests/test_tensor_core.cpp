#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "alignvlm/autograd.hpp"
#include "alignvlm/grad_check.hpp"
#include "alignvlm/rng.hpp"

using namespace alignvlm;
using Catch::Approx;

namespace {

Tensor<double> random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  return rng.normal_tensor<double>({r, c}, scale);
}

}  // namespace

TEST_CASE("matmul examples", "[tensor_core]") {
  Graph<double> g;
  auto eye = g.constant(Tensor<double>::from_rows({{1, 0}, {0, 1}}));
  auto b = g.constant(Tensor<double>::from_rows({{3, 4}, {5, 6}}));
  CHECK(matmul(eye, b).value() == b.value());

  // [[1,2],[3,4]] x [[0,1],[1,0]] swaps columns.
  auto a = g.constant(Tensor<double>::from_rows({{1, 2}, {3, 4}}));
  auto swap = g.constant(Tensor<double>::from_rows({{0, 1}, {1, 0}}));
  CHECK(matmul(a, swap).value() == Tensor<double>::from_rows({{2, 1}, {4, 3}}));

  auto zero = g.constant(Tensor<double>::matrix(3, 2));
  auto c = matmul(zero, a).value();
  for (double v : c.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul reports both shapes on mismatch", "[tensor_core]") {
  Graph<double> g;
  auto a = g.constant(Tensor<double>::matrix(2, 3));
  auto b = g.constant(Tensor<double>::matrix(2, 3));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2x3)") != std::string::npos);
    CHECK(msg.find("x (2x3)") != std::string::npos);
  }
}

TEST_CASE("layernorm examples", "[tensor_core]") {
  Graph<double> g;
  auto gamma = g.constant(Tensor<double>::vector(3, 1.0));
  auto beta = g.constant(Tensor<double>::vector(3, 0.0));

  auto constant = layernorm(g.constant(Tensor<double>::from_rows({{7, 7, 7}})), gamma, beta);
  for (double v : constant.value().data()) CHECK(v == 0.0);

  // Closed form: mean 2, population variance 2/3, so (x - 2) / sqrt(2/3).
  auto y = layernorm(g.constant(Tensor<double>::from_rows({{1, 2, 3}})), gamma, beta, 1e-12);
  const double expect = 1.0 / std::sqrt(2.0 / 3.0);
  CHECK(y.value()[0] == Approx(-expect).margin(1e-9));
  CHECK(y.value()[1] == Approx(0.0).margin(1e-9));
  CHECK(y.value()[2] == Approx(expect).margin(1e-9));
  CHECK(y.value()[2] == Approx(1.2247).margin(1e-4));

  auto zero_gamma = g.constant(Tensor<double>::vector(3, 0.0));
  auto b = g.constant(Tensor<double>::from_vector({0.5, -1.0, 2.0}));
  auto z = layernorm(g.constant(Tensor<double>::from_rows({{1, 5, 2}, {9, -3, 4}})),
                     zero_gamma, b);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(z.value()(r, c) == b.value()[c]);
}

TEST_CASE("layernorm guards", "[tensor_core]") {
  Graph<double> g;
  auto x = g.constant(Tensor<double>::from_rows({{1}}));
  auto one = g.constant(Tensor<double>::vector(1, 1.0));
  auto zero = g.constant(Tensor<double>::vector(1, 0.0));
  CHECK_THROWS_AS(layernorm(x, one, zero, 0.0), ConfigError);
  CHECK_THROWS_AS(layernorm(x, one, zero, 1e-5), ShapeError);
}

TEST_CASE("softmax examples", "[tensor_core]") {
  Graph<double> g;
  auto u = softmax_rows(g.constant(Tensor<double>::from_rows({{0, 0, 0}})));
  for (double v : u.value().data()) CHECK(v == Approx(1.0 / 3.0).epsilon(1e-15));

  auto big = softmax_rows(g.constant(Tensor<double>::from_rows({{1e9, 0, 0}})));
  CHECK(big.value()[0] == Approx(1.0).margin(1e-9));
  CHECK(big.value()[1] == Approx(0.0).margin(1e-9));

  // Independent oracle: direct exponentials without max subtraction.
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  const double oracle[3] = {static_cast<double>(std::exp(1.0L) / z),
                            static_cast<double>(std::exp(2.0L) / z),
                            static_cast<double>(std::exp(3.0L) / z)};
  auto s = softmax_rows(g.constant(Tensor<double>::from_rows({{1, 2, 3}})));
  const double frozen[3] = {0.09003, 0.24473, 0.66524};
  for (int i = 0; i < 3; ++i) {
    CHECK(oracle[i] == Approx(frozen[i]).margin(1e-5));
    CHECK(s.value()[i] == Approx(oracle[i]).margin(1e-12));
  }
}

TEST_CASE("softmax rows stay on the simplex for large logits", "[tensor_core][property]") {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const double magnitude = std::pow(10.0, rng.uniform(-2.0, 4.0));
    const std::size_t v = static_cast<std::size_t>(rng.uniform_int(2, 64));
    Graph<double> g;
    auto y = softmax_rows(g.constant(random_matrix(rng, 1, v, magnitude))).value();
    double s = 0, mn = 1;
    for (double p : y.data()) {
      s += p;
      mn = std::min(mn, p);
    }
    REQUIRE(mn >= 0.0);
    REQUIRE(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("softmax is shift invariant per row", "[tensor_core][property]") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_matrix(rng, 3, 9, 3.0);
    auto shifted = x;
    for (std::size_t r = 0; r < 3; ++r) {
      const double c = rng.uniform(-50, 50);
      for (auto& v : shifted.row(r)) v += c;
    }
    Graph<double> g;
    auto a = softmax_rows(g.constant(x)).value();
    auto b = softmax_rows(g.constant(shifted)).value();
    REQUIRE(max_abs_diff(a, b) <= 1e-9);
  }
}

TEST_CASE("layernorm output statistics", "[tensor_core][property]") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(2, 40));
    Graph<double> g;
    auto x = g.constant(random_matrix(rng, 4, d, rng.uniform(0.5, 20.0)));
    auto y = layernorm(x, g.constant(Tensor<double>::vector(d, 1.0)),
                       g.constant(Tensor<double>::vector(d, 0.0)), 1e-5)
                 .value();
    const auto& xv = x.value();
    for (std::size_t r = 0; r < 4; ++r) {
      // Output variance is s2 / (s2 + eps); rows need s2 >= 0.1 for the 1e-4 band.
      double in_mean = 0, in_var = 0;
      for (double v : xv.row(r)) in_mean += v;
      in_mean /= double(d);
      for (double v : xv.row(r)) in_var += (v - in_mean) * (v - in_mean);
      if (in_var / double(d) < 0.1) continue;
      double mean = 0, var = 0;
      for (double v : y.row(r)) mean += v;
      mean /= double(d);
      for (double v : y.row(r)) var += (v - mean) * (v - mean);
      var /= double(d);
      REQUIRE(std::abs(mean) <= 1e-6);
      REQUIRE(std::abs(var - 1.0) <= 1e-4);
    }
  }
}

TEST_CASE("backward examples", "[tensor_core]") {
  SECTION("identity") {
    Tensor<double> x({1}, {2.5});
    x.requires_grad = true;
    Graph<double> g;
    auto v = g.param(x);
    g.backward(v);
    CHECK(x.grad[0] == 1.0);
  }
  SECTION("square") {
    Tensor<double> x({1}, {3.0});
    x.requires_grad = true;
    Graph<double> g;
    auto v = g.param(x);
    g.backward(mul(v, v));
    CHECK(x.grad[0] == 6.0);
  }
  SECTION("disconnected leaf") {
    Tensor<double> x({1}, {3.0}), y({1}, {4.0});
    x.requires_grad = y.requires_grad = true;
    x.zero_grad();
    y.zero_grad();
    Graph<double> g;
    auto vx = g.param(x);
    g.param(y);
    g.backward(scale(vx, 2.0));
    CHECK(x.grad[0] == 2.0);
    CHECK(y.grad[0] == 0.0);
  }
  SECTION("second backward without reset is an error") {
    Tensor<double> x({1}, {3.0});
    x.requires_grad = true;
    Graph<double> g;
    auto out = mul(g.param(x), g.param(x));
    g.backward(out);
    CHECK_THROWS_AS(g.backward(out), GradientStateError);
    g.reset();
    x.zero_grad();
    g.backward(out);
    CHECK(x.grad[0] == 6.0);
  }
  SECTION("seed shape must match") {
    Graph<double> g;
    auto x = g.input(Tensor<double>::matrix(2, 2, 1.0), true);
    CHECK_THROWS_AS(g.backward(x, Tensor<double>::matrix(2, 3)), ShapeError);
  }
}

TEST_CASE("forward ops reject non-finite results", "[tensor_core]") {
  Graph<double> g;
  auto x = g.constant(Tensor<double>::from_rows({{1e308, 1e308}}));
  CHECK_THROWS_AS(scale(x, 10.0), NumericError);
}

TEST_CASE("gradient check is exact on linear maps", "[tensor_core][gradcheck]") {
  Rng rng(21);
  auto w = random_matrix(rng, 4, 3);
  std::function<Var<double>(Graph<double>&, Var<double>)> f =
      [&](Graph<double>& g, Var<double> x) { return sum(matmul(x, g.constant(w))); };
  auto res = grad_check(f, random_matrix(rng, 2, 4), 1e-4);
  CHECK(res.max_rel_error <= 1e-10);
}

TEST_CASE("gradient check over every op", "[tensor_core][gradcheck]") {
  Rng rng(22);
  const double h = 1e-5;
  std::vector<std::pair<const char*, std::function<Var<double>(Graph<double>&, Var<double>)>>>
      cases;
  auto b = random_matrix(rng, 4, 3);
  auto bt = random_matrix(rng, 5, 4);
  auto gam = rng.normal_tensor<double>({4}, 1.0);
  auto bet = rng.normal_tensor<double>({4}, 1.0);
  cases.push_back({"matmul", [&](auto& g, auto x) { return matmul(x, g.constant(b)); }});
  cases.push_back({"matmul_nt", [&](auto& g, auto x) { return matmul_nt(x, g.constant(bt)); }});
  cases.push_back({"gelu", [](auto&, auto x) { return gelu(x); }});
  cases.push_back({"relu", [](auto&, auto x) { return relu(scale(x, 1.0)); }});
  cases.push_back({"layernorm", [&](auto& g, auto x) {
                     return layernorm(x, g.constant(gam), g.constant(bet));
                   }});
  cases.push_back({"softmax_rows", [](auto&, auto x) { return softmax_rows(x); }});
  cases.push_back({"causal_softmax_rows", [](auto&, auto x) {
                     return causal_softmax_rows(matmul_nt(x, x));
                   }});
  cases.push_back({"normalize_rows", [](auto&, auto x) {
                     return normalize_rows(softmax_rows(x));
                   }});
  cases.push_back({"concat_slice", [](auto&, auto x) {
                     return slice_rows(concat_rows(x, scale(x, 2.0)), 1, 4);
                   }});
  cases.push_back({"gather_rows", [](auto&, auto x) { return gather_rows(x, {2, 0, 2}); }});
  auto rowvec = rng.normal_tensor<double>({6}, 1.0);
  cases.push_back({"reshape_add_rowvec", [&](auto& g, auto x) {
                     return add_rowvec(reshape(x, {2, 6}), g.constant(rowvec));
                   }});
  cases.push_back({"rotary", [](auto&, auto x) { return rotary(x); }});
  cases.push_back({"cross_entropy", [](auto&, auto x) {
                     return cross_entropy(x, std::vector<long>{1, kIgnore, 3});
                   }});
  for (auto& [name, op] : cases) {
    INFO(name);
    // Fixed random weights turn each op into a scalar that depends on
    // every output coordinate.
    Tensor<double> x = random_matrix(rng, 3, 4);
    Graph<double> shape_graph;
    const Shape out_shape = op(shape_graph, shape_graph.constant(x)).shape();
    Tensor<double> w = rng.normal_tensor<double>(out_shape, 1.0);
    std::function<Var<double>(Graph<double>&, Var<double>)> fixed =
        [&](Graph<double>& g, Var<double> in) {
          auto y = op(g, in);
          return sum(mul(y, g.constant(w)));
        };
    auto res = grad_check(fixed, x, h);
    CHECK(res.max_rel_error <= 1e-6);
  }
}

TEST_CASE("gradient check detects a corrupted vjp", "[tensor_core][gradcheck]") {
  std::function<Var<double>(Graph<double>&, Var<double>)> f = [](Graph<double>& g,
                                                                  Var<double> x) {
    Tensor<double> y = x.value();
    for (auto& v : y.data()) v = v * v;
    const std::size_t ix = x.id;
    auto sq = g.emit("broken_square", std::move(y), {x}, [ix](Graph<double>& gr, std::size_t self) {
      const auto& dy = gr.grad_buffer(self);
      const auto& xv = gr.value(ix);
      auto& dx = gr.grad_buffer(ix);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * 3.0 * xv[i];  // should be 2x
    });
    return sum(sq);
  };
  Rng rng(5);
  auto res = grad_check(f, rng.normal_tensor<double>({2, 3}, 1.0), 1e-5);
  CHECK(res.max_rel_error > 1e-2);
}

TEST_CASE("grad_check validates step size", "[tensor_core][gradcheck]") {
  std::function<Var<double>(Graph<double>&, Var<double>)> f = [](Graph<double>&,
                                                                  Var<double> x) { return sum(x); };
  CHECK_THROWS_AS(grad_check(f, Tensor<double>::matrix(1, 1), 1e-2), ConfigError);
}

TEST_CASE("forward determinism", "[tensor_core][property]") {
  auto run = [] {
    Rng rng(77);
    auto a = rng.normal_tensor<float>({5, 7}, 1.0);
    auto b = rng.normal_tensor<float>({7, 3}, 1.0);
    Graph<float> g;
    auto y = softmax_rows(layernorm(matmul(g.constant(a), g.constant(b)),
                                    g.constant(Tensor<float>::vector(3, 1.f)),
                                    g.constant(Tensor<float>::vector(3, 0.f))));
    return y.value();
  };
  const auto first = run();
  const auto second = run();
  CHECK(checksum(first) == checksum(second));
}
