#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "alignvlm/grad_check.hpp"
#include "alignvlm/model.hpp"
#include "alignvlm/rng.hpp"

namespace testing_support {

using namespace alignvlm;

/// Contracts a tensor-valued function against fixed random weights so that
/// every output coordinate reaches the scalar, then gradient-checks it.
inline GradCheckResult weighted_grad_check(const std::function<Var<double>(Graph<double>&)>& build,
                                           const std::vector<Tensor<double>*>& wrt, Rng& rng,
                                           double h = 1e-3) {
  Shape out_shape;
  {
    Graph<double> g;
    out_shape = build(g).shape();
  }
  const Tensor<double> w = rng.normal_tensor<double>(out_shape, 1.0);
  std::function<Var<double>(Graph<double>&)> scalar = [&](Graph<double>& g) {
    return sum(mul(build(g), g.constant(w)));
  };
  return grad_check<double>(scalar, wrt, h);
}

/// Tiny dimensions for checks that touch every parameter coordinate.
inline ModelDims tiny_dims() {
  ModelDims d;
  d.patch_side = 2;
  d.tile_side = 8;
  d.max_tiles = 4;
  d.encoder_hidden = 4;
  d.encoder_out_scale = 1.0;
  d.feature_dim = 3;
  d.embed_dim = 4;
  d.vocab = 7;
  d.vet_size = 3;
  d.num_latents = 2;
  d.blocks = 2;
  d.ffn_mult = 2;
  d.max_positions = 64;
  d.embed_init_std = 0.5;
  return d;
}

inline Image random_image(Rng& rng, std::uint32_t w, std::uint32_t h, std::uint32_t c = 1) {
  Image img(w, h, c);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

/// Fresh scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / ("alignvlm_" + name);
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testing_support
