#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "alignvlm/autograd.hpp"
#include "alignvlm/errors.hpp"
#include "alignvlm/image.hpp"
#include "alignvlm/rng.hpp"

namespace alignvlm {

struct GridShape {
  std::uint32_t rows = 1;
  std::uint32_t cols = 1;
  std::uint32_t tiles() const noexcept { return rows * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

struct TilingConfig {
  std::uint32_t tile_side = 56;
  std::uint32_t patch_side = 14;
  std::uint32_t max_tiles = 9;
  std::vector<GridShape> ratio_set;

  std::uint32_t patches_per_side() const { return tile_side / patch_side; }
  std::uint32_t patches_per_tile() const { return patches_per_side() * patches_per_side(); }

  /// All (rows, cols) grids with rows·cols <= max_tiles, rows-major order.
  static std::vector<GridShape> all_grids(std::uint32_t max_tiles) {
    std::vector<GridShape> out;
    for (std::uint32_t r = 1; r <= max_tiles; ++r)
      for (std::uint32_t c = 1; r * c <= max_tiles; ++c) out.push_back({r, c});
    return out;
  }

  static TilingConfig standard(std::uint32_t tile_side = 56, std::uint32_t patch_side = 14,
                               std::uint32_t max_tiles = 9) {
    TilingConfig cfg{tile_side, patch_side, max_tiles, all_grids(max_tiles)};
    cfg.validate();
    return cfg;
  }

  void validate() const {
    if (patch_side == 0 || tile_side == 0) throw ConfigError("tile and patch sides must be positive");
    if (tile_side % patch_side != 0) {
      throw ConfigError("tile_side " + std::to_string(tile_side) +
                        " is not divisible by patch_side " + std::to_string(patch_side));
    }
    if (ratio_set.empty()) throw ConfigError("tiling ratio_set is empty");
    for (const auto& g : ratio_set) {
      if (g.rows == 0 || g.cols == 0 || g.tiles() > max_tiles) {
        throw ConfigError("grid " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                          " exceeds max_tiles " + std::to_string(max_tiles));
      }
    }
  }
};

/// Fraction of the grid canvas covered by the image after an
/// aspect-preserving fit. Equal to min(h·c, w·r) / max(h·c, w·r).
inline double grid_coverage(std::uint32_t width, std::uint32_t height, GridShape g) {
  const double a = double(height) * g.cols, b = double(width) * g.rows;
  return std::min(a, b) / std::max(a, b);
}

/// Picks the grid with the largest coverage; ties go to fewer tiles, then to
/// the squarer grid, then to fewer rows. Coverage is compared exactly as a
/// rational number.
inline GridShape select_grid(std::uint32_t width, std::uint32_t height, const TilingConfig& cfg) {
  if (cfg.ratio_set.empty()) throw ConfigError("tiling ratio_set is empty");
  if (width == 0 || height == 0) throw InputError("image has zero area");
  using i128 = __int128;
  auto frac = [&](GridShape g) {
    const i128 a = i128(height) * g.cols, b = i128(width) * g.rows;
    return std::pair<i128, i128>{std::min(a, b), std::max(a, b)};
  };
  auto diff = [](GridShape g) { return g.rows > g.cols ? g.rows - g.cols : g.cols - g.rows; };
  GridShape best = cfg.ratio_set.front();
  for (const auto& g : cfg.ratio_set) {
    const auto [n1, d1] = frac(g);
    const auto [n2, d2] = frac(best);
    const i128 lhs = n1 * d2, rhs = n2 * d1;
    bool better = lhs > rhs;
    if (lhs == rhs) {
      if (g.tiles() != best.tiles()) better = g.tiles() < best.tiles();
      else if (diff(g) != diff(best)) better = diff(g) < diff(best);
      else better = g.rows < best.rows;
    }
    if (better) best = g;
  }
  return best;
}

/// Bilinear resize with half-pixel centres; same-size resize is an exact copy.
inline Image resize_bilinear(const Image& src, std::uint32_t width, std::uint32_t height) {
  if (src.empty() || width == 0 || height == 0) throw InputError("resize of zero-area image");
  Image out(width, height, src.channels);
  if (width == src.width && height == src.height) {
    out.pixels = src.pixels;
    return out;
  }
  const double sx = double(src.width) / width, sy = double(src.height) / height;
  for (std::uint32_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(src.height - 1));
    const auto y0 = static_cast<std::uint32_t>(fy);
    const std::uint32_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (std::uint32_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(src.width - 1));
      const auto x0 = static_cast<std::uint32_t>(fx);
      const std::uint32_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (std::uint32_t c = 0; c < src.channels; ++c) {
        const double top = src.at(c, y0, x0) * (1 - wx) + src.at(c, y0, x1) * wx;
        const double bot = src.at(c, y1, x0) * (1 - wx) + src.at(c, y1, x1) * wx;
        out.at(c, y, x) = static_cast<std::uint8_t>(std::lround(top * (1 - wy) + bot * wy));
      }
    }
  }
  return out;
}

/// Aspect-preserving fit into the grid canvas, anchored top-left, zero padding.
inline Image fit_to_canvas(const Image& img, GridShape grid, const TilingConfig& cfg) {
  if (img.empty()) throw InputError("image has zero area");
  const std::uint32_t cw = grid.cols * cfg.tile_side, ch = grid.rows * cfg.tile_side;
  const double scale = std::min(double(cw) / img.width, double(ch) / img.height);
  const auto rw = std::clamp<std::uint32_t>(
      static_cast<std::uint32_t>(std::lround(img.width * scale)), 1, cw);
  const auto rh = std::clamp<std::uint32_t>(
      static_cast<std::uint32_t>(std::lround(img.height * scale)), 1, ch);
  const Image resized = resize_bilinear(img, rw, rh);
  Image canvas(cw, ch, img.channels);
  for (std::uint32_t c = 0; c < img.channels; ++c)
    for (std::uint32_t y = 0; y < rh; ++y)
      for (std::uint32_t x = 0; x < rw; ++x) canvas.at(c, y, x) = resized.at(c, y, x);
  return canvas;
}

struct TileGrid {
  GridShape grid;
  std::uint32_t tile_side = 0;
  std::vector<Image> tiles;  // row-major tile order
};

inline TileGrid split_tiles(const Image& canvas, GridShape grid, std::uint32_t tile_side) {
  if (canvas.width != grid.cols * tile_side || canvas.height != grid.rows * tile_side) {
    throw ShapeError("canvas does not match grid geometry");
  }
  TileGrid out{grid, tile_side, {}};
  for (std::uint32_t tr = 0; tr < grid.rows; ++tr) {
    for (std::uint32_t tc = 0; tc < grid.cols; ++tc) {
      Image tile(tile_side, tile_side, canvas.channels);
      for (std::uint32_t c = 0; c < canvas.channels; ++c)
        for (std::uint32_t y = 0; y < tile_side; ++y)
          for (std::uint32_t x = 0; x < tile_side; ++x)
            tile.at(c, y, x) = canvas.at(c, tr * tile_side + y, tc * tile_side + x);
      out.tiles.push_back(std::move(tile));
    }
  }
  return out;
}

inline TileGrid tile_image(const Image& img, GridShape grid, const TilingConfig& cfg) {
  if (img.empty()) throw InputError("image has zero area");
  if (grid.tiles() == 0 || grid.tiles() > cfg.max_tiles) {
    throw ConfigError("grid has " + std::to_string(grid.tiles()) + " tiles, limit " +
                      std::to_string(cfg.max_tiles));
  }
  return split_tiles(fit_to_canvas(img, grid, cfg), grid, cfg.tile_side);
}

/// Inverse of split_tiles.
inline Image reassemble(const TileGrid& tg) {
  if (tg.tiles.size() != tg.grid.tiles()) throw ShapeError("tile count does not match grid");
  const std::uint32_t channels = tg.tiles.empty() ? 1 : tg.tiles.front().channels;
  Image canvas(tg.grid.cols * tg.tile_side, tg.grid.rows * tg.tile_side, channels);
  for (std::uint32_t t = 0; t < tg.tiles.size(); ++t) {
    const std::uint32_t tr = t / tg.grid.cols, tc = t % tg.grid.cols;
    for (std::uint32_t c = 0; c < channels; ++c)
      for (std::uint32_t y = 0; y < tg.tile_side; ++y)
        for (std::uint32_t x = 0; x < tg.tile_side; ++x)
          canvas.at(c, tr * tg.tile_side + y, tc * tg.tile_side + x) = tg.tiles[t].at(c, y, x);
  }
  return canvas;
}

/// Splits a square tile into patch_side² blocks in row-major order. Each
/// patch is flattened channel-major and scaled to [0, 1].
template <class T>
Tensor<T> patchify(const Image& tile, std::uint32_t patch_side) {
  if (tile.width != tile.height) throw ShapeError("patchify expects a square tile");
  if (patch_side == 0 || tile.width % patch_side != 0) {
    throw ConfigError("tile side " + std::to_string(tile.width) +
                      " is not divisible by patch side " + std::to_string(patch_side));
  }
  const std::uint32_t per_side = tile.width / patch_side;
  const std::size_t dim = std::size_t(patch_side) * patch_side * tile.channels;
  Tensor<T> out({std::size_t(per_side) * per_side, dim});
  for (std::uint32_t pr = 0; pr < per_side; ++pr) {
    for (std::uint32_t pc = 0; pc < per_side; ++pc) {
      T* dst = out.data().data() + (pr * per_side + pc) * dim;
      for (std::uint32_t c = 0; c < tile.channels; ++c)
        for (std::uint32_t y = 0; y < patch_side; ++y)
          for (std::uint32_t x = 0; x < patch_side; ++x)
            *dst++ = T(tile.at(c, pr * patch_side + y, pc * patch_side + x)) / T(255);
    }
  }
  return out;
}

struct PatchPos {
  std::uint32_t tile = 0;
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  friend bool operator==(const PatchPos&, const PatchPos&) = default;
};

/// Patch pixels for a whole image plus where every patch came from.
template <class T>
struct PatchBatch {
  Tensor<T> patches;  // (num_patches × patch_dim)
  GridShape grid;
  std::vector<std::size_t> per_tile_counts;
  std::vector<PatchPos> layout;
  std::uint32_t patches_per_row = 0;
};

template <class T>
PatchBatch<T> prepare_patches(const Image& img, const TilingConfig& cfg) {
  const GridShape grid = select_grid(img.width, img.height, cfg);
  const TileGrid tg = tile_image(img, grid, cfg);
  const std::uint32_t per_side = cfg.patches_per_side();
  const std::size_t dim = std::size_t(cfg.patch_side) * cfg.patch_side * img.channels;
  PatchBatch<T> batch;
  batch.grid = grid;
  batch.patches_per_row = per_side;
  batch.patches = Tensor<T>({tg.tiles.size() * per_side * per_side, dim});
  std::size_t row = 0;
  for (std::uint32_t t = 0; t < tg.tiles.size(); ++t) {
    const Tensor<T> p = patchify<T>(tg.tiles[t], cfg.patch_side);
    std::copy(p.data().begin(), p.data().end(), batch.patches.data().begin() + row * dim);
    row += p.rows();
    batch.per_tile_counts.push_back(p.rows());
    for (std::uint32_t r = 0; r < per_side; ++r)
      for (std::uint32_t c = 0; c < per_side; ++c) batch.layout.push_back({t, r, c});
  }
  return batch;
}

/// Trainable stand-in for the vision tower: per patch
/// GELU(p · in_proj) · out_proj + pos[index within tile].
template <class T>
struct ToyEncoderParams {
  Tensor<T> in_proj;   // (patch_dim × hidden)
  Tensor<T> out_proj;  // (hidden × d)
  Tensor<T> pos;       // (patches_per_tile × d)

  /// `out_scale` multiplies the fan-in init of the output projection and so
  /// sets the typical feature norm.
  static ToyEncoderParams init(std::size_t patch_dim, std::size_t hidden, std::size_t d,
                               std::size_t patches_per_tile, Rng& rng, double out_scale = 1.0) {
    ToyEncoderParams p;
    p.in_proj = rng.normal_tensor<T>({patch_dim, hidden}, 1.0 / std::sqrt(double(patch_dim)));
    p.out_proj = rng.normal_tensor<T>({hidden, d}, out_scale / std::sqrt(double(hidden)));
    p.pos = rng.normal_tensor<T>({patches_per_tile, d}, 0.02);
    return p;
  }

  std::size_t patch_dim() const { return in_proj.rows(); }
  std::size_t feature_dim() const { return out_proj.cols(); }

  template <class F>
  void for_each_param(F&& f) {
    f("encoder.in_proj", in_proj);
    f("encoder.out_proj", out_proj);
    f("encoder.pos", pos);
  }
};

/// Encoded features F for one image.
template <class T>
struct PatchFeatures {
  Tensor<T> features;  // (num_patches × d)
  std::vector<std::size_t> per_tile_counts;
  std::vector<PatchPos> layout;
};

/// Works with const parameters (inference, nothing recorded for them) and
/// mutable ones (gradients flow into Tensor::grad when requires_grad is set).
template <class T, class Params>
  requires std::same_as<std::remove_const_t<Params>, ToyEncoderParams<T>>
Var<T> encode(Graph<T>& g, const PatchBatch<T>& batch, Params& params) {
  if (batch.patches.cols() != params.patch_dim()) {
    throw ShapeError("encoder expects patch vectors of length " +
                     std::to_string(params.patch_dim()) + ", got " +
                     std::to_string(batch.patches.cols()));
  }
  std::vector<std::size_t> pos_ids;
  pos_ids.reserve(batch.layout.size());
  for (const auto& p : batch.layout) {
    pos_ids.push_back(std::size_t(p.row) * batch.patches_per_row + p.col);
  }
  auto hidden = gelu(matmul(g.constant(batch.patches), g.param(params.in_proj)));
  auto feats = matmul(hidden, g.param(params.out_proj));
  return add(feats, gather_rows(g.param(params.pos), std::move(pos_ids)));
}

template <class T>
PatchFeatures<T> encode(const PatchBatch<T>& batch, const ToyEncoderParams<T>& params) {
  Graph<T> g;
  auto out = encode(g, batch, params);
  return {out.value(), batch.per_tile_counts, batch.layout};
}

}  // namespace alignvlm
