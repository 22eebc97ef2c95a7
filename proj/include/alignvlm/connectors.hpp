#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "alignvlm/autograd.hpp"
#include "alignvlm/rng.hpp"
#include "alignvlm/vision.hpp"

namespace alignvlm {

/// Per-dimension [min, max] of a set of row vectors. A convex combination
/// of the rows must land inside these bounds (the converse does not hold).
template <class T>
struct HullBounds {
  std::vector<T> lo;
  std::vector<T> hi;

  static HullBounds of(const Tensor<T>& rows) {
    HullBounds b;
    const std::size_t v = rows.rows(), d = rows.cols();
    b.lo.assign(d, std::numeric_limits<T>::infinity());
    b.hi.assign(d, -std::numeric_limits<T>::infinity());
    for (std::size_t i = 0; i < v; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        b.lo[j] = std::min(b.lo[j], rows(i, j));
        b.hi[j] = std::max(b.hi[j], rows(i, j));
      }
    return b;
  }

  /// Number of coordinates of `x` outside [lo - tol, hi + tol].
  std::size_t violations(const Tensor<T>& x, T tol = T(0)) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j)
        if (x(i, j) < lo[j] - tol || x(i, j) > hi[j] + tol) ++n;
    return n;
  }
};

/// Frozen-or-trainable text embedding matrix E_text (V × D) with a cached
/// hull bound. Call refresh_bounds() after the weights change.
template <class T>
struct EmbeddingTable {
  Tensor<T> weights;
  HullBounds<T> bounds;

  EmbeddingTable() = default;
  explicit EmbeddingTable(Tensor<T> w) : weights(std::move(w)) {
    if (weights.rank() != 2 || weights.rows() < 2) {
      throw ConfigError("embedding table needs at least 2 rows, got " + shape_str(weights.shape()));
    }
    if (!weights.all_finite()) throw NumericError("embedding table has non-finite entries");
    refresh_bounds();
  }

  static EmbeddingTable random(std::size_t vocab, std::size_t dim, Rng& rng, double std = 0.02) {
    return EmbeddingTable(rng.normal_tensor<T>({vocab, dim}, std));
  }

  std::size_t vocab() const { return weights.rows(); }
  std::size_t dim() const { return weights.cols(); }
  void refresh_bounds() { bounds = HullBounds<T>::of(weights); }
  bool bounds_consistent() const {
    const auto fresh = HullBounds<T>::of(weights);
    return fresh.lo == bounds.lo && fresh.hi == bounds.hi;
  }
};

// ---------------------------------------------------------------------------
// ALIGN: P = softmax(LN_b(W2 · LN_a(W1 · f))), output = P · E_text per row.

template <class T>
struct AlignParams {
  Tensor<T> w1;  // (D × d)
  Tensor<T> ln_a_gamma, ln_a_beta;  // (D)
  Tensor<T> w2;  // (V × D)
  Tensor<T> ln_b_gamma, ln_b_beta;  // (V)
  // Empty when E_text is tied to the decoder's embedding table.
  Tensor<T> untied_table;

  std::size_t vocab() const { return w2.rows(); }
  std::size_t feature_dim() const { return w1.cols(); }
  std::size_t embed_dim() const { return w1.rows(); }
  bool tied() const { return untied_table.empty(); }

  template <class F>
  void for_each_param(F&& f) {
    f("connector.align.w1", w1);
    f("connector.align.ln_a_gamma", ln_a_gamma);
    f("connector.align.ln_a_beta", ln_a_beta);
    f("connector.align.w2", w2);
    f("connector.align.ln_b_gamma", ln_b_gamma);
    f("connector.align.ln_b_beta", ln_b_beta);
    if (!tied()) f("connector.align.untied_table", untied_table);
  }
};

/// W2 copies the language-model head; W1 is drawn N(0, 0.02²); both
/// layernorms start as the identity affine map.
template <class T>
AlignParams<T> init_align_from_head(const Tensor<T>& head, std::size_t feature_dim, Rng& rng,
                                    const EmbeddingTable<T>* table = nullptr,
                                    bool tie_table = true) {
  if (head.rank() != 2) throw ConfigError("LM head must be a (V × D) matrix");
  const std::size_t v = head.rows(), dm = head.cols();
  if (table && (table->vocab() != v || table->dim() != dm)) {
    throw ConfigError("LM head " + shape_str(head.shape()) + " does not match embedding table " +
                      shape_str(table->weights.shape()));
  }
  AlignParams<T> p;
  p.w1 = rng.normal_tensor<T>({dm, feature_dim}, 0.02);
  p.ln_a_gamma = Tensor<T>::vector(dm, T(1));
  p.ln_a_beta = Tensor<T>::vector(dm, T(0));
  p.w2 = head;
  p.w2.requires_grad = false;
  p.w2.clear_grad();
  p.ln_b_gamma = Tensor<T>::vector(v, T(1));
  p.ln_b_beta = Tensor<T>::vector(v, T(0));
  if (!tie_table) {
    if (!table) throw ConfigError("untied ALIGN needs an embedding table to copy");
    p.untied_table = table->weights;
    p.untied_table.requires_grad = false;
    p.untied_table.clear_grad();
  }
  return p;
}

/// Which vocabulary rows survive a pruned evaluation.
template <class T>
struct VocabMask {
  Tensor<T> keep;  // (V) of 0/1
  bool renormalize = true;
};

template <class T>
struct AlignOutput {
  Var<T> probs;    // (n × V)
  Var<T> aligned;  // (n × D)
};

/// Row-wise weighted sum P · E.
template <class T>
Var<T> align_weighted_sum(Var<T> probs, Var<T> table) {
  if (probs.cols() != table.rows()) {
    throw ConfigError("vocabulary mismatch: distribution over " + std::to_string(probs.cols()) +
                      " tokens, embedding table has " + std::to_string(table.rows()) + " rows");
  }
  return matmul(probs, table);
}

template <class T, class Params>
  requires std::same_as<std::remove_const_t<Params>, AlignParams<T>>
AlignOutput<T> align_forward(Graph<T>& g, Var<T> feats, Params& p, Var<T> table,
                             const VocabMask<T>* mask = nullptr) {
  if (feats.cols() != p.feature_dim()) {
    throw ShapeError("ALIGN expects features of width " + std::to_string(p.feature_dim()) +
                     ", got " + std::to_string(feats.cols()));
  }
  if (!p.tied()) table = g.param(p.untied_table);
  if (table.rows() != p.vocab() || table.cols() != p.embed_dim()) {
    throw ConfigError("vocabulary mismatch between W2 " + shape_str(p.w2.shape()) +
                      " and E_text " + shape_str(table.shape()));
  }
  auto h = layernorm(matmul_nt(feats, g.param(p.w1)), g.param(p.ln_a_gamma), g.param(p.ln_a_beta));
  auto logits = layernorm(matmul_nt(h, g.param(p.w2)), g.param(p.ln_b_gamma), g.param(p.ln_b_beta));
  auto probs = softmax_rows(logits);
  if (mask) {
    if (mask->keep.size() != p.vocab()) throw ShapeError("vocabulary mask has wrong length");
    Tensor<T> m({probs.rows(), probs.cols()});
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = mask->keep[j];
    probs = mul(probs, g.constant(std::move(m)));
    if (mask->renormalize) probs = normalize_rows(probs);
  }
  return {probs, align_weighted_sum(probs, table)};
}

// ---------------------------------------------------------------------------
// MLP: σ(W f + b)

enum class Activation { ReLU, GELU };

template <class T>
struct MlpParams {
  Tensor<T> w;  // (D × d)
  Tensor<T> b;  // (D)
  Activation activation = Activation::ReLU;

  static MlpParams init(std::size_t feature_dim, std::size_t embed_dim, Rng& rng,
                        Activation act = Activation::ReLU) {
    MlpParams p;
    p.w = rng.normal_tensor<T>({embed_dim, feature_dim}, 1.0 / std::sqrt(double(feature_dim)));
    p.b = Tensor<T>::vector(embed_dim, T(0));
    p.activation = act;
    return p;
  }

  template <class F>
  void for_each_param(F&& f) {
    f("connector.mlp.w", w);
    f("connector.mlp.b", b);
  }
};

template <class T, class Params>
  requires std::same_as<std::remove_const_t<Params>, MlpParams<T>>
Var<T> mlp_forward(Graph<T>& g, Var<T> feats, Params& p) {
  if (feats.cols() != p.w.cols()) {
    throw ShapeError("MLP expects features of width " + std::to_string(p.w.cols()) + ", got " +
                     std::to_string(feats.cols()));
  }
  auto pre = add_rowvec(matmul_nt(feats, g.param(p.w)), g.param(p.b));
  return p.activation == Activation::ReLU ? relu(pre) : gelu(pre);
}

// ---------------------------------------------------------------------------
// Visual embedding table: softmax(W_VET f)ᵀ E_VET

template <class T>
struct VetParams {
  Tensor<T> w;      // (K × d)
  Tensor<T> table;  // (K × D)

  static VetParams init(std::size_t feature_dim, std::size_t embed_dim, std::size_t k, Rng& rng) {
    if (k < 2) throw ConfigError("visual embedding table needs K >= 2");
    VetParams p;
    p.w = rng.normal_tensor<T>({k, feature_dim}, 1.0 / std::sqrt(double(feature_dim)));
    p.table = rng.normal_tensor<T>({k, embed_dim}, 0.02);
    return p;
  }

  template <class F>
  void for_each_param(F&& f) {
    f("connector.vet.w", w);
    f("connector.vet.table", table);
  }
};

template <class T>
struct VetOutput {
  Var<T> probs;   // (n × K)
  Var<T> tokens;  // (n × D)
};

template <class T, class Params>
  requires std::same_as<std::remove_const_t<Params>, VetParams<T>>
VetOutput<T> vet_forward(Graph<T>& g, Var<T> feats, Params& p) {
  if (p.w.rows() != p.table.rows()) {
    throw ConfigError("VET logits produce " + std::to_string(p.w.rows()) +
                      " entries but the table has " + std::to_string(p.table.rows()) + " rows");
  }
  if (p.w.rows() < 2) throw ConfigError("visual embedding table needs K >= 2");
  if (feats.cols() != p.w.cols()) {
    throw ShapeError("VET expects features of width " + std::to_string(p.w.cols()) + ", got " +
                     std::to_string(feats.cols()));
  }
  auto probs = softmax_rows(matmul_nt(feats, g.param(p.w)));
  return {probs, matmul(probs, g.param(p.table))};
}

// ---------------------------------------------------------------------------
// Perceiver resampler: one single-head cross-attention from L learned
// latents over the projected patch features, then an output projection.

template <class T>
struct PerceiverParams {
  Tensor<T> latents;   // (L × D)
  Tensor<T> key;       // (D × d)
  Tensor<T> value;     // (D × d)
  Tensor<T> out_proj;  // (D × D)

  static PerceiverParams init(std::size_t feature_dim, std::size_t embed_dim, std::size_t num_latents,
                              Rng& rng) {
    if (num_latents == 0) throw ConfigError("perceiver needs at least one latent");
    PerceiverParams p;
    p.latents = rng.normal_tensor<T>({num_latents, embed_dim}, 1.0);
    p.key = rng.normal_tensor<T>({embed_dim, feature_dim}, 1.0 / std::sqrt(double(feature_dim)));
    p.value = rng.normal_tensor<T>({embed_dim, feature_dim}, 1.0 / std::sqrt(double(feature_dim)));
    p.out_proj = rng.normal_tensor<T>({embed_dim, embed_dim}, 1.0 / std::sqrt(double(embed_dim)));
    return p;
  }

  std::size_t num_latents() const { return latents.rank() == 2 ? latents.rows() : 0; }

  template <class F>
  void for_each_param(F&& f) {
    f("connector.perceiver.latents", latents);
    f("connector.perceiver.key", key);
    f("connector.perceiver.value", value);
    f("connector.perceiver.out_proj", out_proj);
  }
};

template <class T>
struct PerceiverOutput {
  Var<T> attention;  // (L × n)
  Var<T> tokens;     // (L × D)
};

template <class T, class Params>
  requires std::same_as<std::remove_const_t<Params>, PerceiverParams<T>>
PerceiverOutput<T> perceiver_forward(Graph<T>& g, Var<T> feats, Params& p) {
  if (p.num_latents() == 0) throw ConfigError("perceiver needs at least one latent");
  if (feats.cols() != p.key.cols()) {
    throw ShapeError("perceiver expects features of width " + std::to_string(p.key.cols()) +
                     ", got " + std::to_string(feats.cols()));
  }
  const T inv_sqrt = T(1) / std::sqrt(T(p.latents.cols()));
  auto keys = matmul_nt(feats, g.param(p.key));
  auto values = matmul_nt(feats, g.param(p.value));
  auto attn = softmax_rows(scale(matmul_nt(g.param(p.latents), keys), inv_sqrt));
  return {attn, matmul_nt(matmul(attn, values), g.param(p.out_proj))};
}

// ---------------------------------------------------------------------------
// H-Reducer (1×4): concatenate four horizontally adjacent patch features and
// project. A non-overlapping 1×4 convolution is exactly this map.

template <class T>
struct HReducerParams {
  std::size_t group = 4;
  Tensor<T> merge;  // (D × group·d)

  static HReducerParams init(std::size_t feature_dim, std::size_t embed_dim, Rng& rng,
                             std::size_t group = 4) {
    HReducerParams p;
    p.group = group;
    p.merge = rng.normal_tensor<T>({embed_dim, group * feature_dim},
                                   1.0 / std::sqrt(double(group * feature_dim)));
    return p;
  }

  template <class F>
  void for_each_param(F&& f) {
    f("connector.hreducer.merge", merge);
  }
};

/// Patch indices grouped into horizontal runs of `group` (tile order, then
/// row, then column).
inline std::vector<std::size_t> horizontal_groups(const std::vector<PatchPos>& layout,
                                                  std::size_t group) {
  std::uint32_t tiles = 0, rows = 0, cols = 0;
  for (const auto& p : layout) {
    tiles = std::max(tiles, p.tile + 1);
    rows = std::max(rows, p.row + 1);
    cols = std::max(cols, p.col + 1);
  }
  if (group == 0 || cols % group != 0) {
    throw ConfigError("patch row width " + std::to_string(cols) + " is not divisible by " +
                      std::to_string(group));
  }
  std::vector<std::size_t> where(std::size_t(tiles) * rows * cols, layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& p = layout[i];
    where[(std::size_t(p.tile) * rows + p.row) * cols + p.col] = i;
  }
  for (std::size_t w : where) {
    if (w == layout.size()) throw ShapeError("patch layout is not a full grid");
  }
  return where;  // already ordered tile, row, col; consecutive runs form groups
}

template <class T, class Params>
  requires std::same_as<std::remove_const_t<Params>, HReducerParams<T>>
Var<T> hreducer_forward(Graph<T>& g, Var<T> feats, const std::vector<PatchPos>& layout,
                        Params& p) {
  if (layout.size() != feats.rows()) throw ShapeError("layout does not cover every patch");
  const std::size_t d = feats.cols();
  if (p.merge.cols() != p.group * d) {
    throw ShapeError("H-Reducer merge expects " + std::to_string(p.merge.cols()) +
                     " inputs, got " + std::to_string(p.group) + "x" + std::to_string(d));
  }
  auto order = horizontal_groups(layout, p.group);
  const std::size_t n = order.size();
  auto grouped = reshape(gather_rows(feats, std::move(order)), {n / p.group, p.group * d});
  return matmul_nt(grouped, g.param(p.merge));
}

// ---------------------------------------------------------------------------

enum class ConnectorKind { Align, Mlp, Vet, Perceiver, HReducer };

inline std::string_view connector_name(ConnectorKind k) {
  switch (k) {
    case ConnectorKind::Align: return "align";
    case ConnectorKind::Mlp: return "mlp";
    case ConnectorKind::Vet: return "vet";
    case ConnectorKind::Perceiver: return "perceiver";
    case ConnectorKind::HReducer: return "hreducer";
  }
  return "?";
}

inline ConnectorKind parse_connector(std::string_view name) {
  for (auto k : {ConnectorKind::Align, ConnectorKind::Mlp, ConnectorKind::Vet,
                 ConnectorKind::Perceiver, ConnectorKind::HReducer}) {
    if (connector_name(k) == name) return k;
  }
  throw ConfigError("unknown connector '" + std::string(name) +
                    "' (expected align|mlp|vet|perceiver|hreducer)");
}

inline constexpr ConnectorKind kAllConnectors[] = {ConnectorKind::Align, ConnectorKind::Mlp,
                                                   ConnectorKind::Vet, ConnectorKind::Perceiver,
                                                   ConnectorKind::HReducer};

template <class T>
using ConnectorParams = std::variant<AlignParams<T>, MlpParams<T>, VetParams<T>,
                                     PerceiverParams<T>, HReducerParams<T>>;

template <class T>
ConnectorKind kind_of(const ConnectorParams<T>& p) {
  return static_cast<ConnectorKind>(p.index());
}

template <class T>
struct ConnectorOutput {
  Var<T> tokens;                  // vision tokens fed to the decoder
  std::optional<Var<T>> probs;    // ALIGN vocabulary distribution
};

template <class T, class Params>
  requires std::same_as<std::remove_const_t<Params>, ConnectorParams<T>>
ConnectorOutput<T> connector_forward(Graph<T>& g, Var<T> feats, const std::vector<PatchPos>& layout,
                                     Params& params, Var<T> text_table,
                                     const VocabMask<T>* mask = nullptr) {
  return std::visit(
      [&](auto& p) -> ConnectorOutput<T> {
        using P = std::remove_cvref_t<decltype(p)>;
        if constexpr (std::is_same_v<P, AlignParams<T>>) {
          auto out = align_forward(g, feats, p, text_table, mask);
          return {out.aligned, out.probs};
        } else if constexpr (std::is_same_v<P, MlpParams<T>>) {
          return {mlp_forward(g, feats, p), std::nullopt};
        } else if constexpr (std::is_same_v<P, VetParams<T>>) {
          return {vet_forward(g, feats, p).tokens, std::nullopt};
        } else if constexpr (std::is_same_v<P, PerceiverParams<T>>) {
          return {perceiver_forward(g, feats, p).tokens, std::nullopt};
        } else {
          return {hreducer_forward(g, feats, layout, p), std::nullopt};
        }
      },
      params);
}

template <class T, class F>
void for_each_param(ConnectorParams<T>& params, F&& f) {
  std::visit([&](auto& p) { p.for_each_param(f); }, params);
}

}  // namespace alignvlm
