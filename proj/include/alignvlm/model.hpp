#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "alignvlm/connectors.hpp"
#include "alignvlm/vision.hpp"

namespace alignvlm {

// Reserved token ids; glyph tokens start at kFirstGlyphToken.
inline constexpr std::size_t kBosToken = 0;
inline constexpr std::size_t kQueryToken = 1;
inline constexpr std::size_t kFirstGlyphToken = 2;

struct ModelDims {
  std::uint32_t patch_side = 14;
  std::uint32_t tile_side = 56;
  std::uint32_t max_tiles = 9;
  std::uint32_t channels = 1;
  std::size_t encoder_hidden = 64;
  double encoder_out_scale = 40.0;  // feature norm well above σ=3 noise norm (24 at d=64)
  std::size_t feature_dim = 64;  // d
  std::size_t embed_dim = 32;    // D
  std::size_t vocab = 256;       // V
  std::size_t vet_size = 128;    // K
  std::size_t num_latents = 16;  // L
  std::size_t blocks = 2;
  std::size_t ffn_mult = 4;
  std::size_t max_positions = 192;
  double embed_init_std = 0.1;  // E_text init
  Activation mlp_activation = Activation::ReLU;
  bool tie_align_table = true;

  std::size_t patch_dim() const { return std::size_t(patch_side) * patch_side * channels; }
  std::size_t patches_per_tile() const {
    const std::size_t s = tile_side / patch_side;
    return s * s;
  }

  void validate() const {
    if (vocab < kFirstGlyphToken + 2) throw ConfigError("vocabulary too small for glyph tokens");
    if (embed_dim < 2 || feature_dim < 1) throw ConfigError("model widths must be positive");
    if (embed_dim % 2 != 0) throw ConfigError("rotary positions need an even embed_dim");
    if (vet_size < 2) throw ConfigError("VET needs K >= 2");
    if (num_latents == 0) throw ConfigError("perceiver needs L >= 1");
    TilingConfig::standard(tile_side, patch_side, max_tiles);
  }
};

enum class ParamGroup { Encoder, Connector, Decoder };

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Encoder: return "encoder";
    case ParamGroup::Connector: return "connector";
    case ParamGroup::Decoder: return "decoder";
  }
  return "?";
}

/// Pre-norm causal transformer block, single head.
template <class T>
struct DecoderBlock {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, wk, wv, wo;  // (D × D)
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> ff1, ff1_bias;  // (F × D), (F)
  Tensor<T> ff2, ff2_bias;  // (D × F), (D)
};

/// Tiny decoder standing in for the language model. The output head is tied
/// to the embedding table; positions enter through rotary queries and keys.
template <class T>
struct DecoderParams {
  EmbeddingTable<T> embed;
  std::size_t max_positions = 0;
  std::vector<DecoderBlock<T>> blocks;
  Tensor<T> lnf_gamma, lnf_beta;

  static DecoderParams init(const ModelDims& dims, Rng& rng) {
    DecoderParams p;
    const std::size_t dm = dims.embed_dim, ff = dims.ffn_mult * dm;
    p.embed = EmbeddingTable<T>::random(dims.vocab, dm, rng, dims.embed_init_std);
    p.max_positions = dims.max_positions;
    const double proj = 1.0 / std::sqrt(double(dm));
    const double resid = proj / std::sqrt(2.0 * double(dims.blocks));
    for (std::size_t b = 0; b < dims.blocks; ++b) {
      DecoderBlock<T> blk;
      blk.ln1_gamma = Tensor<T>::vector(dm, T(1));
      blk.ln1_beta = Tensor<T>::vector(dm, T(0));
      blk.wq = rng.normal_tensor<T>({dm, dm}, proj);
      blk.wk = rng.normal_tensor<T>({dm, dm}, proj);
      blk.wv = rng.normal_tensor<T>({dm, dm}, proj);
      blk.wo = rng.normal_tensor<T>({dm, dm}, resid);
      blk.ln2_gamma = Tensor<T>::vector(dm, T(1));
      blk.ln2_beta = Tensor<T>::vector(dm, T(0));
      blk.ff1 = rng.normal_tensor<T>({ff, dm}, proj);
      blk.ff1_bias = Tensor<T>::vector(ff, T(0));
      blk.ff2 = rng.normal_tensor<T>({dm, ff}, resid * std::sqrt(double(dm) / double(ff)));
      blk.ff2_bias = Tensor<T>::vector(dm, T(0));
      p.blocks.push_back(std::move(blk));
    }
    p.lnf_gamma = Tensor<T>::vector(dm, T(1));
    p.lnf_beta = Tensor<T>::vector(dm, T(0));
    return p;
  }

  template <class F>
  void for_each_param(F&& f) {
    f("decoder.embed", embed.weights);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto& k = blocks[b];
      const std::string pre = "decoder.block" + std::to_string(b) + ".";
      f(pre + "ln1_gamma", k.ln1_gamma);
      f(pre + "ln1_beta", k.ln1_beta);
      f(pre + "wq", k.wq);
      f(pre + "wk", k.wk);
      f(pre + "wv", k.wv);
      f(pre + "wo", k.wo);
      f(pre + "ln2_gamma", k.ln2_gamma);
      f(pre + "ln2_beta", k.ln2_beta);
      f(pre + "ff1", k.ff1);
      f(pre + "ff1_bias", k.ff1_bias);
      f(pre + "ff2", k.ff2);
      f(pre + "ff2_bias", k.ff2_bias);
    }
    f("decoder.lnf_gamma", lnf_gamma);
    f("decoder.lnf_beta", lnf_beta);
  }
};

/// Row i is E_text[ids[i]].
template <class T>
Var<T> embed_tokens(Var<T> table, const std::vector<std::size_t>& ids) {
  return gather_rows(table, ids);
}

/// Vision rows first, then text rows.
template <class T>
Var<T> build_input(Var<T> vision, Var<T> text) {
  if (vision.cols() != text.cols()) {
    throw ShapeError("build_input: vision width " + std::to_string(vision.cols()) +
                     " differs from text width " + std::to_string(text.cols()));
  }
  if (text.rows() == 0) return vision;
  if (vision.rows() == 0) return text;
  return concat_rows(vision, text);
}

/// Runs the decoder over [vision; embed(text_ids)] and returns next-token
/// logits for the text positions only, shape (len(text_ids) × V).
template <class T, class Params>
  requires std::same_as<std::remove_const_t<Params>, DecoderParams<T>>
Var<T> decode_logits(Graph<T>& g, Params& p, Var<T> vision,
                     const std::vector<std::size_t>& text_ids) {
  auto table = g.param(p.embed.weights);
  const std::size_t nv = vision.rows(), nt = text_ids.size(), n = nv + nt;
  if (n > p.max_positions) {
    throw ShapeError("sequence of " + std::to_string(n) + " positions exceeds the decoder limit " +
                     std::to_string(p.max_positions));
  }
  if (nt == 0) throw InputError("decoder needs at least one text position");
  auto h = build_input(vision, embed_tokens(table, text_ids));
  const T inv_sqrt = T(1) / std::sqrt(T(table.cols()));
  for (auto& blk : p.blocks) {
    auto a = layernorm(h, g.param(blk.ln1_gamma), g.param(blk.ln1_beta));
    auto q = rotary(matmul_nt(a, g.param(blk.wq)));
    auto k = rotary(matmul_nt(a, g.param(blk.wk)));
    auto v = matmul_nt(a, g.param(blk.wv));
    auto attn = causal_softmax_rows(scale(matmul_nt(q, k), inv_sqrt));
    h = add(h, matmul_nt(matmul(attn, v), g.param(blk.wo)));
    auto b = layernorm(h, g.param(blk.ln2_gamma), g.param(blk.ln2_beta));
    auto f = gelu(add_rowvec(matmul_nt(b, g.param(blk.ff1)), g.param(blk.ff1_bias)));
    h = add(h, add_rowvec(matmul_nt(f, g.param(blk.ff2)), g.param(blk.ff2_bias)));
  }
  auto text_h = slice_rows(h, nv, n);
  auto hf = layernorm(text_h, g.param(p.lnf_gamma), g.param(p.lnf_beta));
  return matmul_nt(hf, table);
}

/// One training/evaluation example: cached patches plus the prompt and the
/// target token ids the model must read off the image.
template <class T>
struct Example {
  PatchBatch<T> patches;
  std::vector<std::size_t> prompt;  // BOS or the query marker
  std::vector<std::size_t> target;
};

/// Encoder + connector + decoder.
template <class T>
struct VlmModel {
  ModelDims dims;
  TilingConfig tiling;
  ToyEncoderParams<T> encoder;
  ConnectorParams<T> connector;
  DecoderParams<T> decoder;

  static VlmModel create(const ModelDims& dims, ConnectorKind kind, std::uint64_t seed) {
    dims.validate();
    VlmModel m;
    m.dims = dims;
    m.tiling = TilingConfig::standard(dims.tile_side, dims.patch_side, dims.max_tiles);
    Rng enc_rng(derive_seed(seed, "encoder"));
    m.encoder = ToyEncoderParams<T>::init(dims.patch_dim(), dims.encoder_hidden, dims.feature_dim,
                                          dims.patches_per_tile(), enc_rng, dims.encoder_out_scale);
    Rng dec_rng(derive_seed(seed, "decoder"));
    m.decoder = DecoderParams<T>::init(dims, dec_rng);
    m.connector = make_connector(dims, kind, m.decoder.embed, derive_seed(seed, "connector"));
    return m;
  }

  static ConnectorParams<T> make_connector(const ModelDims& dims, ConnectorKind kind,
                                           const EmbeddingTable<T>& table, std::uint64_t seed) {
    Rng rng(seed);
    switch (kind) {
      case ConnectorKind::Align:
        return init_align_from_head(table.weights, dims.feature_dim, rng, &table,
                                    dims.tie_align_table);
      case ConnectorKind::Mlp:
        return MlpParams<T>::init(dims.feature_dim, dims.embed_dim, rng, dims.mlp_activation);
      case ConnectorKind::Vet:
        return VetParams<T>::init(dims.feature_dim, dims.embed_dim, dims.vet_size, rng);
      case ConnectorKind::Perceiver:
        return PerceiverParams<T>::init(dims.feature_dim, dims.embed_dim, dims.num_latents, rng);
      case ConnectorKind::HReducer:
        return HReducerParams<T>::init(dims.feature_dim, dims.embed_dim, rng);
    }
    throw ConfigError("unknown connector kind");
  }

  ConnectorKind kind() const { return kind_of(connector); }
  EmbeddingTable<T>& text_table() { return decoder.embed; }
  const EmbeddingTable<T>& text_table() const { return decoder.embed; }

  template <class F>
  void for_each_param(F&& f) {
    encoder.for_each_param([&](const std::string& n, Tensor<T>& t) { f(n, t, ParamGroup::Encoder); });
    alignvlm::for_each_param(connector, [&](const std::string& n, Tensor<T>& t) {
      f(n, t, ParamGroup::Connector);
    });
    decoder.for_each_param([&](const std::string& n, Tensor<T>& t) { f(n, t, ParamGroup::Decoder); });
  }

  template <class F>
  void for_each_param(F&& f) const {
    const_cast<VlmModel*>(this)->for_each_param(
        [&](const std::string& n, Tensor<T>& t, ParamGroup gr) { f(n, std::as_const(t), gr); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Tensor<T>& t, ParamGroup) { n += t.size(); });
    return n;
  }

  template <class U>
  VlmModel<U> cast() const {
    VlmModel<U> out = VlmModel<U>::create(dims, kind(), 0);
    std::vector<const Tensor<T>*> src;
    for_each_param([&](const std::string&, const Tensor<T>& t, ParamGroup) { src.push_back(&t); });
    std::size_t i = 0;
    out.for_each_param([&](const std::string&, Tensor<U>& t, ParamGroup) {
      t = src.at(i++)->template cast<U>();
      t.clear_grad();
    });
    out.decoder.embed.refresh_bounds();
    return out;
  }
};

/// Text fed to the decoder (prompt plus all but the last target token) and
/// the per-position targets (prompt positions except the last are ignored).
template <class T>
std::pair<std::vector<std::size_t>, std::vector<long>> teacher_forcing(const Example<T>& ex) {
  if (ex.prompt.empty()) throw InputError("example prompt is empty");
  if (ex.target.empty()) throw InputError("example has no target tokens to score");
  std::vector<std::size_t> text = ex.prompt;
  text.insert(text.end(), ex.target.begin(), ex.target.end() - 1);
  std::vector<long> targets(text.size(), kIgnore);
  for (std::size_t i = 0; i < ex.target.size(); ++i) {
    targets[ex.prompt.size() - 1 + i] = static_cast<long>(ex.target[i]);
  }
  return {std::move(text), std::move(targets)};
}

/// Optional perturbations applied during a forward pass.
template <class T>
struct ForwardOptions {
  const Tensor<T>* feature_noise = nullptr;  // added to F before the connector
  const VocabMask<T>* vocab_mask = nullptr;  // ALIGN pruning
};

template <class T>
struct VisionForward {
  Var<T> features;
  ConnectorOutput<T> connector;
};

template <class T, class Model>
  requires std::same_as<std::remove_const_t<Model>, VlmModel<T>>
VisionForward<T> vision_forward(Graph<T>& g, Model& m, const PatchBatch<T>& patches,
                                const ForwardOptions<T>& opt = {}) {
  auto feats = encode(g, patches, m.encoder);
  if (opt.feature_noise) {
    if (opt.feature_noise->shape() != feats.shape()) throw ShapeError("noise shape does not match F");
    feats = add(feats, g.constant(*opt.feature_noise));
  }
  auto table = g.param(m.decoder.embed.weights);
  auto out = connector_forward(g, feats, patches.layout, m.connector, table, opt.vocab_mask);
  return {feats, out};
}

/// Summed cross-entropy of one example and the number of scored positions.
template <class T, class Model>
  requires std::same_as<std::remove_const_t<Model>, VlmModel<T>>
std::pair<Var<T>, std::size_t> example_loss(Graph<T>& g, Model& m, const Example<T>& ex,
                                            const ForwardOptions<T>& opt = {}) {
  auto [text, targets] = teacher_forcing(ex);
  auto vis = vision_forward(g, m, ex.patches, opt);
  auto logits = decode_logits(g, m.decoder, vis.connector.tokens, text);
  return {cross_entropy(logits, targets, false), ex.target.size()};
}

/// Mean next-token cross-entropy over every target position of the batch.
template <class T>
T forward_loss(const std::vector<Example<T>>& batch, const VlmModel<T>& m,
               const ForwardOptions<T>& opt = {}) {
  if (batch.empty()) throw InputError("forward_loss on an empty batch");
  double total = 0;
  std::size_t count = 0;
  for (const auto& ex : batch) {
    Graph<T> g;
    auto [loss, n] = example_loss(g, m, ex, opt);
    total += loss.value()[0];
    count += n;
  }
  const T mean = static_cast<T>(total / double(count));
  if (!std::isfinite(mean)) throw NumericError("loss is not finite");
  return mean;
}

}  // namespace alignvlm
