#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "alignvlm/train.hpp"

namespace alignvlm {

// ---------------------------------------------------------------------------
// Vocabulary distribution density

struct MeanVocabDistribution {
  std::vector<double> mean;  // (V)
  std::size_t probes = 0;
  std::size_t patches = 0;
  double max_prob = 0;
  std::size_t argmax = 0;
  double entropy = 0;  // nats

  std::size_t vocab() const { return mean.size(); }
};

namespace detail {

template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) f(i);
    });
  }
  for (auto& t : pool) t.join();
}

template <class T>
void require_align(const VlmModel<T>& m, const char* what) {
  if (m.kind() != ConnectorKind::Align) {
    throw ConfigError(std::string(what) + " needs an ALIGN model, got " +
                      std::string(connector_name(m.kind())));
  }
}

}  // namespace detail

/// Mean of the given probability rows (each block is n_i × V).
template <class T>
MeanVocabDistribution mean_distribution(const std::vector<Tensor<T>>& blocks) {
  if (blocks.empty()) throw InputError("probe set is empty");
  MeanVocabDistribution out;
  const std::size_t v = blocks.front().cols();
  out.mean.assign(v, 0.0);
  for (const auto& b : blocks) {
    if (b.cols() != v) throw ShapeError("probability blocks disagree on vocabulary size");
    for (std::size_t i = 0; i < b.rows(); ++i)
      for (std::size_t j = 0; j < v; ++j) out.mean[j] += double(b(i, j));
    out.patches += b.rows();
  }
  if (out.patches == 0) throw InputError("probe set has no patches");
  for (auto& x : out.mean) x /= double(out.patches);
  out.probes = blocks.size();
  out.argmax = static_cast<std::size_t>(std::max_element(out.mean.begin(), out.mean.end()) -
                                        out.mean.begin());
  out.max_prob = out.mean[out.argmax];
  for (double p : out.mean)
    if (p > 0) out.entropy -= p * std::log(p);
  return out;
}

/// ALIGN's per-patch vocabulary distribution averaged over every patch of
/// every probe image.
template <class T>
MeanVocabDistribution aggregate_distribution(const VlmModel<T>& m,
                                             const std::vector<PatchBatch<T>>& probes,
                                             std::size_t workers = 1) {
  detail::require_align(m, "aggregate_distribution");
  if (probes.empty()) throw InputError("probe set is empty");
  std::vector<Tensor<T>> blocks(probes.size());
  detail::parallel_for(probes.size(), workers, [&](std::size_t i) {
    Graph<T> g;
    blocks[i] = vision_forward(g, m, probes[i]).connector.probs->value();
  });
  return mean_distribution(blocks);
}

template <class T>
MeanVocabDistribution aggregate_distribution(const VlmModel<T>& m, const std::vector<Image>& probes,
                                             std::size_t workers = 1) {
  std::vector<PatchBatch<T>> batches;
  batches.reserve(probes.size());
  for (const auto& img : probes) batches.push_back(prepare_patches<T>(img, m.tiling));
  return aggregate_distribution(m, batches, workers);
}

// ---------------------------------------------------------------------------
// Embedding pruning

/// Smallest prefix of token ids, sorted by descending mean probability (ties
/// by id), whose cumulative mass reaches `mass`. mass = 1 keeps every token
/// with nonzero probability.
inline std::vector<std::size_t> prune_embeddings(const MeanVocabDistribution& dist, double mass) {
  if (!(mass > 0.0 && mass <= 1.0)) throw InputError("prune mass must lie in (0, 1]");
  std::vector<std::size_t> order(dist.vocab());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist.mean[a] > dist.mean[b]; });
  std::vector<std::size_t> kept;
  if (mass == 1.0) {
    for (auto id : order)
      if (dist.mean[id] > 0) kept.push_back(id);
    return kept;
  }
  double total = 0;
  for (auto id : order) total += dist.mean[id];
  const double goal = mass * total - 1e-12;
  double cum = 0;
  for (auto id : order) {
    kept.push_back(id);
    cum += dist.mean[id];
    if (cum >= goal) break;
  }
  return kept;
}

struct PruneReport {
  std::vector<std::size_t> kept;
  std::size_t vocab = 0;
  double mass = 0;  // mean probability captured by the kept set
  bool renormalize = true;
  EvalMetrics full;
  EvalMetrics pruned;
  double delta_accuracy = 0;  // pruned − full
  double delta_loss = 0;
};

template <class T>
VocabMask<T> make_vocab_mask(std::size_t vocab, const std::vector<std::size_t>& kept,
                             bool renormalize) {
  if (kept.empty()) throw InputError("kept token set is empty");
  VocabMask<T> mask{Tensor<T>::vector(vocab, T(0)), renormalize};
  for (auto id : kept) {
    if (id >= vocab) {
      throw IndexError("kept token " + std::to_string(id) + " is outside a vocabulary of " +
                       std::to_string(vocab));
    }
    mask.keep[id] = T(1);
  }
  return mask;
}

/// Evaluates `split` with ALIGN restricted to the kept rows of E_text.
/// Keeping every token is an exact no-op.
template <class T>
PruneReport eval_pruned(const VlmModel<T>& m, const MeanVocabDistribution& dist,
                        const std::vector<std::size_t>& kept, const std::vector<Example<T>>& split,
                        bool renormalize = true) {
  detail::require_align(m, "eval_pruned");
  if (dist.vocab() != m.dims.vocab) throw ShapeError("distribution and model vocabularies differ");
  const auto mask = make_vocab_mask<T>(m.dims.vocab, kept, renormalize);
  PruneReport r;
  r.kept = kept;
  r.vocab = m.dims.vocab;
  r.renormalize = renormalize;
  std::set<std::size_t> distinct(kept.begin(), kept.end());
  for (auto id : distinct) r.mass += dist.mean[id];
  r.full = evaluate(m, split);
  if (distinct.size() == m.dims.vocab) {
    r.pruned = r.full;
  } else {
    OptionsFor<T> opt = [&](std::size_t) { return ForwardOptions<T>{nullptr, &mask}; };
    r.pruned = evaluate(m, split, opt);
  }
  r.delta_accuracy = r.pruned.token_accuracy - r.full.token_accuracy;
  r.delta_loss = r.pruned.mean_loss - r.full.mean_loss;
  return r;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  std::vector<std::array<double, 2>> coords;  // one per row of E
  std::array<std::vector<double>, 2> components;
  std::array<double, 2> eigenvalues{};
  double total_variance = 0;
  std::vector<bool> highlight;

  double explained_ratio() const { return (eigenvalues[0] + eigenvalues[1]) / total_variance; }
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void normalize(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  if (n == 0) throw NumericError("power iteration hit a zero vector");
  for (auto& x : v) x /= n;
}

// Leading eigenpair of symmetric `c` (n×n, row-major), kept orthogonal to
// `against`. Stops once ‖Cv − λv‖ ≤ tol·max(λ, tiny).
inline std::pair<double, std::vector<double>> power_iteration(
    const std::vector<double>& c, std::size_t n, const std::vector<std::vector<double>>& against,
    Rng& rng, double tol) {
  std::vector<double> v(n), w(n);
  for (auto& x : v) x = rng.normal();
  auto project = [&](std::vector<double>& x) {
    for (const auto& a : against) {
      const double p = dot(x, a);
      for (std::size_t i = 0; i < n; ++i) x[i] -= p * a[i];
    }
  };
  project(v);
  normalize(v);
  double trace = 0;
  for (std::size_t i = 0; i < n; ++i) trace += c[i * n + i];
  const double floor = 1e-300 + 1e-15 * trace;
  for (int it = 0; it < 1'000'000; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += c[i * n + j] * v[j];
      w[i] = s;
    }
    project(w);
    const double lambda = dot(v, w);
    double res = 0;
    for (std::size_t i = 0; i < n; ++i) res += (w[i] - lambda * v[i]) * (w[i] - lambda * v[i]);
    if (std::sqrt(res) <= tol * std::max(std::abs(lambda), floor)) return {lambda, v};
    if (dot(w, w) == 0) return {0.0, v};
    v = w;
    normalize(v);
  }
  throw NumericError("power iteration did not converge");
}

}  // namespace detail

/// Projects the rows of E onto their top two principal directions, found by
/// power iteration with deflation on the D×D covariance. Each component is
/// signed so that its largest-magnitude entry is positive.
template <class T>
PcaResult pca_2d(const Tensor<T>& e, const std::vector<std::size_t>& highlight = {},
                 std::uint64_t seed = 0, double tol = 1e-9) {
  if (e.rank() != 2 || e.rows() < 3) throw InputError("PCA needs at least 3 rows");
  const std::size_t v = e.rows(), dm = e.cols();
  if (dm < 2) throw InputError("PCA to two dimensions needs at least 2 columns");
  std::vector<double> mean(dm, 0.0);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < dm; ++j) mean[j] += double(e(i, j));
  for (auto& m : mean) m /= double(v);
  std::vector<double> x(v * dm);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < dm; ++j) x[i * dm + j] = double(e(i, j)) - mean[j];
  std::vector<double> cov(dm * dm, 0.0);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t a = 0; a < dm; ++a) {
      const double xa = x[i * dm + a];
      for (std::size_t b = 0; b < dm; ++b) cov[a * dm + b] += xa * x[i * dm + b];
    }
  for (auto& c : cov) c /= double(v - 1);

  PcaResult r;
  for (std::size_t a = 0; a < dm; ++a) r.total_variance += cov[a * dm + a];
  if (!(r.total_variance > 0)) throw InputError("degenerate data: covariance has rank 0");
  Rng rng(derive_seed(seed, "pca"));
  std::vector<std::vector<double>> found;
  for (int k = 0; k < 2; ++k) {
    auto [lambda, vec] = detail::power_iteration(cov, dm, found, rng, tol);
    if (lambda <= 1e-12 * r.total_variance) {
      throw InputError("degenerate data: covariance rank is below 2");
    }
    // Deflate so the next run sees the remaining spectrum.
    for (std::size_t a = 0; a < dm; ++a)
      for (std::size_t b = 0; b < dm; ++b) cov[a * dm + b] -= lambda * vec[a] * vec[b];
    const auto big = std::max_element(vec.begin(), vec.end(), [](double p, double q) {
      return std::abs(p) < std::abs(q);
    });
    if (*big < 0)
      for (auto& c : vec) c = -c;
    r.eigenvalues[k] = lambda;
    found.push_back(vec);
    r.components[k] = std::move(vec);
  }
  r.coords.resize(v);
  for (std::size_t i = 0; i < v; ++i)
    for (int k = 0; k < 2; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < dm; ++j) s += x[i * dm + j] * r.components[k][j];
      r.coords[i][k] = s;
    }
  r.highlight.assign(v, false);
  for (auto id : highlight) {
    if (id >= v) throw IndexError("highlighted token " + std::to_string(id) + " out of range");
    r.highlight[id] = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Noise robustness

struct NoiseRow {
  std::string connector;
  double cosine_distance = 0;  // mean over probes of the per-patch mean
  double clean_accuracy = 0;
  double noisy_accuracy = 0;
  double drop = 0;  // clean − noisy, in accuracy points × 100
};

struct NoiseReport {
  double sigma = 0;
  std::uint64_t seed = 0;
  std::uint64_t noise_checksum = 0;
  std::vector<NoiseRow> rows;
};

/// 1 − cos between two rows; identical rows give exactly 0 and a zero row
/// against a nonzero one gives 1.
template <class T>
double cosine_distance(std::span<const T> a, std::span<const T> b) {
  if (std::equal(a.begin(), a.end(), b.begin(), b.end())) return 0.0;
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * double(b[i]);
    aa += double(a[i]) * double(a[i]);
    bb += double(b[i]) * double(b[i]);
  }
  if (aa == 0 || bb == 0) return 1.0;
  return std::clamp(1.0 - ab / std::sqrt(aa * bb), 0.0, 2.0);
}

template <class T>
double mean_row_cosine_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("cosine distance needs equal shapes");
  if (a.rows() == 0) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += cosine_distance<T>(a.row(i), b.row(i));
  return s / double(a.rows());
}

template <class T>
struct NamedModel {
  std::string name;
  const VlmModel<T>* model = nullptr;
};

namespace detail {

template <class T>
std::uint64_t encoder_checksum(const VlmModel<T>& m) {
  std::uint64_t h = 0;
  m.for_each_param([&](const std::string&, const Tensor<T>& t, ParamGroup g) {
    if (g == ParamGroup::Encoder) h = mix_seed(h ^ checksum(t));
  });
  return h;
}

template <class T>
std::uint64_t noise_checksum(const std::vector<Tensor<T>>& bufs) {
  std::uint64_t h = 0;
  for (const auto& b : bufs) h = mix_seed(h ^ checksum(b));
  return h;
}

template <class T>
std::vector<Tensor<T>> draw_noise(const std::vector<std::size_t>& rows, std::size_t d, double sigma,
                                  std::uint64_t seed) {
  std::vector<Tensor<T>> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    out.push_back(sigma == 0 ? Tensor<T>({rows[i], d}) : rng.normal_tensor<T>({rows[i], d}, sigma));
  }
  return out;
}

}  // namespace detail

/// Adds N(0, σ²) to the encoder output F before the connector. Every sample
/// (probe or evaluation document) gets its own draw, and the same draws are
/// fed to every model; all models must share the encoder weights so that F
/// is identical before the noise.
template <class T>
NoiseReport noise_test(const std::vector<NamedModel<T>>& models, double sigma,
                       const std::vector<PatchBatch<T>>& probes,
                       const std::vector<Example<T>>& split, std::uint64_t seed,
                       std::size_t workers = 1) {
  if (!(sigma >= 0)) throw InputError("noise sigma must be non-negative");
  if (models.empty()) throw InputError("noise test needs at least one model");
  if (probes.empty()) throw InputError("probe set is empty");
  const auto enc = detail::encoder_checksum(*models.front().model);
  const std::size_t d = models.front().model->dims.feature_dim;
  for (const auto& nm : models) {
    if (detail::encoder_checksum(*nm.model) != enc) {
      throw ConfigError("noise test models must share encoder weights; '" + nm.name + "' differs");
    }
  }
  std::vector<std::size_t> probe_rows, split_rows;
  for (const auto& p : probes) probe_rows.push_back(p.patches.rows());
  for (const auto& ex : split) split_rows.push_back(ex.patches.patches.rows());
  const auto probe_noise = detail::draw_noise<T>(probe_rows, d, sigma, derive_seed(seed, "probes"));
  const auto split_noise = detail::draw_noise<T>(split_rows, d, sigma, derive_seed(seed, "split"));

  NoiseReport rep;
  rep.sigma = sigma;
  rep.seed = seed;
  rep.noise_checksum = mix_seed(detail::noise_checksum(probe_noise) ^
                                detail::noise_checksum(split_noise));
  for (const auto& nm : models) {
    const auto& m = *nm.model;
    NoiseRow row;
    row.connector = nm.name;
    std::vector<double> dist(probes.size());
    detail::parallel_for(probes.size(), workers, [&](std::size_t i) {
      Graph<T> g1, g2;
      const auto clean = vision_forward(g1, m, probes[i]).connector.tokens.value();
      const auto noisy =
          vision_forward(g2, m, probes[i], ForwardOptions<T>{&probe_noise[i], nullptr})
              .connector.tokens.value();
      dist[i] = mean_row_cosine_distance(clean, noisy);
    });
    for (double x : dist) row.cosine_distance += x;
    row.cosine_distance /= double(probes.size());
    if (!split.empty()) {
      OptionsFor<T> opt = [&](std::size_t i) {
        return ForwardOptions<T>{&split_noise[i], nullptr};
      };
      row.clean_accuracy = evaluate(m, split).token_accuracy;
      row.noisy_accuracy = evaluate(m, split, opt).token_accuracy;
      row.drop = 100.0 * (row.clean_accuracy - row.noisy_accuracy);
    }
    // The buffers are const, but check that every model saw the same bits.
    const auto seen = mix_seed(detail::noise_checksum(probe_noise) ^
                               detail::noise_checksum(split_noise));
    if (seen != rep.noise_checksum) throw NumericError("noise buffer changed between connectors");
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Runtime benchmark

struct BenchConfig {
  std::size_t warmup = 5;
  std::size_t iters = 30;
  std::size_t num_patches = 144;
  std::size_t generate_tokens = 16;
  std::size_t repeats = 2;
  std::uint64_t seed = 1;
  ModelDims dims;  // d, D, V of the benchmarked models
  std::vector<ConnectorKind> connectors{std::begin(kAllConnectors), std::end(kAllConnectors)};
};

struct BenchRow {
  std::string connector;
  std::size_t samples = 0;
  double latency_s = 0;            // mean over repeats of the mean inference latency
  std::vector<double> run_latency_s;  // one per repeat
  double connector_latency_s = 0;  // connector forward alone
  double tokens_per_sec = 0;       // generated tokens / latency
  std::size_t vision_tokens = 0;
  std::size_t memory_bytes = 0;  // analytic parameter + activation bytes
  double run_variation = 0;      // (max − min) / min over repeats
};

struct BenchReport {
  std::size_t num_patches = 0, feature_dim = 0, embed_dim = 0, vocab = 0, generate_tokens = 0;
  std::vector<BenchRow> rows;

  const BenchRow& row(std::string_view name) const {
    for (const auto& r : rows)
      if (r.connector == name) return r;
    throw InputError("bench report has no row for '" + std::string(name) + "'");
  }
};

/// Smallest nonzero step of the steady clock, in seconds.
inline double timer_resolution() {
  using clock = std::chrono::steady_clock;
  double best = 1.0;
  for (int i = 0; i < 20; ++i) {
    const auto a = clock::now();
    auto b = clock::now();
    while (b == a) b = clock::now();
    best = std::min(best, std::chrono::duration<double>(b - a).count());
  }
  return best;
}

/// Random patch pixels laid out as full tiles.
template <class T>
PatchBatch<T> bench_patches(const ModelDims& dims, std::size_t num_patches, std::uint64_t seed) {
  const std::size_t per_tile = dims.patches_per_tile();
  if (num_patches == 0 || num_patches % per_tile != 0) {
    throw ConfigError("bench num_patches must be a positive multiple of " +
                      std::to_string(per_tile));
  }
  const auto side = static_cast<std::uint32_t>(dims.tile_side / dims.patch_side);
  PatchBatch<T> b;
  Rng rng(seed);
  b.patches = Tensor<T>({num_patches, dims.patch_dim()});
  for (auto& x : b.patches.data()) x = static_cast<T>(rng.uniform());
  b.patches_per_row = side;
  const auto tiles = static_cast<std::uint32_t>(num_patches / per_tile);
  b.grid = {tiles, 1};
  for (std::uint32_t t = 0; t < tiles; ++t) {
    b.per_tile_counts.push_back(per_tile);
    for (std::uint32_t r = 0; r < side; ++r)
      for (std::uint32_t c = 0; c < side; ++c) b.layout.push_back({t, r, c});
  }
  return b;
}

/// Parameter bytes plus the largest activations of one inference pass.
template <class T>
std::size_t analytic_memory(const VlmModel<T>& m, std::size_t num_patches, std::size_t vision_tokens,
                            std::size_t text_tokens) {
  const auto& d = m.dims;
  const std::size_t n = num_patches, dm = d.embed_dim;
  std::size_t act = n * d.encoder_hidden + n * d.feature_dim;
  switch (m.kind()) {
    case ConnectorKind::Align: act += 2 * n * dm + 2 * n * d.vocab; break;
    case ConnectorKind::Mlp: act += n * dm; break;
    case ConnectorKind::Vet: act += n * d.vet_size + n * dm; break;
    case ConnectorKind::Perceiver: act += 2 * n * dm + d.num_latents * (n + 2 * dm); break;
    case ConnectorKind::HReducer: act += n * d.feature_dim + (n / 4) * dm; break;
  }
  const std::size_t s = vision_tokens + text_tokens;
  act += d.blocks * (s * dm * 8 + s * s + s * d.ffn_mult * dm * 2) + text_tokens * d.vocab;
  return (m.parameter_count() + act) * sizeof(T);
}

namespace detail {

// Encode, connect, then greedily generate `gen` tokens without a KV cache.
template <class T>
std::size_t bench_inference(const VlmModel<T>& m, const PatchBatch<T>& patches, std::size_t gen) {
  Tensor<T> vision;
  {
    Graph<T> g;
    vision = vision_forward(g, m, patches).connector.tokens.value();
  }
  std::vector<std::size_t> text{kBosToken};
  for (std::size_t k = 0; k < gen; ++k) {
    Graph<T> g;
    auto logits = decode_logits(g, m.decoder, g.constant(vision), text).value();
    text.push_back(argmax_row(logits, logits.rows() - 1));
  }
  return text.back();
}

template <class T>
std::size_t bench_connector_only(const VlmModel<T>& m, const Tensor<T>& feats,
                                 const std::vector<PatchPos>& layout) {
  Graph<T> g;
  auto out = connector_forward(g, g.constant(feats), layout, m.connector,
                               g.param(m.decoder.embed.weights));
  return out.tokens.rows();
}

}  // namespace detail

/// Whole-model inference latency per connector at fixed (num_patches, d, D,
/// V): encode, connector, then greedy generation. Connectors are timed in
/// interleaved order so drift hits all of them alike. Single-threaded.
template <class T>
BenchReport bench_connectors(const BenchConfig& cfg) {
  if (cfg.iters < 30) throw ConfigError("bench needs at least 30 timed iterations");
  if (cfg.warmup < 5) throw ConfigError("bench needs at least 5 warmup iterations");
  if (cfg.repeats < 1) throw ConfigError("bench needs at least one repeat");
  if (cfg.connectors.empty()) throw ConfigError("bench has no connectors");
  const auto patches = bench_patches<T>(cfg.dims, cfg.num_patches, derive_seed(cfg.seed, "patches"));

  std::vector<VlmModel<T>> models;
  std::vector<Tensor<T>> feats;
  for (auto k : cfg.connectors) {
    models.push_back(VlmModel<T>::create(cfg.dims, k, cfg.seed));
    feats.push_back(encode(patches, models.back().encoder).features);
  }
  // Perceiver's token count must not depend on the number of patches.
  for (const auto& m : models) {
    if (m.kind() != ConnectorKind::Perceiver) continue;
    const auto half = bench_patches<T>(cfg.dims, cfg.dims.patches_per_tile(), cfg.seed);
    const auto f_half = encode(half, m.encoder).features;
    const auto a = detail::bench_connector_only(m, feats.front(), patches.layout);
    const auto b = detail::bench_connector_only(m, f_half, half.layout);
    if (a != cfg.dims.num_latents || b != cfg.dims.num_latents) {
      throw ShapeError("perceiver emitted " + std::to_string(a) + " and " + std::to_string(b) +
                       " tokens, expected L = " + std::to_string(cfg.dims.num_latents));
    }
  }

  using clock = std::chrono::steady_clock;
  const double resolution = timer_resolution();
  const std::size_t nm = models.size();
  std::vector<std::vector<double>> run_means(nm);
  std::vector<double> conn_total(nm, 0.0);
  std::size_t sink = 0;
  for (std::size_t rep = 0; rep < cfg.repeats; ++rep) {
    for (std::size_t w = 0; w < cfg.warmup; ++w)
      for (std::size_t i = 0; i < nm; ++i)
        sink += detail::bench_inference(models[i], patches, cfg.generate_tokens);
    std::vector<double> total(nm, 0.0);
    for (std::size_t it = 0; it < cfg.iters; ++it) {
      for (std::size_t i = 0; i < nm; ++i) {
        const auto t0 = clock::now();
        sink += detail::bench_inference(models[i], patches, cfg.generate_tokens);
        const auto t1 = clock::now();
        sink += detail::bench_connector_only(models[i], feats[i], patches.layout);
        const auto t2 = clock::now();
        total[i] += std::chrono::duration<double>(t1 - t0).count();
        conn_total[i] += std::chrono::duration<double>(t2 - t1).count();
      }
    }
    for (std::size_t i = 0; i < nm; ++i) {
      const double mean = total[i] / double(cfg.iters);
      if (mean < 100.0 * resolution) {
        throw NumericError("timer resolution (" + std::to_string(resolution) +
                           " s) is too coarse for a " + std::to_string(mean) +
                           " s forward; increase the batch and retry");
      }
      run_means[i].push_back(mean);
    }
  }
  (void)sink;

  BenchReport rep;
  rep.num_patches = cfg.num_patches;
  rep.feature_dim = cfg.dims.feature_dim;
  rep.embed_dim = cfg.dims.embed_dim;
  rep.vocab = cfg.dims.vocab;
  rep.generate_tokens = cfg.generate_tokens;
  for (std::size_t i = 0; i < nm; ++i) {
    BenchRow r;
    r.connector = std::string(connector_name(models[i].kind()));
    r.samples = cfg.iters * cfg.repeats;
    r.run_latency_s = run_means[i];
    r.latency_s = std::accumulate(run_means[i].begin(), run_means[i].end(), 0.0) /
                  double(run_means[i].size());
    r.connector_latency_s = conn_total[i] / double(r.samples);
    r.tokens_per_sec = double(cfg.generate_tokens) / r.latency_s;
    r.vision_tokens = detail::bench_connector_only(models[i], feats[i], patches.layout);
    r.memory_bytes =
        analytic_memory(models[i], cfg.num_patches, r.vision_tokens, cfg.generate_tokens);
    const auto [lo, hi] = std::minmax_element(run_means[i].begin(), run_means[i].end());
    r.run_variation = (*hi - *lo) / *lo;
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

}  // namespace alignvlm
