#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "alignvlm/analysis.hpp"
#include "alignvlm/config.hpp"
#include "alignvlm/report.hpp"

namespace alignvlm {

// ---------------------------------------------------------------------------
// Synthetic dataset

struct Split {
  std::string name;
  DocStyle style = DocStyle::Page;
  std::uint64_t seed = 0;
  std::vector<SynthDoc> docs;
};

struct Dataset {
  std::array<Split, 3> stages;
  Split eval;
  Split probes;

  std::vector<const Split*> all() const { return {&stages[0], &stages[1], &stages[2], &eval, &probes}; }
};

inline constexpr const char* kSplitNames[] = {"stage1", "stage2", "stage3", "eval", "probes"};

/// Every cell of the page holds a glyph.
inline std::vector<SynthDoc> make_probe_corpus(std::size_t count, std::uint64_t seed,
                                               std::size_t vocab, std::uint32_t side = 56) {
  const std::size_t per_row = side / kGlyphCell;
  std::vector<SynthDoc> docs;
  for (std::size_t i = 0; i < count; ++i)
    docs.push_back(synth_document(derive_seed(seed, i), per_row * per_row, vocab, DocStyle::Page, side));
  return docs;
}

inline std::uint64_t split_seed(std::uint64_t seed, const std::string& name) {
  return derive_seed(seed, "data/" + name);
}

/// Document seeds of the evaluation and probe splits never occur in the
/// training splits.
inline void check_disjoint(const Dataset& d) {
  std::set<std::uint64_t> train;
  for (const auto& s : d.stages)
    for (const auto& doc : s.docs) train.insert(doc.seed);
  for (const Split* s : {&d.eval, &d.probes})
    for (const auto& doc : s->docs)
      if (train.count(doc.seed)) throw InputError("split '" + s->name + "' overlaps the training seeds");
}

inline Dataset make_dataset(const RunConfig& cfg) {
  Dataset d;
  const auto side = cfg.model.tile_side;
  for (int s = 0; s < 3; ++s) {
    const auto style = StageConfig::defaults(s + 1).style();
    const auto seed = split_seed(cfg.seed, kSplitNames[s]);
    d.stages[s] = {kSplitNames[s], style, seed,
                   make_corpus(style, cfg.stages[s].docs, seed, cfg.model.vocab, side)};
  }
  const auto eval_seed = split_seed(cfg.seed, "eval");
  d.eval = {"eval", DocStyle::Instruction, eval_seed,
            make_corpus(DocStyle::Instruction, cfg.eval_docs, eval_seed, cfg.model.vocab, side)};
  const auto probe_seed = split_seed(cfg.seed, "probes");
  d.probes = {"probes", DocStyle::Page, probe_seed,
              make_probe_corpus(cfg.probe_docs, probe_seed, cfg.model.vocab, side)};
  check_disjoint(d);
  return d;
}

/// The first ⌈fraction·n⌉ documents (at least one when n > 0).
inline std::vector<SynthDoc> take_fraction(const std::vector<SynthDoc>& docs, double fraction) {
  if (docs.empty()) return {};
  std::size_t n = static_cast<std::size_t>(std::ceil(fraction * double(docs.size())));
  n = std::clamp<std::size_t>(n, 1, docs.size());
  return {docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(n)};
}

// Dataset directory: <dir>/<split>/manifest.json plus NNNNNN.png and
// NNNNNN.raw per document. The raw file is what training reads.

inline void save_split(const std::filesystem::path& dir, const Split& split, std::size_t vocab) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  Json docs = Json::array();
  for (std::size_t i = 0; i < split.docs.size(); ++i) {
    const auto& d = split.docs[i];
    char stem[16];
    std::snprintf(stem, sizeof(stem), "%06zu", i);
    save_png(d.image, dir / (std::string(stem) + ".png"));
    save_raw(d.image, dir / (std::string(stem) + ".raw"));
    docs.push_back({{"id", i},
                    {"seed", d.seed},
                    {"png", std::string(stem) + ".png"},
                    {"raw", std::string(stem) + ".raw"},
                    {"target", d.target}});
  }
  const Json manifest{{"split", split.name},  {"style", std::string(style_name(split.style))},
                      {"seed", split.seed},    {"vocab", vocab},
                      {"count", split.docs.size()}, {"docs", docs}};
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
}

inline Split load_split(const std::filesystem::path& dir, std::size_t vocab) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) {
    throw IoError("no dataset manifest at " + path.string() + "; run `alignvlm synth` first");
  }
  Json m;
  try {
    m = Json::parse(read_text(path));
    Split s;
    s.name = m.at("split").get<std::string>();
    s.style = parse_style(m.at("style").get<std::string>());
    s.seed = m.at("seed").get<std::uint64_t>();
    if (m.at("vocab").get<std::size_t>() != vocab) {
      throw ConfigError("dataset " + dir.string() + " was made for V=" +
                        std::to_string(m.at("vocab").get<std::size_t>()) +
                        ", the config says V=" + std::to_string(vocab) + "; rerun `alignvlm synth`");
    }
    for (const auto& dj : m.at("docs")) {
      SynthDoc d;
      d.seed = dj.at("seed").get<std::uint64_t>();
      d.style = s.style;
      d.target = dj.at("target").get<std::vector<std::size_t>>();
      for (auto id : d.target)
        if (id >= vocab) throw InputError("manifest " + path.string() + " has token id " + std::to_string(id) + " >= V");
      d.image = load_raw(dir / dj.at("raw").get<std::string>());
      s.docs.push_back(std::move(d));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed manifest " + path.string() + ": " + e.what());
  }
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& d, std::size_t vocab) {
  for (const Split* s : d.all()) save_split(dir / s->name, *s, vocab);
}

inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t vocab) {
  Dataset d;
  for (int s = 0; s < 3; ++s) d.stages[s] = load_split(dir / kSplitNames[s], vocab);
  d.eval = load_split(dir / "eval", vocab);
  d.probes = load_split(dir / "probes", vocab);
  check_disjoint(d);
  return d;
}

// ---------------------------------------------------------------------------
// Staged training

struct ScheduleOptions {
  std::vector<int> stages{1, 2, 3};
  double data_fraction = 1.0;
  std::array<std::size_t, 3> epochs{0, 0, 0};  // 0 = keep the config value
  bool freeze_encoder = false;                 // every stage leaves the encoder alone
  std::uint64_t seed = 0;                      // 0 = cfg.seed
};

struct ScheduleResult {
  std::vector<StepRecord> log;
  std::vector<StageHistoryEntry> history;
};

template <class T>
ScheduleResult train_schedule(const RunConfig& cfg, VlmModel<T>& m, const Dataset& data,
                              const ScheduleOptions& opt = {}) {
  ScheduleResult out;
  for (int s : opt.stages) {
    StageConfig sc = cfg.stage_config(s);
    if (opt.seed) sc.seed = opt.seed;
    if (opt.epochs[s - 1]) sc.epochs = opt.epochs[s - 1];
    if (opt.freeze_encoder) sc.train_encoder = false;
    const auto docs = take_fraction(data.stages[s - 1].docs, opt.data_fraction);
    sc.dataset_size = docs.size();
    if (sc.epochs == 0 || docs.empty()) continue;
    const auto examples = make_examples<T>(docs, m.tiling);
    auto r = train_stage(sc, m, examples);
    out.log.insert(out.log.end(), r.log.begin(), r.log.end());
    out.history.push_back({s, r.next_step, r.log.empty() ? 0.0 : r.log.back().loss, r.complete, sc.seed});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Connector comparison (low-resource and full regimes)

template <class T>
std::vector<ComparisonRow> run_comparison(const RunConfig& cfg, const Dataset& data,
                                          const std::string& regime, std::uint64_t seed) {
  if (regime != "low" && regime != "full") throw ConfigError("regime must be low or full");
  const double fraction = regime == "low" ? cfg.low_resource_fraction : 1.0;
  const auto eval = make_examples<T>(data.eval.docs, TilingConfig::standard(
                                                         cfg.model.tile_side, cfg.model.patch_side,
                                                         cfg.model.max_tiles));
  std::vector<ComparisonRow> rows;
  for (auto kind : kAllConnectors) {
    auto m = VlmModel<T>::create(cfg.model, kind, seed);
    ScheduleOptions opt;
    opt.data_fraction = fraction;
    opt.seed = seed;
    const auto res = train_schedule(cfg, m, data, opt);
    std::size_t docs = 0;
    for (int s = 0; s < 3; ++s) docs += take_fraction(data.stages[s].docs, fraction).size();
    rows.push_back({regime, seed, std::string(connector_name(kind)), docs,
                    res.log.empty() ? 0.0 : res.log.back().loss, evaluate(m, eval)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Noise robustness protocol

/// Trains an ALIGN model (encoder included), then an MLP model on a copy of
/// that encoder with only its connector and decoder trainable, and measures
/// both under the same N(0, σ²) draws.
template <class T>
NoiseReport run_noise_seed(const RunConfig& cfg, const Dataset& data, std::uint64_t seed) {
  ScheduleOptions opt;
  opt.data_fraction = cfg.noise.data_fraction;
  opt.seed = seed;
  for (int s = 0; s < 3; ++s) opt.epochs[s] = cfg.noise.epochs[s];
  opt.stages.clear();
  for (int s = 1; s <= 3; ++s)
    if (cfg.noise.epochs[s - 1] > 0) opt.stages.push_back(s);

  auto align = VlmModel<T>::create(cfg.model, ConnectorKind::Align, seed);
  train_schedule(cfg, align, data, opt);
  auto mlp = VlmModel<T>::create(cfg.model, ConnectorKind::Mlp, derive_seed(seed, "mlp"));
  mlp.encoder = align.encoder;
  opt.freeze_encoder = true;
  train_schedule(cfg, mlp, data, opt);

  std::vector<PatchBatch<T>> probes;
  for (std::size_t i = 0; i < std::min(cfg.noise.probe_docs, data.probes.docs.size()); ++i)
    probes.push_back(prepare_patches<T>(data.probes.docs[i].image, align.tiling));
  std::vector<SynthDoc> eval_docs(data.eval.docs.begin(),
                                  data.eval.docs.begin() +
                                      static_cast<std::ptrdiff_t>(
                                          std::min(cfg.noise.eval_docs, data.eval.docs.size())));
  // Without stage 3 the models never saw the query marker; read the same
  // pages with the plain BOS prompt instead.
  if (cfg.noise.epochs[2] == 0)
    for (auto& d : eval_docs) d.style = DocStyle::Page;
  const auto eval = make_examples<T>(eval_docs, align.tiling);
  return noise_test<T>({{"align", &align}, {"mlp", &mlp}}, cfg.noise.sigma, probes, eval,
                       derive_seed(seed, "noise"), cfg.workers);
}

}  // namespace alignvlm
