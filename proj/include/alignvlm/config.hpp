#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "alignvlm/train.hpp"

namespace alignvlm {

using Json = nlohmann::ordered_json;

namespace detail {

inline void reject_unknown(const Json& j, const std::string& where,
                           std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> ok(known.begin(), known.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <class V>
void read(const Json& j, const char* key, V& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    it->get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline Json dims_to_json(const ModelDims& d) {
  return Json{{"patch_side", d.patch_side},
              {"tile_side", d.tile_side},
              {"max_tiles", d.max_tiles},
              {"channels", d.channels},
              {"encoder_hidden", d.encoder_hidden},
              {"encoder_out_scale", d.encoder_out_scale},
              {"feature_dim", d.feature_dim},
              {"embed_dim", d.embed_dim},
              {"vocab", d.vocab},
              {"vet_size", d.vet_size},
              {"num_latents", d.num_latents},
              {"blocks", d.blocks},
              {"ffn_mult", d.ffn_mult},
              {"max_positions", d.max_positions},
              {"embed_init_std", d.embed_init_std},
              {"mlp_activation", d.mlp_activation == Activation::ReLU ? "relu" : "gelu"},
              {"tie_align_table", d.tie_align_table}};
}

inline ModelDims dims_from_json(const Json& j) {
  const std::string w = "model";
  detail::reject_unknown(j, w,
                         {"patch_side", "tile_side", "max_tiles", "channels", "encoder_hidden",
                          "encoder_out_scale", "feature_dim", "embed_dim", "vocab", "vet_size",
                          "num_latents", "blocks", "ffn_mult", "max_positions", "embed_init_std",
                          "mlp_activation", "tie_align_table"});
  ModelDims d;
  detail::read(j, "patch_side", d.patch_side, w);
  detail::read(j, "tile_side", d.tile_side, w);
  detail::read(j, "max_tiles", d.max_tiles, w);
  detail::read(j, "channels", d.channels, w);
  detail::read(j, "encoder_hidden", d.encoder_hidden, w);
  detail::read(j, "encoder_out_scale", d.encoder_out_scale, w);
  detail::read(j, "feature_dim", d.feature_dim, w);
  detail::read(j, "embed_dim", d.embed_dim, w);
  detail::read(j, "vocab", d.vocab, w);
  detail::read(j, "vet_size", d.vet_size, w);
  detail::read(j, "num_latents", d.num_latents, w);
  detail::read(j, "blocks", d.blocks, w);
  detail::read(j, "ffn_mult", d.ffn_mult, w);
  detail::read(j, "max_positions", d.max_positions, w);
  detail::read(j, "embed_init_std", d.embed_init_std, w);
  std::string act = d.mlp_activation == Activation::ReLU ? "relu" : "gelu";
  detail::read(j, "mlp_activation", act, w);
  if (act == "relu") {
    d.mlp_activation = Activation::ReLU;
  } else if (act == "gelu") {
    d.mlp_activation = Activation::GELU;
  } else {
    throw ConfigError("model.mlp_activation must be relu or gelu, got '" + act + "'");
  }
  detail::read(j, "tie_align_table", d.tie_align_table, w);
  return d;
}

struct StageSettings {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t docs = 4096;
};

struct NoiseSettings {
  double sigma = 3.0;
  std::size_t seeds = 5;
  double data_fraction = 0.5;  // share of the stage 1/2 corpora used to train each model
  std::array<std::size_t, 3> epochs{3, 3, 0};
  std::size_t probe_docs = 64;
  std::size_t eval_docs = 256;
};

struct BenchSettings {
  std::size_t warmup = 5;
  std::size_t iters = 30;
  std::size_t num_patches = 144;
  std::size_t vocab = 1024;
  std::size_t generate_tokens = 16;
  std::size_t repeats = 2;  // independent timing runs for the stability band
};

/// Everything a subcommand needs. Loaded from JSON, then overridden by flags.
struct RunConfig {
  ModelDims model;
  std::string connector = "align";  // or "all" for the comparison harness
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::string from;  // checkpoint to start from
  std::size_t workers = 1;
  std::vector<int> run_stages{1, 2, 3};
  std::array<StageSettings, 3> stages{StageSettings{3, 16, 1e-3, 4096},
                                      StageSettings{3, 16, 1e-3, 4096},
                                      StageSettings{3, 16, 3e-4, 1024}};
  std::size_t eval_docs = 256;
  std::size_t probe_docs = 64;
  bool low_resource = false;
  double low_resource_fraction = 0.1;
  std::vector<std::string> comparison_regimes{"low", "full"};
  std::vector<std::uint64_t> comparison_seeds{1};
  double prune_mass = 0.999;
  bool prune_renormalize = true;
  NoiseSettings noise;
  BenchSettings bench;

  StageConfig stage_config(int stage) const {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
    const auto& s = stages[stage - 1];
    StageConfig c = StageConfig::defaults(stage, seed);
    c.epochs = s.epochs;
    c.batch_size = s.batch_size;
    c.lr = s.lr;
    c.dataset_size = s.docs;
    c.workers = workers;
    c.validate();
    return c;
  }

  void validate() const {
    model.validate();
    if (connector != "all") parse_connector(connector);
    if (run_stages.empty()) throw ConfigError("no stages selected");
    for (std::size_t i = 0; i < run_stages.size(); ++i) {
      if (run_stages[i] < 1 || run_stages[i] > 3) throw ConfigError("stages must be 1, 2 or 3");
      if (i && run_stages[i] <= run_stages[i - 1]) {
        throw ConfigError("stages must be listed in increasing order");
      }
    }
    for (int s = 1; s <= 3; ++s) stage_config(s);
    if (workers == 0) throw ConfigError("workers must be at least 1");
    if (!(low_resource_fraction > 0 && low_resource_fraction <= 1)) {
      throw ConfigError("low_resource_fraction must lie in (0, 1]");
    }
    for (const auto& r : comparison_regimes) {
      if (r != "low" && r != "full") throw ConfigError("comparison regime must be low or full");
    }
    if (!(prune_mass > 0 && prune_mass <= 1)) throw ConfigError("prune_mass must lie in (0, 1]");
    if (noise.sigma < 0) throw ConfigError("noise.sigma must be non-negative");
    if (!(noise.data_fraction > 0 && noise.data_fraction <= 1)) {
      throw ConfigError("noise.data_fraction must lie in (0, 1]");
    }
    if (bench.iters < 30) throw ConfigError("bench.iters must be at least 30");
    if (bench.warmup < 5) throw ConfigError("bench.warmup must be at least 5");
    if (bench.repeats < 1) throw ConfigError("bench.repeats must be at least 1");
  }
};

inline Json to_json(const RunConfig& c) {
  Json stages = Json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"lr", s.lr},
                      {"docs", s.docs}});
  }
  return Json{
      {"model", dims_to_json(c.model)},
      {"connector", c.connector},
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"from", c.from},
      {"workers", c.workers},
      {"run_stages", c.run_stages},
      {"stages", stages},
      {"eval_docs", c.eval_docs},
      {"probe_docs", c.probe_docs},
      {"low_resource", c.low_resource},
      {"low_resource_fraction", c.low_resource_fraction},
      {"comparison", {{"regimes", c.comparison_regimes}, {"seeds", c.comparison_seeds}}},
      {"prune", {{"mass", c.prune_mass}, {"renormalize", c.prune_renormalize}}},
      {"noise",
       {{"sigma", c.noise.sigma},
        {"seeds", c.noise.seeds},
        {"data_fraction", c.noise.data_fraction},
        {"epochs", c.noise.epochs},
        {"probe_docs", c.noise.probe_docs},
        {"eval_docs", c.noise.eval_docs}}},
      {"bench",
       {{"warmup", c.bench.warmup},
        {"iters", c.bench.iters},
        {"num_patches", c.bench.num_patches},
        {"vocab", c.bench.vocab},
        {"generate_tokens", c.bench.generate_tokens},
        {"repeats", c.bench.repeats}}}};
}

inline RunConfig config_from_json(const Json& j) {
  using detail::read;
  detail::reject_unknown(j, "config",
                         {"model", "connector", "seed", "out_dir", "from", "workers", "run_stages",
                          "stages", "eval_docs", "probe_docs", "low_resource",
                          "low_resource_fraction", "comparison", "prune", "noise", "bench"});
  RunConfig c;
  const std::string w = "config";
  if (j.contains("model")) c.model = dims_from_json(j["model"]);
  read(j, "connector", c.connector, w);
  read(j, "seed", c.seed, w);
  read(j, "out_dir", c.out_dir, w);
  read(j, "from", c.from, w);
  read(j, "workers", c.workers, w);
  read(j, "run_stages", c.run_stages, w);
  if (j.contains("stages")) {
    const auto& st = j["stages"];
    if (!st.is_array() || st.size() != 3) throw ConfigError("config.stages must list 3 stages");
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string sw = "stages[" + std::to_string(i) + "]";
      detail::reject_unknown(st[i], sw, {"epochs", "batch_size", "lr", "docs"});
      read(st[i], "epochs", c.stages[i].epochs, sw);
      read(st[i], "batch_size", c.stages[i].batch_size, sw);
      read(st[i], "lr", c.stages[i].lr, sw);
      read(st[i], "docs", c.stages[i].docs, sw);
    }
  }
  read(j, "eval_docs", c.eval_docs, w);
  read(j, "probe_docs", c.probe_docs, w);
  read(j, "low_resource", c.low_resource, w);
  read(j, "low_resource_fraction", c.low_resource_fraction, w);
  if (j.contains("comparison")) {
    const auto& cj = j["comparison"];
    detail::reject_unknown(cj, "comparison", {"regimes", "seeds"});
    read(cj, "regimes", c.comparison_regimes, "comparison");
    read(cj, "seeds", c.comparison_seeds, "comparison");
  }
  if (j.contains("prune")) {
    const auto& pj = j["prune"];
    detail::reject_unknown(pj, "prune", {"mass", "renormalize"});
    read(pj, "mass", c.prune_mass, "prune");
    read(pj, "renormalize", c.prune_renormalize, "prune");
  }
  if (j.contains("noise")) {
    const auto& nj = j["noise"];
    detail::reject_unknown(nj, "noise",
                           {"sigma", "seeds", "data_fraction", "epochs", "probe_docs", "eval_docs"});
    read(nj, "sigma", c.noise.sigma, "noise");
    read(nj, "seeds", c.noise.seeds, "noise");
    read(nj, "data_fraction", c.noise.data_fraction, "noise");
    read(nj, "epochs", c.noise.epochs, "noise");
    read(nj, "probe_docs", c.noise.probe_docs, "noise");
    read(nj, "eval_docs", c.noise.eval_docs, "noise");
  }
  if (j.contains("bench")) {
    const auto& bj = j["bench"];
    detail::reject_unknown(bj, "bench",
                           {"warmup", "iters", "num_patches", "vocab", "generate_tokens", "repeats"});
    read(bj, "warmup", c.bench.warmup, "bench");
    read(bj, "iters", c.bench.iters, "bench");
    read(bj, "num_patches", c.bench.num_patches, "bench");
    read(bj, "vocab", c.bench.vocab, "bench");
    read(bj, "generate_tokens", c.bench.generate_tokens, "bench");
    read(bj, "repeats", c.bench.repeats, "bench");
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// Parses "1,2,3" or "3".
inline std::vector<int> parse_stage_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item.size() != 1 || item[0] < '1' || item[0] > '3') {
      throw ConfigError("bad stage '" + item + "' in --stages (expected e.g. 1,2,3)");
    }
    out.push_back(item[0] - '0');
  }
  if (out.empty()) throw ConfigError("--stages is empty");
  return out;
}

}  // namespace alignvlm
