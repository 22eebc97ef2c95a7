// alignvlm: synthetic data, staged training, evaluation and the analysis
// experiments behind one binary.
//
//   alignvlm <synth|train|eval|analyze|prune|noise|bench|plot>
//            [--config FILE] [--seed N] [--out DIR] [--stages LIST]
//            [--connector NAME] [--from CKPT] [--max-steps N]
//
// Exit codes: 0 ok, 1 usage/config error, 2 data/shape/IO error,
// 3 numeric error (including training divergence).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "alignvlm/experiments.hpp"

namespace fs = std::filesystem;
using namespace alignvlm;
using Real = float;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string stages;
  std::string connector;
  std::string from;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t max_steps = 0;
};

RunConfig effective_config(const Flags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (const char* env = std::getenv("ALIGNVLM_OUT"); env && *env) cfg.out_dir = env;
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.seed_set) cfg.seed = f.seed;
  if (!f.stages.empty()) cfg.run_stages = parse_stage_list(f.stages);
  if (!f.connector.empty()) cfg.connector = f.connector;
  if (!f.from.empty()) cfg.from = f.from;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const RunConfig& cfg) {
  const fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

// Timestamps go here and nowhere else, so every other output is
// reproducible byte for byte.
void log_line(const RunConfig& cfg, const std::string& msg) {
  std::ofstream log(out_dir(cfg) / "run.log", std::ios::app);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
  log << stamp << " " << msg << "\n";
}

void echo_config(const RunConfig& cfg) {
  write_text(out_dir(cfg) / "effective_config.json", to_json(cfg).dump(2) + "\n");
}

Dataset require_dataset(const RunConfig& cfg) {
  return load_dataset(fs::path(cfg.out_dir) / "data", cfg.model.vocab);
}

std::string default_checkpoint(const RunConfig& cfg) {
  if (!cfg.from.empty()) return cfg.from;
  return (fs::path(cfg.out_dir) / "checkpoints" / "stage3.ckpt").string();
}

Checkpoint<Real> require_checkpoint(const std::string& path) {
  if (!fs::exists(path)) {
    throw IoError("checkpoint " + path + " not found; run `alignvlm train` first (or pass --from)");
  }
  return load_checkpoint<Real>(path);
}

fs::path require_csv(const RunConfig& cfg, const std::string& name, const std::string& producer) {
  const auto p = fs::path(cfg.out_dir) / name;
  if (!fs::exists(p)) {
    throw IoError(p.string() + " not found; run `alignvlm " + producer + "` first");
  }
  return p;
}

void require_align(const Checkpoint<Real>& ck, const std::string& path) {
  if (ck.model.kind() != ConnectorKind::Align) {
    throw ConfigError("checkpoint " + path + " uses the " +
                      std::string(connector_name(ck.model.kind())) +
                      " connector; this analysis needs an ALIGN model");
  }
}

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& cfg) {
  const auto data = make_dataset(cfg);
  const auto dir = out_dir(cfg) / "data";
  save_dataset(dir, data, cfg.model.vocab);
  for (const Split* s : data.all())
    std::cout << s->name << ": " << s->docs.size() << " docs (" << style_name(s->style) << ")\n";
  std::cout << "wrote " << dir.string() << "\n";
  return 0;
}

int cmd_compare(const RunConfig& cfg) {
  const auto data = require_dataset(cfg);
  std::vector<ComparisonRow> rows;
  for (const auto& regime : cfg.comparison_regimes)
    for (auto seed : cfg.comparison_seeds) {
      auto r = run_comparison<Real>(cfg, data, regime, seed);
      for (const auto& row : r)
        std::cout << regime << " seed " << seed << " " << row.connector
                  << " token_accuracy " << fmt_double(row.eval.token_accuracy) << "\n";
      rows.insert(rows.end(), r.begin(), r.end());
    }
  const auto dir = out_dir(cfg);
  write_csv(dir / "comparison.csv", comparison_table(rows));
  const auto gap = comparison_gap_table(rows);
  write_csv(dir / "comparison_gap.csv", gap);
  for (std::size_t r = 0; r < gap.rows.size(); ++r)
    std::cout << "align - mlp (" << gap.str(r, "regime") << ", seed " << gap.str(r, "seed")
              << "): " << gap.str(r, "gap") << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const Flags& flags) {
  if (cfg.connector == "all") return cmd_compare(cfg);
  const auto data = require_dataset(cfg);
  Checkpoint<Real> ck;
  if (!cfg.from.empty()) {
    ck = require_checkpoint(cfg.from);
    const auto kind = std::string(connector_name(ck.model.kind()));
    if (!flags.connector.empty() && flags.connector != kind) {
      throw ConfigError("--connector " + flags.connector + " does not match the " + kind +
                        " checkpoint " + cfg.from);
    }
  } else {
    ck.model = VlmModel<Real>::create(cfg.model, parse_connector(cfg.connector), cfg.seed);
  }
  const bool mid_stage = ck.training && !ck.training->complete;
  if (mid_stage && cfg.run_stages.front() != ck.last_stage) {
    throw ConfigError("checkpoint " + cfg.from + " stopped inside stage " +
                      std::to_string(ck.last_stage) + "; resume with --stages " +
                      std::to_string(ck.last_stage));
  }
  const double fraction = cfg.low_resource ? cfg.low_resource_fraction : 1.0;
  const auto ckdir = out_dir(cfg) / "checkpoints";
  fs::create_directories(ckdir);
  std::vector<StepRecord> log;
  for (int s : cfg.run_stages) {
    StageConfig sc = cfg.stage_config(s);
    const auto docs = take_fraction(data.stages[s - 1].docs, fraction);
    sc.dataset_size = docs.size();
    sc.max_steps = flags.max_steps;
    const auto examples = make_examples<Real>(docs, ck.model.tiling);
    const bool resuming = mid_stage && s == ck.last_stage;
    const auto before = log.size();
    auto r = train_stage(sc, ck.model, examples, [&](const StepRecord& rec) { log.push_back(rec); },
                         resuming ? &*ck.training : nullptr);
    if (resuming && !ck.history.empty() && ck.history.back().stage == s) ck.history.pop_back();
    const double last = log.size() > before ? log.back().loss : 0.0;
    ck.history.push_back({s, r.next_step, last, r.complete, sc.seed});
    ck.last_stage = s;
    ck.extra = Json{{"config", to_json(cfg)}};
    r.log.clear();
    ck.training = std::move(r);
    const auto path = ckdir / ("stage" + std::to_string(s) + ".ckpt");
    save_checkpoint(path.string(), ck);
    std::cout << "stage " << s << ": " << (log.size() - before) << " steps, final loss "
              << fmt_double(last) << " -> " << path.string() << "\n";
    if (!ck.training->complete) {
      std::cout << "stopped at step " << ck.training->next_step << "; resume with --stages " << s
                << " --from " << path.string() << "\n";
      break;
    }
  }
  write_csv(out_dir(cfg) / "train_loss.csv", loss_table(log));
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  const auto path = default_checkpoint(cfg);
  const auto ck = require_checkpoint(path);
  const auto data = require_dataset(cfg);
  const auto m = evaluate(ck.model, make_examples<Real>(data.eval.docs, ck.model.tiling));
  write_csv(out_dir(cfg) / "eval.csv", metrics_table("eval", m));
  std::cout << "token_accuracy " << fmt_double(m.token_accuracy) << "\nmean_loss "
            << fmt_double(m.mean_loss) << "\n";
  return 0;
}

int cmd_analyze(const RunConfig& cfg) {
  const auto path = default_checkpoint(cfg);
  const auto ck = require_checkpoint(path);
  require_align(ck, path);
  const auto data = require_dataset(cfg);
  std::vector<PatchBatch<Real>> probes;
  for (const auto& d : data.probes.docs) probes.push_back(prepare_patches<Real>(d.image, ck.model.tiling));
  const auto dist = aggregate_distribution(ck.model, probes, cfg.workers);
  const auto kept = prune_embeddings(dist, cfg.prune_mass);
  const auto pca = pca_2d(ck.model.text_table().weights, kept, cfg.seed);
  const auto dir = out_dir(cfg);
  write_csv(dir / "distribution.csv", distribution_table(dist));
  write_csv(dir / "pca.csv", pca_table(pca));
  write_csv(dir / "pca_components.csv", pca_components_table(pca));
  std::cout << "patches " << dist.patches << ", max token probability " << fmt_double(dist.max_prob)
            << " (token " << dist.argmax << "), entropy " << fmt_double(dist.entropy) << "\n"
            << kept.size() << " of " << dist.vocab() << " tokens carry "
            << fmt_double(cfg.prune_mass) << " of the mass\n"
            << "top-2 explained variance " << fmt_double(pca.explained_ratio()) << "\n";
  return 0;
}

int cmd_prune(const RunConfig& cfg) {
  const auto dist = distribution_from_table(read_csv(require_csv(cfg, "distribution.csv", "analyze")));
  const auto path = default_checkpoint(cfg);
  const auto ck = require_checkpoint(path);
  require_align(ck, path);
  const auto data = require_dataset(cfg);
  const auto eval = make_examples<Real>(data.eval.docs, ck.model.tiling);
  const auto kept = prune_embeddings(dist, cfg.prune_mass);
  std::vector<std::size_t> all(dist.vocab());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::string mass = "mass=" + fmt_double(cfg.prune_mass);
  std::vector<std::pair<std::string, PruneReport>> reports;
  reports.emplace_back(mass, eval_pruned(ck.model, dist, kept, eval, cfg.prune_renormalize));
  reports.emplace_back(mass + (cfg.prune_renormalize ? " no-renorm" : " renorm"),
                       eval_pruned(ck.model, dist, kept, eval, !cfg.prune_renormalize));
  reports.emplace_back("all", eval_pruned(ck.model, dist, all, eval, cfg.prune_renormalize));
  reports.emplace_back("top1", eval_pruned(ck.model, dist, {kept.front()}, eval, cfg.prune_renormalize));
  write_csv(out_dir(cfg) / "prune.csv", prune_table(reports));
  for (const auto& [name, r] : reports)
    std::cout << name << ": kept " << r.kept.size() << ", accuracy "
              << fmt_double(r.full.token_accuracy) << " -> " << fmt_double(r.pruned.token_accuracy)
              << " (delta " << fmt_double(r.delta_accuracy) << ")\n";
  return 0;
}

int cmd_noise(const RunConfig& cfg) {
  const auto data = require_dataset(cfg);
  std::vector<NoiseReport> reports;
  for (std::size_t k = 0; k < cfg.noise.seeds; ++k) {
    const std::uint64_t seed = cfg.seed + k;
    reports.push_back(run_noise_seed<Real>(cfg, data, seed));
    const auto& r = reports.back();
    std::cout << "seed " << seed << " sigma " << fmt_double(r.sigma);
    for (const auto& row : r.rows)
      std::cout << " | " << row.connector << " cos " << fmt_double(row.cosine_distance) << " drop "
                << fmt_double(row.drop);
    std::cout << "\n";
  }
  write_csv(out_dir(cfg) / "noise.csv", noise_table(reports));
  return 0;
}

int cmd_bench(const RunConfig& cfg) {
  BenchConfig bc;
  bc.warmup = cfg.bench.warmup;
  bc.iters = cfg.bench.iters;
  bc.num_patches = cfg.bench.num_patches;
  bc.generate_tokens = cfg.bench.generate_tokens;
  bc.repeats = cfg.bench.repeats;
  bc.seed = cfg.seed;
  bc.dims = cfg.model;
  bc.dims.vocab = cfg.bench.vocab;
  bc.dims.validate();
  const auto rep = bench_connectors<Real>(bc);
  write_csv(out_dir(cfg) / "bench.csv", bench_table(rep));
  for (const auto& r : rep.rows)
    std::cout << r.connector << ": " << fmt_double(r.latency_s * 1e3) << " ms/inference, "
              << fmt_double(r.tokens_per_sec) << " tokens/s, " << r.vision_tokens
              << " vision tokens, run variation " << fmt_double(r.run_variation) << "\n";
  return 0;
}

int cmd_plot(const RunConfig& cfg) {
  const fs::path dir(cfg.out_dir);
  const auto plots = out_dir(cfg) / "plots";
  fs::create_directories(plots);
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& svg) {
    write_text(plots / name, svg);
    written.push_back((plots / name).string());
  };
  if (fs::exists(dir / "distribution.csv")) {
    const auto d = distribution_from_table(read_csv(dir / "distribution.csv"));
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < d.vocab(); ++i) labels.push_back(std::to_string(i));
    emit("distribution.svg",
         svg_bar_chart(labels, d.mean, "Mean ALIGN probability per token", "probability"));
  }
  if (fs::exists(dir / "pca.csv")) {
    const auto t = read_csv(dir / "pca.csv");
    std::vector<std::array<double, 2>> pts;
    std::vector<bool> hi;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      pts.push_back({t.num(r, "pc1"), t.num(r, "pc2")});
      hi.push_back(t.str(r, "highlight") == "1");
    }
    emit("pca.svg", svg_scatter(pts, hi, "Text embeddings, top-2 principal components"));
  }
  if (fs::exists(dir / "noise.csv")) {
    const auto reps = noise_from_table(read_csv(dir / "noise.csv"));
    std::vector<std::string> names;
    std::map<std::string, std::pair<double, double>> sums;
    for (const auto& rep : reps)
      for (const auto& row : rep.rows) {
        if (!sums.count(row.connector)) names.push_back(row.connector);
        sums[row.connector].first += row.cosine_distance / double(reps.size());
        sums[row.connector].second += row.drop / double(reps.size());
      }
    std::vector<double> cos, drop;
    for (const auto& n : names) {
      cos.push_back(sums[n].first);
      drop.push_back(sums[n].second);
    }
    emit("noise_cosine.svg", svg_bar_chart(names, cos, "Cosine distance, clean vs noisy", "mean 1 - cos"));
    emit("noise_drop.svg", svg_bar_chart(names, drop, "Accuracy drop under noise", "points"));
  }
  if (fs::exists(dir / "bench.csv")) {
    const auto b = bench_from_table(read_csv(dir / "bench.csv"));
    std::vector<std::string> names;
    std::vector<double> ms;
    for (const auto& r : b.rows) {
      names.push_back(r.connector);
      ms.push_back(r.latency_s * 1e3);
    }
    emit("bench_latency.svg", svg_bar_chart(names, ms, "Inference latency", "ms"));
  }
  if (fs::exists(dir / "comparison.csv")) {
    const auto rows = comparison_from_table(read_csv(dir / "comparison.csv"));
    std::vector<std::string> names;
    std::vector<double> acc;
    for (const auto& r : rows) {
      names.push_back(r.regime + "/" + r.connector + "/" + std::to_string(r.seed));
      acc.push_back(r.eval.token_accuracy);
    }
    emit("comparison.svg", svg_bar_chart(names, acc, "Token accuracy by connector", "accuracy"));
  }
  if (written.empty()) {
    throw IoError("nothing to plot in " + dir.string() +
                  "; run `alignvlm analyze`, `noise`, `bench` or `train --connector all` first");
  }
  for (const auto& w : written) std::cout << "wrote " << w << "\n";
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const GradientStateError*>(&e)) return 3;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ALIGN connector toy vision-language model"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "write the synthetic glyph-document dataset"},
      {"train", "run the training stages (or the connector comparison with --connector all)"},
      {"eval", "token accuracy and loss of a checkpoint on the eval split"},
      {"analyze", "ALIGN vocabulary distribution and embedding PCA"},
      {"prune", "evaluate with E_text pruned to the high-probability tokens"},
      {"noise", "robustness of ALIGN vs MLP to Gaussian feature noise"},
      {"bench", "inference latency and memory per connector"},
      {"plot", "SVG figures from the CSV reports"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "JSON config file");
    sub->add_option("--seed", flags.seed, "master seed")->each([&](const std::string&) {
      flags.seed_set = true;
    });
    sub->add_option("--out", flags.out, "output directory (overrides ALIGNVLM_OUT)");
    sub->add_option("--stages", flags.stages, "stages to run, e.g. 1,2,3");
    sub->add_option("--connector", flags.connector, "align|mlp|vet|perceiver|hreducer|all");
    sub->add_option("--from", flags.from, "checkpoint to start from");
    if (name == "train") {
      sub->add_option("--max-steps", flags.max_steps, "stop each stage after this step");
    }
    subs[name] = sub;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  std::string which;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) which = name;
  try {
    const RunConfig cfg = effective_config(flags);
    echo_config(cfg);
    std::string args;
    for (int i = 1; i < argc; ++i) args += std::string(i > 1 ? " " : "") + argv[i];
    log_line(cfg, args);
    int rc = 0;
    if (which == "synth") rc = cmd_synth(cfg);
    else if (which == "train") rc = cmd_train(cfg, flags);
    else if (which == "eval") rc = cmd_eval(cfg);
    else if (which == "analyze") rc = cmd_analyze(cfg);
    else if (which == "prune") rc = cmd_prune(cfg);
    else if (which == "noise") rc = cmd_noise(cfg);
    else if (which == "bench") rc = cmd_bench(cfg);
    else if (which == "plot") rc = cmd_plot(cfg);
    log_line(cfg, which + " exit " + std::to_string(rc));
    return rc;
  } catch (const std::exception& e) {
    std::cerr << "alignvlm " << which << ": " << e.what() << "\n";
    return exit_code_for(e);
  }
}
