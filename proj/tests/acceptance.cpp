// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Criteria 5 and 10 reuse the model trained for 6.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "alignvlm/checkpoint.hpp"
#include "alignvlm/experiments.hpp"
#include "alignvlm/grad_check.hpp"
#include "test_support.hpp"

using namespace alignvlm;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Plain per-dimension bounds of E, computed here rather than by the library.
std::pair<std::vector<double>, std::vector<double>> column_bounds(const Tensor<double>& e) {
  std::vector<double> lo(e.cols(), INFINITY), hi(e.cols(), -INFINITY);
  for (std::size_t i = 0; i < e.rows(); ++i)
    for (std::size_t j = 0; j < e.cols(); ++j) {
      lo[j] = std::min(lo[j], e(i, j));
      hi[j] = std::max(hi[j], e(i, j));
    }
  return {lo, hi};
}

struct AlignCase {
  Tensor<double> feats;
  AlignParams<double> params;
  EmbeddingTable<double> table;
};

AlignCase random_align_case(Rng& rng) {
  const auto n = static_cast<std::size_t>(rng.uniform_int(1, 12));
  const auto d = static_cast<std::size_t>(rng.uniform_int(1, 10));
  const auto dm = static_cast<std::size_t>(rng.uniform_int(2, 8));
  const auto v = static_cast<std::size_t>(rng.uniform_int(2, 40));
  AlignCase c;
  c.feats = rng.normal_tensor<double>({n, d}, std::exp(rng.uniform(-2, 3)));
  c.table = EmbeddingTable<double>(rng.normal_tensor<double>({v, dm}, std::exp(rng.uniform(-3, 1))));
  c.params = init_align_from_head(rng.normal_tensor<double>({v, dm}, 1.0), d, rng, &c.table);
  c.params.w1 = rng.normal_tensor<double>({dm, d}, std::exp(rng.uniform(-2, 1)));
  c.params.ln_b_gamma = rng.normal_tensor<double>({v}, std::exp(rng.uniform(-1, 2)));
  c.params.ln_b_beta = rng.normal_tensor<double>({v}, 1.0);
  return c;
}

AlignOutput<double> run_align(Graph<double>& g, const AlignCase& c) {
  return align_forward(g, g.constant(c.feats), c.params, g.constant(c.table.weights));
}

// ---------------------------------------------------------------------------

Verdict simplex_and_hull() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  std::size_t bad_rows = 0, escapes = 0, rows = 0;
  double worst_sum = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto c = random_align_case(rng);
    Graph<double> g;
    const auto out = run_align(g, c);
    const auto& p = out.probs.value();
    for (std::size_t i = 0; i < p.rows(); ++i, ++rows) {
      double s = 0, mn = 1;
      for (std::size_t j = 0; j < p.cols(); ++j) {
        s += p(i, j);
        mn = std::min(mn, p(i, j));
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1));
      if (std::abs(s - 1) > 1e-6 || mn < 0) ++bad_rows;
    }
    const auto [lo, hi] = column_bounds(c.table.weights);
    const auto& y = out.aligned.value();
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) {
        const double slack = 1e-12 * std::max({1.0, std::abs(lo[j]), std::abs(hi[j])});
        if (y(i, j) < lo[j] - slack || y(i, j) > hi[j] + slack) ++escapes;
      }
  }
  // MLP counterexample: a large weight pushes the output past E's bounds.
  Rng r2(7);
  const auto e = r2.normal_tensor<double>({16, 4}, 0.1);
  const auto [lo, hi] = column_bounds(e);
  MlpParams<double> mlp;
  mlp.w = Tensor<double>::matrix(4, 3);
  mlp.w(0, 0) = 100.0;
  mlp.b = Tensor<double>::vector(4);
  Graph<double> g;
  const auto y = mlp_forward(g, g.constant(Tensor<double>::from_rows({{1, 0, 0}})), mlp).value();
  const bool mlp_escapes = y(0, 0) > hi[0] || y(0, 0) < lo[0];
  const double secs = seconds_since(t0);
  v.detail << rows << " rows, max |sum-1| " << worst_sum << ", " << bad_rows << " invalid rows, "
           << escapes << " hull escapes; MLP output " << y(0, 0) << " vs bound [" << lo[0] << ", "
           << hi[0] << "]; " << secs << " s";
  v.require(bad_rows == 0, "simplex");
  v.require(escapes == 0, "hull");
  v.require(mlp_escapes, "MLP counterexample");
  v.require(secs < 10, "runtime < 10 s");
  return v;
}

Verdict gradients() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  using testing_support::weighted_grad_check;
  Rng rng(2002);
  const std::size_t n = 8, d = 3, dm = 4, vocab = 6;
  auto feats = rng.normal_tensor<double>({n, d}, 1.0);
  auto table = rng.normal_tensor<double>({vocab, dm}, 1.0);
  std::vector<PatchPos> layout;
  for (std::uint32_t r = 0; r < 2; ++r)
    for (std::uint32_t c = 0; c < 4; ++c) layout.push_back({0, r, c});
  double worst = 0;
  auto note = [&](const std::string& name, const GradCheckResult& res) {
    v.detail << name << " " << res.max_rel_error << "; ";
    worst = std::max(worst, res.max_rel_error);
  };

  {
    EmbeddingTable<double> et(table);
    auto p = init_align_from_head(rng.normal_tensor<double>({vocab, dm}, 1.0), d, rng, &et);
    p.w1 = rng.normal_tensor<double>({dm, d}, 1.0);
    p.ln_a_gamma = rng.normal_tensor<double>({dm}, 1.0);
    p.ln_a_beta = rng.normal_tensor<double>({dm}, 1.0);
    p.ln_b_gamma = rng.normal_tensor<double>({vocab}, 1.0);
    p.ln_b_beta = rng.normal_tensor<double>({vocab}, 1.0);
    std::vector<Tensor<double>*> wrt{&feats, &table};
    p.for_each_param([&](const std::string&, Tensor<double>& t) { wrt.push_back(&t); });
    note("align", weighted_grad_check(
                      [&](Graph<double>& g) { return align_forward(g, g.param(feats), p, g.param(table)).aligned; },
                      wrt, rng));
  }
  for (auto act : {Activation::ReLU, Activation::GELU}) {
    auto p = MlpParams<double>::init(d, dm, rng, act);
    p.b = rng.normal_tensor<double>({dm}, 1.0);
    note(act == Activation::ReLU ? "mlp/relu" : "mlp/gelu",
         weighted_grad_check([&](Graph<double>& g) { return mlp_forward(g, g.param(feats), p); },
                             {&feats, &p.w, &p.b}, rng));
  }
  {
    auto p = VetParams<double>::init(d, dm, 5, rng);
    p.table = rng.normal_tensor<double>({5, dm}, 1.0);
    note("vet", weighted_grad_check([&](Graph<double>& g) { return vet_forward(g, g.param(feats), p).tokens; },
                                    {&feats, &p.w, &p.table}, rng));
  }
  {
    auto p = PerceiverParams<double>::init(d, dm, 3, rng);
    note("perceiver",
         weighted_grad_check([&](Graph<double>& g) { return perceiver_forward(g, g.param(feats), p).tokens; },
                             {&feats, &p.latents, &p.key, &p.value, &p.out_proj}, rng));
  }
  {
    auto p = HReducerParams<double>::init(d, dm, rng);
    note("hreducer",
         weighted_grad_check([&](Graph<double>& g) { return hreducer_forward(g, g.param(feats), layout, p); },
                             {&feats, &p.merge}, rng));
  }

  const auto dims = testing_support::tiny_dims();
  const auto tiling = TilingConfig::standard(dims.tile_side, dims.patch_side, dims.max_tiles);
  const Example<double> ex{prepare_patches<double>(testing_support::random_image(rng, 8, 8), tiling),
                           {kBosToken},
                           {2, 5, 3, 6}};
  for (auto kind : kAllConnectors) {
    auto m = VlmModel<double>::create(dims, kind, 5);
    std::vector<Tensor<double>*> wrt;
    m.for_each_param([&](const std::string&, Tensor<double>& t, ParamGroup) { wrt.push_back(&t); });
    std::function<Var<double>(Graph<double>&)> loss = [&](Graph<double>& g) { return example_loss(g, m, ex).first; };
    note("model/" + std::string(connector_name(kind)), grad_check<double>(loss, wrt, 1e-3));
  }
  const double secs = seconds_since(t0);
  v.detail << "worst " << worst << "; " << secs << " s";
  v.require(worst <= 1e-6, "max relative error <= 1e-6");
  v.require(secs < 60, "runtime < 60 s");
  return v;
}

Verdict oracle_equivalence() {
  Verdict v;
  Rng rng(3003);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = random_align_case(rng);
    Graph<double> g;
    const auto out = run_align(g, c);
    const auto& p = out.probs.value();
    const auto& e = c.table.weights;
    const auto& y = out.aligned.value();
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < e.cols(); ++j) {
        long double s = 0;
        for (std::size_t k = 0; k < p.cols(); ++k) s += (long double)p(i, k) * e(k, j);
        worst = std::max(worst, std::abs(y(i, j) - double(s)));
      }
  }
  v.detail << "100 instances, max |F'_align - P E| " << worst;
  v.require(worst <= 1e-9, "within 1e-9");
  return v;
}

Verdict noise_robustness(const RunConfig& cfg, const Dataset& data) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t cos_ok = 0, drop_ok = 0;
  const std::size_t seeds = 5;
  for (std::size_t k = 0; k < seeds; ++k) {
    const auto r = run_noise_seed<float>(cfg, data, cfg.seed + k);
    const auto& a = r.rows[0];
    const auto& m = r.rows[1];
    const double ratio = a.cosine_distance / m.cosine_distance;
    cos_ok += ratio < 0.25;
    drop_ok += a.drop < m.drop;
    v.detail << "seed " << cfg.seed + k << ": cos " << a.cosine_distance << " vs " << m.cosine_distance
             << " (ratio " << ratio << "), drop " << a.drop << " vs " << m.drop << "; ";
  }
  const double secs = seconds_since(t0);
  v.detail << "cosine ratio < 0.25 in " << cos_ok << "/5, smaller drop in " << drop_ok << "/5; "
           << secs << " s";
  v.require(cos_ok == seeds, "cosine ratio < 0.25 in every seed");
  v.require(drop_ok >= 4, "smaller drop in >= 4 seeds");
  v.require(secs < 300, "runtime < 5 min");
  return v;
}

Verdict pruning(const VlmModel<float>& m, const Dataset& data) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<PatchBatch<float>> probes;
  for (const auto& d : data.probes.docs) probes.push_back(prepare_patches<float>(d.image, m.tiling));
  const auto dist = aggregate_distribution(m, probes);
  const auto eval = make_examples<float>(data.eval.docs, m.tiling);
  const auto kept = prune_embeddings(dist, 0.999);
  const auto mass = eval_pruned(m, dist, kept, eval);
  const auto top1 = eval_pruned(m, dist, {kept.front()}, eval);
  const double secs = seconds_since(t0);
  v.detail << "99.9% mass keeps " << kept.size() << "/" << dist.vocab() << " tokens, accuracy "
           << mass.full.token_accuracy << " -> " << mass.pruned.token_accuracy << " ("
           << 100 * mass.delta_accuracy << " points); 1 token: -> " << top1.pruned.token_accuracy
           << " (" << 100 * top1.delta_accuracy << " points); " << secs << " s";
  v.require(std::abs(100 * mass.delta_accuracy) <= 1.0, "99.9% mass within 1 point");
  v.require(100 * top1.delta_accuracy < -20.0, "1 token degrades by > 20 points");
  v.require(secs < 180, "runtime < 3 min");
  return v;
}

std::map<std::string, std::uint64_t> encoder_checksums(const VlmModel<float>& m) {
  std::map<std::string, std::uint64_t> out;
  m.for_each_param([&](const std::string& n, const Tensor<float>& t, ParamGroup g) {
    if (g == ParamGroup::Encoder) out[n] = checksum(t);
  });
  return out;
}

Verdict staged_training(const RunConfig& cfg, const Dataset& data, std::optional<VlmModel<float>>& trained) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  auto m = VlmModel<float>::create(cfg.model, ConnectorKind::Align, cfg.seed);
  ScheduleOptions first;
  first.stages = {1, 2};
  const auto r12 = train_schedule(cfg, m, data, first);
  const auto before = encoder_checksums(m);
  ScheduleOptions third;
  third.stages = {3};
  const auto r3 = train_schedule(cfg, m, data, third);
  const bool frozen = encoder_checksums(m) == before;
  const auto metrics = evaluate(m, make_examples<float>(data.eval.docs, m.tiling));
  const double secs = seconds_since(t0);
  v.detail << "stage 3 encoder " << (frozen ? "bit-identical" : "CHANGED") << "; final losses "
           << r12.history[0].final_loss << ", " << r12.history[1].final_loss << ", "
           << r3.history[0].final_loss << "; eval token accuracy " << metrics.token_accuracy
           << " over " << metrics.tokens << " tokens (loss " << metrics.mean_loss << "); " << secs << " s";
  v.require(frozen, "encoder frozen in stage 3");
  v.require(metrics.token_accuracy >= 0.80, "accuracy >= 0.80");
  v.require(secs < 1200, "runtime < 20 min");
  trained = std::move(m);
  return v;
}

Verdict comparison(const RunConfig& cfg, const Dataset& data, const fs::path& scratch) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> csv;
  std::vector<std::vector<ComparisonRow>> runs;
  for (int rep = 0; rep < 2; ++rep) {
    std::vector<ComparisonRow> rows;
    for (auto seed : cfg.comparison_seeds) {
      auto r = run_comparison<float>(cfg, data, "low", seed);
      rows.insert(rows.end(), r.begin(), r.end());
    }
    const auto path = scratch / ("comparison" + std::to_string(rep) + ".csv");
    write_csv(path, comparison_table(rows));
    csv.push_back(read_text(path));
    runs.push_back(std::move(rows));
  }
  std::set<std::string> connectors;
  for (const auto& r : runs[0]) connectors.insert(r.connector);
  const auto gap = comparison_gap_table(runs[0]);
  for (const auto& r : runs[0]) v.detail << r.connector << " " << r.eval.token_accuracy << "; ";
  for (std::size_t r = 0; r < gap.rows.size(); ++r)
    v.detail << "ALIGN - MLP gap (seed " << gap.str(r, "seed") << ") " << gap.num(r, "gap") << "; ";
  v.detail << seconds_since(t0) << " s for two runs";
  v.require(connectors.size() == 5, "all five connectors");
  v.require(runs[0] == runs[1] && csv[0] == csv[1], "deterministic");
  v.require(gap.rows.size() == cfg.comparison_seeds.size(), "gap per seed");
  return v;
}

Verdict bench() {
  Verdict v;
  BenchConfig bc;
  bc.num_patches = 144;
  bc.dims.feature_dim = 64;
  bc.dims.embed_dim = 32;
  bc.dims.vocab = 1024;
  const auto rep = bench_connectors<float>(bc);
  for (const auto& r : rep.rows)
    v.detail << r.connector << " " << r.latency_s * 1e3 << " ms (var " << r.run_variation << "); ";
  const auto& a = rep.row("align");
  const auto& m = rep.row("mlp");
  v.detail << "ALIGN/MLP " << a.latency_s / m.latency_s;
  v.require(a.latency_s <= 1.5 * m.latency_s, "ALIGN <= 1.5 x MLP");
  v.require(a.run_variation <= 0.2 && m.run_variation <= 0.2, "run variation <= 20%");
  return v;
}

Verdict tiling() {
  Verdict v;
  const auto cfg = TilingConfig::standard();
  std::vector<GridShape> grids;
  for (std::uint32_t r = 1; r <= 9; ++r)
    for (std::uint32_t c = 1; r * c <= 9; ++c) grids.push_back({r, c});
  auto coverage = [&](double w, double h, GridShape g) {
    const double cw = g.cols * double(cfg.tile_side), ch = g.rows * double(cfg.tile_side);
    const double s = std::min(cw / w, ch / h);
    return (w * s) * (h * s) / (cw * ch);
  };
  Rng rng(9009);
  std::size_t mismatches = 0, too_many = 0, bad_counts = 0;
  const std::size_t per_tile = (cfg.tile_side / cfg.patch_side) * (cfg.tile_side / cfg.patch_side);
  for (int trial = 0; trial < 200; ++trial) {
    const auto w = static_cast<std::uint32_t>(rng.uniform_int(1, 2000));
    const auto h = static_cast<std::uint32_t>(rng.uniform_int(1, 2000));
    double best = 0;
    std::uint32_t fewest = 99;
    for (const auto& g : grids) best = std::max(best, coverage(w, h, g));
    for (const auto& g : grids)
      if (std::abs(coverage(w, h, g) - best) <= 1e-12 * best) fewest = std::min(fewest, g.tiles());
    const auto chosen = select_grid(w, h, cfg);
    if (std::abs(coverage(w, h, chosen) - best) > 1e-12 * best || chosen.tiles() != fewest) ++mismatches;
    if (chosen.tiles() > 9) ++too_many;
    const auto batch = prepare_patches<float>(Image(w, h, 1), cfg);
    if (batch.patches.rows() != std::size_t(chosen.tiles()) * per_tile) ++bad_counts;
  }
  v.detail << "200 sizes: " << mismatches << " oracle mismatches, " << too_many << " grids over 9 tiles, "
           << bad_counts << " patch-count mismatches";
  v.require(mismatches == 0, "oracle");
  v.require(too_many == 0, "tile count");
  v.require(bad_counts == 0, "patch counts");
  return v;
}

Verdict persistence(const VlmModel<float>& trained, const Dataset& data, const fs::path& scratch) {
  Verdict v;
  const auto eval = make_examples<float>(data.eval.docs, trained.tiling);
  const auto path = (scratch / "model.ckpt").string();
  save_checkpoint(path, Checkpoint<float>{trained, {}, 3, std::nullopt, Json::object()});
  const auto back = load_checkpoint<float>(path);
  const auto a = evaluate(trained, eval);
  const auto b = evaluate(back.model, eval);
  v.require(a == b, "round-trip metrics bit-exact");

  // Two runs from the same config, on a smaller corpus.
  RunConfig small;
  for (auto& s : small.stages) s.docs = 256;
  small.eval_docs = 64;
  const auto d = make_dataset(small);
  std::vector<std::vector<StepRecord>> logs;
  std::vector<EvalMetrics> metrics;
  for (int rep = 0; rep < 2; ++rep) {
    auto m = VlmModel<float>::create(small.model, ConnectorKind::Align, small.seed);
    logs.push_back(train_schedule(small, m, d).log);
    metrics.push_back(evaluate(m, make_examples<float>(d.eval.docs, m.tiling)));
  }
  v.detail << "checkpoint eval " << a.token_accuracy << "/" << a.mean_loss << " vs " << b.token_accuracy
           << "/" << b.mean_loss << "; repeated run: " << logs[0].size() << " logged steps "
           << (logs[0] == logs[1] ? "identical" : "DIFFER") << ", metrics "
           << (metrics[0] == metrics[1] ? "identical" : "DIFFER");
  v.require(logs[0] == logs[1] && metrics[0] == metrics[1], "identical logs");
  return v;
}

}  // namespace

int main() {
  const auto scratch = fs::temp_directory_path() / "alignvlm_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  std::vector<std::pair<int, Verdict>> results;
  auto report = [&](int id, const char* name, Verdict v) {
    std::printf("criterion %2d %-28s %s  %s\n", id, name, v.pass ? "PASS" : "FAIL", v.detail.str().c_str());
    std::fflush(stdout);
    results.emplace_back(id, std::move(v));
  };

  const RunConfig cfg;
  const auto data = make_dataset(cfg);
  std::optional<VlmModel<float>> trained;

  report(1, "simplex and hull", simplex_and_hull());
  report(2, "gradient checks", gradients());
  report(3, "P.E oracle", oracle_equivalence());
  report(4, "noise robustness", noise_robustness(cfg, data));
  auto staged = staged_training(cfg, data, trained);
  report(5, "pruning", pruning(*trained, data));
  report(6, "staged training", std::move(staged));
  report(7, "connector comparison", comparison(cfg, data, scratch));
  report(8, "runtime bench", bench());
  report(9, "tiling", tiling());
  report(10, "determinism and persistence", persistence(*trained, data, scratch));

  std::size_t passed = 0;
  for (const auto& [id, v] : results) passed += v.pass;
  std::printf("%zu/%zu criteria passed\n", passed, results.size());
  fs::remove_all(scratch);
  return passed == results.size() ? 0 : 1;
}
