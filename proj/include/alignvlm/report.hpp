#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "alignvlm/analysis.hpp"
#include "alignvlm/checkpoint.hpp"

namespace alignvlm {

// ---------------------------------------------------------------------------
// CSV

/// Text that parses back to the same double.
inline std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw InputError("not a number: '" + s + "'");
  }
  if (used != s.size()) throw InputError("not a number: '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    throw InputError("not an unsigned integer: '" + s + "'");
  }
  if (used != s.size() || s.empty() || s[0] == '-') {
    throw InputError("not an unsigned integer: '" + s + "'");
  }
  return v;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw InputError("CSV has no column '" + std::string(name) + "'");
  }
  const std::string& str(std::size_t r, std::string_view name) const { return rows.at(r).at(col(name)); }
  double num(std::size_t r, std::string_view name) const { return parse_double(str(r, name)); }
  std::uint64_t u64(std::size_t r, std::string_view name) const { return parse_u64(str(r, name)); }
};

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

inline std::string to_csv(const CsvTable& t) {
  std::string out;
  auto line = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += detail::csv_field(fields[i]);
    }
    out += '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) {
    if (r.size() != t.header.size()) throw ShapeError("CSV row width differs from the header");
    line(r);
  }
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> lines;
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
      any = true;
    } else if (c == '\n') {
      fields.push_back(std::move(cur));
      cur.clear();
      lines.push_back(std::move(fields));
      fields.clear();
      any = false;
    } else if (c != '\r') {
      cur += c;
      any = true;
    }
  }
  if (quoted) throw InputError("CSV ends inside a quoted field");
  if (any) {
    fields.push_back(std::move(cur));
    lines.push_back(std::move(fields));
  }
  if (lines.empty()) throw InputError("CSV is empty");
  CsvTable t;
  t.header = std::move(lines.front());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].size() != t.header.size()) {
      throw InputError("CSV line " + std::to_string(i + 1) + " has " +
                       std::to_string(lines[i].size()) + " fields, header has " +
                       std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(lines[i]));
  }
  return t;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_csv(const std::filesystem::path& path, const CsvTable& t) { write_text(path, to_csv(t)); }
inline CsvTable read_csv(const std::filesystem::path& path) { return parse_csv(read_text(path)); }

namespace detail {

template <class V>
std::string join_ids(const V& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ';';
    if constexpr (std::is_floating_point_v<typename V::value_type>) {
      s += fmt_double(ids[i]);
    } else {
      s += std::to_string(ids[i]);
    }
  }
  return s;
}

inline std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(';', start);
    out.push_back(s.substr(start, p - start));
    if (p == std::string::npos) break;
    start = p + 1;
  }
  return out;
}

}  // namespace detail

// --- per-step training log ---

inline CsvTable loss_table(const std::vector<StepRecord>& log) {
  CsvTable t{{"stage", "step", "epoch", "loss"}, {}};
  for (const auto& r : log)
    t.rows.push_back({std::to_string(r.stage), std::to_string(r.step), std::to_string(r.epoch),
                      fmt_double(r.loss)});
  return t;
}

inline std::vector<StepRecord> loss_from_table(const CsvTable& t) {
  std::vector<StepRecord> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    out.push_back({static_cast<int>(t.u64(r, "stage")), t.u64(r, "step"), t.u64(r, "epoch"),
                   t.num(r, "loss")});
  return out;
}

// --- evaluation metrics ---

inline std::vector<std::string> metrics_fields(const EvalMetrics& m) {
  return {std::to_string(m.docs), std::to_string(m.tokens), fmt_double(m.token_accuracy),
          fmt_double(m.mean_loss)};
}

inline CsvTable metrics_table(const std::string& split, const EvalMetrics& m) {
  CsvTable t{{"split", "docs", "tokens", "token_accuracy", "mean_loss"}, {}};
  auto f = metrics_fields(m);
  f.insert(f.begin(), split);
  t.rows.push_back(std::move(f));
  return t;
}

inline EvalMetrics metrics_from_row(const CsvTable& t, std::size_t r, const std::string& prefix = "") {
  EvalMetrics m;
  m.docs = t.u64(r, prefix + "docs");
  m.tokens = t.u64(r, prefix + "tokens");
  m.token_accuracy = t.num(r, prefix + "token_accuracy");
  m.mean_loss = t.num(r, prefix + "mean_loss");
  return m;
}

// --- vocabulary distribution ---

inline CsvTable distribution_table(const MeanVocabDistribution& d) {
  CsvTable t{{"token", "mean_prob", "probes", "patches"}, {}};
  for (std::size_t i = 0; i < d.mean.size(); ++i)
    t.rows.push_back({std::to_string(i), fmt_double(d.mean[i]), std::to_string(d.probes),
                      std::to_string(d.patches)});
  return t;
}

inline MeanVocabDistribution distribution_from_table(const CsvTable& t) {
  if (t.rows.empty()) throw InputError("distribution CSV has no rows");
  MeanVocabDistribution d;
  d.mean.assign(t.rows.size(), 0.0);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto id = t.u64(r, "token");
    if (id >= d.mean.size()) throw InputError("distribution CSV token id out of range");
    d.mean[id] = t.num(r, "mean_prob");
  }
  d.probes = t.u64(0, "probes");
  d.patches = t.u64(0, "patches");
  d.argmax = static_cast<std::size_t>(std::max_element(d.mean.begin(), d.mean.end()) - d.mean.begin());
  d.max_prob = d.mean[d.argmax];
  for (double p : d.mean)
    if (p > 0) d.entropy -= p * std::log(p);
  return d;
}

// --- pruning ---

inline CsvTable prune_table(const std::vector<std::pair<std::string, PruneReport>>& reports) {
  CsvTable t{{"condition", "kept", "vocab", "mass", "renormalize", "full_docs", "full_tokens",
              "full_token_accuracy", "full_mean_loss", "pruned_docs", "pruned_tokens",
              "pruned_token_accuracy", "pruned_mean_loss", "delta_accuracy", "delta_loss",
              "kept_ids"},
             {}};
  for (const auto& [name, r] : reports) {
    std::vector<std::string> row{name, std::to_string(r.kept.size()), std::to_string(r.vocab),
                                 fmt_double(r.mass), r.renormalize ? "1" : "0"};
    for (auto& f : metrics_fields(r.full)) row.push_back(std::move(f));
    for (auto& f : metrics_fields(r.pruned)) row.push_back(std::move(f));
    row.push_back(fmt_double(r.delta_accuracy));
    row.push_back(fmt_double(r.delta_loss));
    row.push_back(detail::join_ids(r.kept));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline std::vector<std::pair<std::string, PruneReport>> prune_from_table(const CsvTable& t) {
  std::vector<std::pair<std::string, PruneReport>> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    PruneReport p;
    for (const auto& id : detail::split_ids(t.str(r, "kept_ids"))) p.kept.push_back(parse_u64(id));
    if (p.kept.size() != t.u64(r, "kept")) throw InputError("prune CSV kept count mismatch");
    p.vocab = t.u64(r, "vocab");
    p.mass = t.num(r, "mass");
    p.renormalize = t.str(r, "renormalize") == "1";
    p.full = metrics_from_row(t, r, "full_");
    p.pruned = metrics_from_row(t, r, "pruned_");
    p.delta_accuracy = t.num(r, "delta_accuracy");
    p.delta_loss = t.num(r, "delta_loss");
    out.emplace_back(t.str(r, "condition"), std::move(p));
  }
  return out;
}

// --- PCA ---

inline CsvTable pca_table(const PcaResult& p) {
  CsvTable t{{"token", "pc1", "pc2", "highlight"}, {}};
  for (std::size_t i = 0; i < p.coords.size(); ++i)
    t.rows.push_back({std::to_string(i), fmt_double(p.coords[i][0]), fmt_double(p.coords[i][1]),
                      p.highlight[i] ? "1" : "0"});
  return t;
}

inline CsvTable pca_components_table(const PcaResult& p) {
  CsvTable t{{"component", "eigenvalue", "total_variance", "vector"}, {}};
  for (int k = 0; k < 2; ++k)
    t.rows.push_back({std::to_string(k + 1), fmt_double(p.eigenvalues[k]),
                      fmt_double(p.total_variance), detail::join_ids(p.components[k])});
  return t;
}

inline PcaResult pca_from_tables(const CsvTable& coords, const CsvTable& comps) {
  PcaResult p;
  for (std::size_t r = 0; r < coords.rows.size(); ++r) {
    p.coords.push_back({coords.num(r, "pc1"), coords.num(r, "pc2")});
    p.highlight.push_back(coords.str(r, "highlight") == "1");
  }
  if (comps.rows.size() != 2) throw InputError("PCA components CSV needs two rows");
  for (std::size_t k = 0; k < 2; ++k) {
    p.eigenvalues[k] = comps.num(k, "eigenvalue");
    p.total_variance = comps.num(k, "total_variance");
    for (const auto& x : detail::split_ids(comps.str(k, "vector"))) p.components[k].push_back(parse_double(x));
  }
  return p;
}

// --- noise ---

inline CsvTable noise_table(const std::vector<NoiseReport>& reports) {
  CsvTable t{{"seed", "sigma", "noise_checksum", "connector", "cosine_distance", "clean_accuracy",
              "noisy_accuracy", "drop"},
             {}};
  for (const auto& rep : reports)
    for (const auto& r : rep.rows)
      t.rows.push_back({std::to_string(rep.seed), fmt_double(rep.sigma),
                        std::to_string(rep.noise_checksum), r.connector,
                        fmt_double(r.cosine_distance), fmt_double(r.clean_accuracy),
                        fmt_double(r.noisy_accuracy), fmt_double(r.drop)});
  return t;
}

inline std::vector<NoiseReport> noise_from_table(const CsvTable& t) {
  std::vector<NoiseReport> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto seed = t.u64(r, "seed");
    if (out.empty() || out.back().seed != seed) {
      out.push_back({t.num(r, "sigma"), seed, t.u64(r, "noise_checksum"), {}});
    }
    out.back().rows.push_back({t.str(r, "connector"), t.num(r, "cosine_distance"),
                               t.num(r, "clean_accuracy"), t.num(r, "noisy_accuracy"),
                               t.num(r, "drop")});
  }
  return out;
}

// --- bench ---

inline CsvTable bench_table(const BenchReport& b) {
  CsvTable t{{"connector", "samples", "latency_s", "run_latency_s", "connector_latency_s",
              "tokens_per_sec", "vision_tokens", "memory_bytes", "run_variation", "num_patches",
              "feature_dim", "embed_dim", "vocab", "generate_tokens"},
             {}};
  for (const auto& r : b.rows)
    t.rows.push_back({r.connector, std::to_string(r.samples), fmt_double(r.latency_s),
                      detail::join_ids(r.run_latency_s), fmt_double(r.connector_latency_s),
                      fmt_double(r.tokens_per_sec), std::to_string(r.vision_tokens),
                      std::to_string(r.memory_bytes), fmt_double(r.run_variation),
                      std::to_string(b.num_patches), std::to_string(b.feature_dim),
                      std::to_string(b.embed_dim), std::to_string(b.vocab),
                      std::to_string(b.generate_tokens)});
  return t;
}

inline BenchReport bench_from_table(const CsvTable& t) {
  BenchReport b;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    BenchRow row;
    row.connector = t.str(r, "connector");
    row.samples = t.u64(r, "samples");
    row.latency_s = t.num(r, "latency_s");
    for (const auto& x : detail::split_ids(t.str(r, "run_latency_s"))) row.run_latency_s.push_back(parse_double(x));
    row.connector_latency_s = t.num(r, "connector_latency_s");
    row.tokens_per_sec = t.num(r, "tokens_per_sec");
    row.vision_tokens = t.u64(r, "vision_tokens");
    row.memory_bytes = t.u64(r, "memory_bytes");
    row.run_variation = t.num(r, "run_variation");
    b.num_patches = t.u64(r, "num_patches");
    b.feature_dim = t.u64(r, "feature_dim");
    b.embed_dim = t.u64(r, "embed_dim");
    b.vocab = t.u64(r, "vocab");
    b.generate_tokens = t.u64(r, "generate_tokens");
    b.rows.push_back(std::move(row));
  }
  return b;
}

// --- connector comparison ---

struct ComparisonRow {
  std::string regime;
  std::uint64_t seed = 0;
  std::string connector;
  std::size_t train_docs = 0;
  double final_train_loss = 0;
  EvalMetrics eval;
  friend bool operator==(const ComparisonRow&, const ComparisonRow&) = default;
};

inline CsvTable comparison_table(const std::vector<ComparisonRow>& rows) {
  CsvTable t{{"regime", "seed", "connector", "train_docs", "final_train_loss", "docs", "tokens",
              "token_accuracy", "mean_loss"},
             {}};
  for (const auto& r : rows) {
    std::vector<std::string> f{r.regime, std::to_string(r.seed), r.connector,
                               std::to_string(r.train_docs), fmt_double(r.final_train_loss)};
    for (auto& x : metrics_fields(r.eval)) f.push_back(std::move(x));
    t.rows.push_back(std::move(f));
  }
  return t;
}

inline std::vector<ComparisonRow> comparison_from_table(const CsvTable& t) {
  std::vector<ComparisonRow> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    out.push_back({t.str(r, "regime"), t.u64(r, "seed"), t.str(r, "connector"),
                   t.u64(r, "train_docs"), t.num(r, "final_train_loss"), metrics_from_row(t, r)});
  return out;
}

/// ALIGN minus MLP token accuracy for every (regime, seed) that has both.
inline CsvTable comparison_gap_table(const std::vector<ComparisonRow>& rows) {
  std::map<std::pair<std::string, std::uint64_t>, std::pair<const ComparisonRow*, const ComparisonRow*>> by;
  std::vector<std::pair<std::string, std::uint64_t>> order;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.regime, r.seed);
    if (!by.count(key)) order.push_back(key);
    auto& slot = by[key];
    if (r.connector == "align") slot.first = &r;
    if (r.connector == "mlp") slot.second = &r;
  }
  CsvTable t{{"regime", "seed", "align_accuracy", "mlp_accuracy", "gap"}, {}};
  for (const auto& key : order) {
    const auto [a, m] = by[key];
    if (!a || !m) continue;
    t.rows.push_back({key.first, std::to_string(key.second), fmt_double(a->eval.token_accuracy),
                      fmt_double(m->eval.token_accuracy),
                      fmt_double(a->eval.token_accuracy - m->eval.token_accuracy)});
  }
  return t;
}

// ---------------------------------------------------------------------------
// SVG

namespace detail {

inline std::string svg_num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", x);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Vertical bar chart, one <rect class="bar"> per label. Labels are drawn
/// under their bars when there are at most 40 of them.
inline std::string svg_bar_chart(const std::vector<std::string>& labels,
                                 const std::vector<double>& values, const std::string& title,
                                 const std::string& ylabel) {
  if (labels.size() != values.size()) throw ShapeError("bar chart needs one value per label");
  if (labels.empty()) throw InputError("bar chart has no bars");
  const double w = 640, h = 360, left = 64, right = 16, top = 40, bottom = 56;
  const double pw = w - left - right, ph = h - top - bottom;
  double vmax = 0;
  for (double v : values) vmax = std::max(vmax, v);
  if (vmax <= 0) vmax = 1;
  const double slot = pw / double(values.size());
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"360\" "
                  "viewBox=\"0 0 640 360\">\n";
  s += "<rect width=\"640\" height=\"360\" fill=\"white\"/>\n";
  s += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"15\">" + detail::xml_escape(title) + "</text>\n";
  s += "<text x=\"16\" y=\"" + detail::svg_num(top + ph / 2) +
       "\" transform=\"rotate(-90 16 " + detail::svg_num(top + ph / 2) +
       ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
       detail::xml_escape(ylabel) + "</text>\n";
  s += "<line x1=\"" + detail::svg_num(left) + "\" y1=\"" + detail::svg_num(top + ph) + "\" x2=\"" +
       detail::svg_num(left + pw) + "\" y2=\"" + detail::svg_num(top + ph) +
       "\" stroke=\"black\"/>\n";
  s += "<text x=\"" + detail::svg_num(left - 6) + "\" y=\"" + detail::svg_num(top + 4) +
       "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
       detail::xml_escape(fmt_double(vmax).substr(0, 8)) + "</text>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double bh = std::max(0.0, values[i]) / vmax * ph;
    const double x = left + slot * double(i) + slot * 0.1;
    s += "<rect class=\"bar\" x=\"" + detail::svg_num(x) + "\" y=\"" +
         detail::svg_num(top + ph - bh) + "\" width=\"" + detail::svg_num(slot * 0.8) +
         "\" height=\"" + detail::svg_num(bh) + "\" fill=\"#4878a8\"><title>" +
         detail::xml_escape(labels[i]) + ": " + fmt_double(values[i]) + "</title></rect>\n";
    if (values.size() <= 40) {
      s += "<text x=\"" + detail::svg_num(x + slot * 0.4) + "\" y=\"" +
           detail::svg_num(top + ph + 16) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
           detail::xml_escape(labels[i]) + "</text>\n";
    }
  }
  s += "</svg>\n";
  return s;
}

/// Scatter of 2-D points; highlighted points are drawn last, in red.
inline std::string svg_scatter(const std::vector<std::array<double, 2>>& pts,
                               const std::vector<bool>& highlight, const std::string& title) {
  if (pts.size() != highlight.size()) throw ShapeError("scatter needs one flag per point");
  if (pts.empty()) throw InputError("scatter has no points");
  double x0 = pts[0][0], x1 = x0, y0 = pts[0][1], y1 = y0;
  for (const auto& p : pts) {
    x0 = std::min(x0, p[0]);
    x1 = std::max(x1, p[0]);
    y0 = std::min(y0, p[1]);
    y1 = std::max(y1, p[1]);
  }
  const double sx = x1 > x0 ? 560.0 / (x1 - x0) : 1.0, sy = y1 > y0 ? 280.0 / (y1 - y0) : 1.0;
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"360\" "
                  "viewBox=\"0 0 640 360\">\n";
  s += "<rect width=\"640\" height=\"360\" fill=\"white\"/>\n";
  s += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"15\">" + detail::xml_escape(title) + "</text>\n";
  for (int pass = 0; pass < 2; ++pass)
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (highlight[i] != (pass == 1)) continue;
      const double cx = 40 + (pts[i][0] - x0) * sx, cy = 320 - (pts[i][1] - y0) * sy;
      s += "<circle class=\"" + std::string(pass ? "point hi" : "point") + "\" cx=\"" +
           detail::svg_num(cx) + "\" cy=\"" + detail::svg_num(cy) + "\" r=\"" +
           (pass ? "3.5" : "2.5") + "\" fill=\"" + (pass ? "#c83232" : "#9aa5b1") + "\"/>\n";
    }
  s += "</svg>\n";
  return s;
}

}  // namespace alignvlm
