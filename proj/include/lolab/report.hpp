#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "lolab/config.hpp"
#include "lolab/probes.hpp"

namespace lolab {

/// One optimizee run. metric is "accuracy" (with the counts it was computed
/// from) or "r2" (counts zero).
struct RunRecord {
  std::string run_id;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string experiment;
  std::string dataset;
  std::string architecture;
  std::string regularizer;
  std::string arm;
  std::size_t task = 0;
  std::string status = "ok";  // ok | diverged | failed
  double final_train_loss = 0.0;
  std::string metric;
  double metric_at_convergence = 0.0;
  double metric_at_completion = 0.0;
  std::size_t correct_at_convergence = 0;
  std::size_t correct_at_completion = 0;
  std::size_t total = 0;
  double param_norm = 0.0;
  std::optional<std::size_t> convergence_step;
  std::size_t steps = 0;
  std::size_t probe_rows = 0;
  std::string error;
  double wall_clock_s = 0.0;  // last column; excluded from determinism checks

  bool ok() const { return status == "ok"; }
};

struct ProbeRow {
  std::string run_id;
  Stage stage = Stage::AtCompletion;
  ProbeKind kind = ProbeKind::MaxLoss;
  double radius = 0.0;
  double base = 0.0;
  std::vector<double> trajectory;
  double final_value = 0.0;
  double gap = 0.0;
};

inline ProbeRow probe_row(const std::string& run_id, const ProbeReport& r) {
  return {run_id, r.stage, r.kind, r.radius, r.base, r.trajectory, r.final_value, r.gap};
}

// ---- statistics -----------------------------------------------------------

/// 1 - SS_res / SS_tot.
inline double r_squared(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw ShapeError("r_squared: length mismatch");
  if (target.size() < 2) throw Error("r_squared: need at least 2 targets");
  double mean = 0.0;
  for (double t : target) mean += t;
  mean /= static_cast<double>(target.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    ss_res += (target[i] - pred[i]) * (target[i] - pred[i]);
    ss_tot += (target[i] - mean) * (target[i] - mean);
  }
  if (!(ss_tot > 0)) throw Error("r_squared: targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

struct Summary {
  std::size_t n = 0;
  double mean = std::nan("");
  double std = std::nan("");  // sample (n - 1) deviation; nan for n < 2
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  s.mean = m;
  if (v.size() >= 2) {
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline std::string fmt_pm(const Summary& s) {
  if (s.n == 0) return "n/a";
  char buf[64];
  if (s.n < 2)
    std::snprintf(buf, sizeof buf, "%.4f", s.mean);
  else
    std::snprintf(buf, sizeof buf, "%.4f ± %.4f", s.mean, s.std);
  return buf;
}

// ---- CSV ------------------------------------------------------------------

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return HUGE_VAL;
  if (s == "-inf") return -HUGE_VAL;
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw FormatError("csv: bad number '" + s + "'");
  return v;
}

inline std::size_t parse_size(const std::string& s) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-') throw FormatError("csv: bad integer '" + s + "'");
  return static_cast<std::size_t>(v);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quote");
  return out;
}

inline const std::vector<std::string>& results_columns() {
  static const std::vector<std::string> cols{
      "run_id", "config_hash", "seed", "experiment", "dataset", "architecture", "regularizer", "arm", "task",
      "status", "final_train_loss", "metric", "metric_at_convergence", "metric_at_completion",
      "correct_at_convergence", "correct_at_completion", "total", "param_norm", "convergence_step", "steps",
      "probe_rows", "error", "wall_clock_s"};
  return cols;
}

inline std::string results_csv(const std::vector<RunRecord>& records) {
  std::string out;
  for (std::size_t i = 0; i < results_columns().size(); ++i) out += (i ? "," : "") + results_columns()[i];
  out += "\n";
  for (const auto& r : records) {
    std::vector<std::string> f{r.run_id,
                               r.config_hash,
                               std::to_string(r.seed),
                               r.experiment,
                               r.dataset,
                               r.architecture,
                               r.regularizer,
                               r.arm,
                               std::to_string(r.task),
                               r.status,
                               fmt_double(r.final_train_loss),
                               r.metric,
                               fmt_double(r.metric_at_convergence),
                               fmt_double(r.metric_at_completion),
                               std::to_string(r.correct_at_convergence),
                               std::to_string(r.correct_at_completion),
                               std::to_string(r.total),
                               fmt_double(r.param_norm),
                               r.convergence_step ? std::to_string(*r.convergence_step) : "",
                               std::to_string(r.steps),
                               std::to_string(r.probe_rows),
                               r.error,
                               fmt_double(r.wall_clock_s)};
    for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + csv_field(f[i]);
    out += "\n";
  }
  return out;
}

/// results.csv text with the wall-clock column dropped, for reproducibility checks.
inline std::string strip_wall_clock(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

inline std::vector<std::string> csv_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  if (lines.empty()) throw FormatError("csv: missing header in " + p.string());
  return lines;
}

inline std::vector<RunRecord> parse_results_csv(const std::vector<std::string>& lines) {
  if (split_csv_line(lines.at(0)) != results_columns()) throw FormatError("results.csv: unexpected header");
  std::vector<RunRecord> out;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto f = split_csv_line(lines[li]);
    if (f.size() != results_columns().size()) throw FormatError("results.csv: wrong field count on line " + std::to_string(li + 1));
    RunRecord r;
    r.run_id = f[0];
    r.config_hash = f[1];
    r.seed = std::stoull(f[2]);
    r.experiment = f[3];
    r.dataset = f[4];
    r.architecture = f[5];
    r.regularizer = f[6];
    r.arm = f[7];
    r.task = parse_size(f[8]);
    r.status = f[9];
    r.final_train_loss = parse_double(f[10]);
    r.metric = f[11];
    r.metric_at_convergence = parse_double(f[12]);
    r.metric_at_completion = parse_double(f[13]);
    r.correct_at_convergence = parse_size(f[14]);
    r.correct_at_completion = parse_size(f[15]);
    r.total = parse_size(f[16]);
    r.param_norm = parse_double(f[17]);
    if (!f[18].empty()) r.convergence_step = parse_size(f[18]);
    r.steps = parse_size(f[19]);
    r.probe_rows = parse_size(f[20]);
    r.error = f[21];
    r.wall_clock_s = parse_double(f[22]);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<RunRecord> read_results_csv(const std::filesystem::path& p) { return parse_results_csv(csv_lines(p)); }

inline std::string probes_csv(const std::vector<ProbeRow>& rows, std::size_t steps) {
  std::string out = "run_id,stage,probe_kind,radius,base";
  for (std::size_t i = 1; i <= steps; ++i) out += ",step_" + std::to_string(i);
  out += ",final,gap\n";
  for (const auto& r : rows) {
    if (r.trajectory.size() != steps) throw ShapeError("probes.csv: trajectory length differs from header");
    out += csv_field(r.run_id) + "," + stage_name(r.stage) + "," + probe_kind_name(r.kind) + "," +
           fmt_double(r.radius) + "," + fmt_double(r.base);
    for (double v : r.trajectory) out += "," + fmt_double(v);
    out += "," + fmt_double(r.final_value) + "," + fmt_double(r.gap) + "\n";
  }
  return out;
}

inline std::vector<ProbeRow> parse_probes_csv(const std::vector<std::string>& lines) {
  const auto head = split_csv_line(lines.at(0));
  if (head.size() < 7 || head[0] != "run_id" || head[1] != "stage" || head[2] != "probe_kind" ||
      head[3] != "radius" || head[4] != "base" || head[head.size() - 2] != "final" || head.back() != "gap")
    throw FormatError("probes.csv: unexpected header");
  const std::size_t steps = head.size() - 7;
  for (std::size_t i = 0; i < steps; ++i)
    if (head[5 + i] != "step_" + std::to_string(i + 1)) throw FormatError("probes.csv: unexpected step column");
  std::vector<ProbeRow> out;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto f = split_csv_line(lines[li]);
    if (f.size() != head.size()) throw FormatError("probes.csv: wrong field count on line " + std::to_string(li + 1));
    ProbeRow r;
    r.run_id = f[0];
    if (f[1] == stage_name(Stage::AtConvergence))
      r.stage = Stage::AtConvergence;
    else if (f[1] == stage_name(Stage::AtCompletion))
      r.stage = Stage::AtCompletion;
    else
      throw FormatError("probes.csv: unknown stage '" + f[1] + "'");
    if (f[2] == probe_kind_name(ProbeKind::MaxLoss))
      r.kind = ProbeKind::MaxLoss;
    else if (f[2] == probe_kind_name(ProbeKind::MaxGradNorm))
      r.kind = ProbeKind::MaxGradNorm;
    else
      throw FormatError("probes.csv: unknown probe kind '" + f[2] + "'");
    r.radius = parse_double(f[3]);
    r.base = parse_double(f[4]);
    for (std::size_t i = 0; i < steps; ++i) r.trajectory.push_back(parse_double(f[5 + i]));
    r.final_value = parse_double(f[5 + steps]);
    r.gap = parse_double(f[6 + steps]);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<ProbeRow> read_probes_csv(const std::filesystem::path& p) { return parse_probes_csv(csv_lines(p)); }

// ---- summary.md -----------------------------------------------------------

/// Mean ± std per (experiment, dataset, architecture) group with one row per
/// arm or regularizer; the largest completion mean in each group is bold.
/// Runs that did not finish cleanly are counted but left out of the means.
inline std::string summary_markdown(const std::vector<RunRecord>& records, const std::vector<ProbeRow>& probes,
                                    const std::string& hash) {
  std::string md = "# Results\n\nconfig hash `" + hash + "`, " + std::to_string(records.size()) + " runs\n";

  using Key = std::tuple<std::string, std::string, std::string>;
  std::vector<Key> groups;
  std::map<Key, std::vector<std::string>> rows;
  std::map<std::pair<Key, std::string>, std::vector<const RunRecord*>> members;
  for (const auto& r : records) {
    const Key k{r.experiment, r.dataset, r.architecture};
    if (std::find(groups.begin(), groups.end(), k) == groups.end()) groups.push_back(k);
    const std::string label = r.arm.empty() ? r.regularizer : r.arm;
    auto& rl = rows[k];
    if (std::find(rl.begin(), rl.end(), label) == rl.end()) rl.push_back(label);
    members[{k, label}].push_back(&r);
  }

  for (const auto& k : groups) {
    const auto& [exp, ds, arch] = k;
    std::string metric;
    struct Line {
      std::string label;
      Summary conv, done, norm;
      std::size_t excluded = 0;
    };
    std::vector<Line> lines;
    for (const auto& label : rows[k]) {
      Line ln{label, {}, {}, {}, 0};
      std::vector<double> c, d, n;
      for (const RunRecord* r : members[{k, label}]) {
        metric = r->metric;
        if (!r->ok()) {
          ++ln.excluded;
          continue;
        }
        c.push_back(r->metric_at_convergence);
        d.push_back(r->metric_at_completion);
        n.push_back(r->param_norm);
      }
      ln.conv = summarize(c);
      ln.done = summarize(d);
      ln.norm = summarize(n);
      lines.push_back(ln);
    }
    std::size_t best = lines.size();
    for (std::size_t i = 0; i < lines.size(); ++i)
      if (lines[i].done.n > 0 && (best == lines.size() || lines[i].done.mean > lines[best].done.mean)) best = i;

    md += "\n## " + exp + " / " + ds + " / " + arch + "\n\n";
    md += "| run | n | " + metric + " at convergence | " + metric + " at completion | parameter norm | excluded |\n";
    md += "|---|---|---|---|---|---|\n";
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const auto& ln = lines[i];
      const std::string done = i == best ? "**" + fmt_pm(ln.done) + "**" : fmt_pm(ln.done);
      md += "| " + ln.label + " | " + std::to_string(ln.done.n) + " | " + fmt_pm(ln.conv) + " | " + done + " | " +
            fmt_pm(ln.norm) + " | " + std::to_string(ln.excluded) + " |\n";
    }
  }

  if (!probes.empty()) {
    std::map<std::string, const RunRecord*> by_id;
    for (const auto& r : records) by_id[r.run_id] = &r;
    using PKey = std::tuple<std::string, std::string, std::string, std::string, std::string, double>;
    std::map<PKey, std::vector<double>> gaps;
    for (const auto& p : probes) {
      auto it = by_id.find(p.run_id);
      if (it == by_id.end() || !std::isfinite(p.gap)) continue;
      const RunRecord& r = *it->second;
      gaps[{r.dataset, r.architecture, r.regularizer, stage_name(p.stage), probe_kind_name(p.kind), p.radius}]
          .push_back(p.gap);
    }
    md += "\n## Probe gaps\n\n| dataset | architecture | regularizer | stage | probe | radius | n | gap |\n";
    md += "|---|---|---|---|---|---|---|---|\n";
    for (const auto& [key, v] : gaps) {
      const auto& [ds, arch, reg, stage, kind, radius] = key;
      const Summary s = summarize(v);
      char gap[96];
      if (s.n < 2)
        std::snprintf(gap, sizeof gap, "%.4g", s.mean);
      else
        std::snprintf(gap, sizeof gap, "%.4g ± %.4g", s.mean, s.std);
      char rad[32];
      std::snprintf(rad, sizeof rad, "%g", radius);
      md += "| " + ds + " | " + arch + " | " + reg + " | " + stage + " | " + kind + " | " + rad +
            " | " + std::to_string(s.n) + " | " + gap + " |\n";
    }
  }
  return md;
}

// ---- emission -------------------------------------------------------------

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
  if (!out) throw Error("write failed: " + p.string());
}

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec || !std::filesystem::is_directory(p)) throw Error("cannot create output directory " + p.string());
}

inline nlohmann::json manifest_json(const ExperimentConfig& cfg, const std::vector<RunRecord>& records,
                                    std::size_t probe_rows) {
  nlohmann::json m;
  m["version"] = "lolab 1.0";
  m["checkpoint_version"] = kCheckpointVersion;
  m["config"] = to_json(cfg);
  m["config_hash"] = config_hash(cfg);
  m["records"] = records.size();
  m["probe_rows"] = probe_rows;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& r : records) seeds.push_back({{"run_id", r.run_id}, {"seed", r.seed}, {"status", r.status}});
  m["seeds"] = seeds;
  m["compiler"] = __VERSION__;
  m["cxx_standard"] = __cplusplus;
  const auto& c = protocol::counters();
  m["protocol"] = {{"regularizer_calls", c.regularizer_calls.load()},
                   {"meta_test_steps", c.meta_test_steps.load()},
                   {"violations", c.violations.load()}};
  return m;
}

/// results.csv, probes.csv, summary.md and manifest.json under dir.
inline void emit_reports(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                         const std::vector<RunRecord>& records, const std::vector<ProbeRow>& probes,
                         const nlohmann::json& host = {}) {
  if (records.empty()) throw Error("emit_reports: no records");
  ensure_dir(dir);
  write_text(dir / "results.csv", results_csv(records));
  write_text(dir / "probes.csv", probes_csv(probes, cfg.probe.steps));
  write_text(dir / "summary.md", summary_markdown(records, probes, config_hash(cfg)));
  nlohmann::json m = manifest_json(cfg, records, probes.size());
  if (!host.is_null()) m["host"] = host;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace lolab
