#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lolab/lolab.hpp"

using namespace lolab;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs, workers;
  std::optional<std::size_t> cap_meta_train, cap_mt_train, cap_mt_test;
  std::vector<std::string> checkpoints;  // reg=path
};

void add_common(CLI::App* sub, Common& o) {
  sub->add_option("-c,--config", o.config, "JSON config; omitted keys keep their defaults")->check(CLI::ExistingFile);
  sub->add_option("-o,--out", o.out, "output directory (default: output_dir from the config)");
  sub->add_option("--seed", o.seed, "override the experiment seed");
  sub->add_option("--runs", o.runs, "override num_runs");
  sub->add_option("--workers", o.workers, "worker threads, 0 = hardware threads");
  sub->add_option("--cap-meta-train", o.cap_meta_train, "samples kept for meta-training");
  sub->add_option("--cap-meta-test-train", o.cap_mt_train, "samples kept for meta-test training");
  sub->add_option("--cap-meta-test-test", o.cap_mt_test, "samples kept for meta-test evaluation");
  sub->add_option("--checkpoint", o.checkpoints, "regularizer=path, repeatable");
}

ExperimentConfig build_config(const Common& o, std::optional<ExperimentKind> kind) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (kind) c.kind = *kind;
  if (o.seed) c.seed = *o.seed;
  if (o.runs) c.num_runs = *o.runs;
  if (o.workers) c.workers = *o.workers;
  if (o.cap_meta_train) c.caps.meta_train = *o.cap_meta_train;
  if (o.cap_mt_train) c.caps.meta_test_train = *o.cap_mt_train;
  if (o.cap_mt_test) c.caps.meta_test_test = *o.cap_mt_test;
  if (!o.out.empty()) c.output_dir = o.out;
  for (const auto& kv : o.checkpoints) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("--checkpoint expects regularizer=path, got '" + kv + "'");
    c.checkpoints[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  c.validate();
  return c;
}

int count_failed(const std::vector<RunRecord>& recs) {
  int n = 0;
  for (const auto& r : recs) n += r.status == "ok" ? 0 : 1;
  return n;
}

int finish(const ExperimentConfig& c, const ExperimentResult& res) {
  emit_reports(c.output_dir, c, res.records, res.probes);
  const int bad = count_failed(res.records);
  std::printf("%zu runs, %d not ok, reports in %s\n", res.records.size(), bad, c.output_dir.c_str());
  for (const auto& r : res.records)
    if (r.status != "ok") std::fprintf(stderr, "  %s: %s %s\n", r.run_id.c_str(), r.status.c_str(), r.error.c_str());
  return bad ? 1 : 0;
}

int cmd_meta_train(const Common& o) {
  ExperimentConfig c = build_config(o, ExperimentKind::ClassificationMatrix);
  const auto ckpt = run_meta_train(c, c.output_dir);
  nlohmann::json j(ckpt);
  write_text(std::filesystem::path(c.output_dir) / "checkpoints.json", j.dump(2) + "\n");
  for (const auto& [reg, path] : ckpt) std::printf("%s\t%s\n", reg.c_str(), path.c_str());
  return 0;
}

int cmd_matrix(const Common& o, ExperimentKind kind) {
  ExperimentConfig c = build_config(o, kind);
  return finish(c, run_classification_matrix(c, c.output_dir));
}

int cmd_early(const Common& o) {
  ExperimentConfig c = build_config(o, ExperimentKind::EarlyEvidenceL2);
  return finish(c, run_early_evidence(c, c.output_dir));
}

// Rebuilds summary.md from the CSVs already in dir.
int cmd_report(const std::string& dir) {
  const std::filesystem::path d(dir);
  const auto records = read_results_csv(d / "results.csv");
  std::vector<ProbeRow> probes;
  if (std::filesystem::exists(d / "probes.csv")) probes = read_probes_csv(d / "probes.csv");
  std::string hash = records.empty() ? "unknown" : records.front().config_hash;
  write_text(d / "summary.md", summary_markdown(records, probes, hash));
  std::printf("%zu records, %zu probe rows -> %s\n", records.size(), probes.size(), (d / "summary.md").c_str());
  return count_failed(records) ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lolab: learned optimizers with sharpness-aware meta-training"};
  app.require_subcommand(1);

  Common mt, test, probe, early;
  auto* s_mt = app.add_subcommand("meta-train", "meta-train one LO per dataset/arch/regularizer, write checkpoints");
  add_common(s_mt, mt);
  auto* s_test = app.add_subcommand("meta-test", "run the classification matrix and write reports");
  add_common(s_test, test);
  auto* s_probe = app.add_subcommand("probe", "meta-test from checkpoints and run sharpness probes");
  add_common(s_probe, probe);
  auto* s_early = app.add_subcommand("early-evidence", "SGD vs LO with and without L2 on cubic regression");
  add_common(s_early, early);
  std::string report_dir;
  auto* s_report = app.add_subcommand("report", "rewrite summary.md from results.csv and probes.csv");
  s_report->add_option("dir", report_dir, "directory holding results.csv")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*s_mt) return cmd_meta_train(mt);
    if (*s_test) return cmd_matrix(test, ExperimentKind::ClassificationMatrix);
    if (*s_probe) return cmd_matrix(probe, ExperimentKind::ProbeOnly);
    if (*s_early) return cmd_early(early);
    if (*s_report) return cmd_report(report_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lolab: %s\n", e.what());
    return 2;
  }
  return 0;
}
