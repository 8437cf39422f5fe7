#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lolab/config.hpp"
#include "lolab/meta_trainer.hpp"
#include "lolab/probes.hpp"
#include "lolab/protocol.hpp"
#include "lolab/report.hpp"

namespace lolab {

// ---- worker pool ----------------------------------------------------------

/// Runs fn(0..n-1) on `workers` threads. Finished results are handed to
/// on_done on the calling thread, in completion order, so the caller can
/// stay the only writer; the returned vector is in index order.
template <class R>
std::vector<R> parallel_map(std::size_t n, std::size_t workers, const std::function<R(std::size_t)>& fn,
                            const std::function<void(std::size_t, const R&)>& on_done = {}) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, std::max<std::size_t>(n, 1));
  std::vector<std::optional<R>> results(n);
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::size_t> finished;
  std::exception_ptr failure;
  std::size_t live = workers;

  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        std::optional<R> r;
        std::exception_ptr err;
        try {
          r.emplace(fn(i));
        } catch (...) {
          err = std::current_exception();
        }
        std::lock_guard lock(mu);
        if (err) {
          if (!failure) failure = err;
          next = n;
        } else {
          results[i] = std::move(r);
          finished.push_back(i);
        }
        cv.notify_one();
      }
      std::lock_guard lock(mu);
      --live;
      cv.notify_one();
    });
  }
  for (;;) {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return !finished.empty() || live == 0; });
    if (finished.empty()) break;
    const std::size_t i = finished.front();
    finished.pop_front();
    lock.unlock();
    if (on_done && !failure) on_done(i, *results[i]);
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  std::vector<R> out;
  out.reserve(n);
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

// ---- seeds ----------------------------------------------------------------

inline std::uint64_t hash_str(const std::string& s) {
  return detail::fnv1a({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

/// Seed for one cell of the matrix. The regularizer is deliberately not an
/// input, so runs that differ only in regularizer share data, splits, LO
/// initialization and optimizee initialization.
inline std::uint64_t run_seed(std::uint64_t seed, const std::string& dataset, const std::string& arch,
                              std::size_t run) {
  return RngStream(seed).derive(hash_str(dataset)).derive(hash_str(arch)).derive(run).seed();
}

// ---- datasets -------------------------------------------------------------

struct LoadedData {
  Dataset train;
  Dataset test;
};

inline Dataset reshape_images(Dataset d, std::size_t side) {
  d.inputs = d.inputs.reshaped({d.size(), 1, side, side});
  return d;
}

inline LoadedData load_cifar(const std::filesystem::path& dir, std::size_t train_cap, std::size_t test_cap) {
  auto load = [](const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw Error("dataset file not found: " + p.string());
    return parse_cifar_binary(read_file(p));
  };
  std::vector<Dataset> parts;
  std::size_t have = 0;
  for (int b = 1; b <= 5 && (train_cap == 0 || have < train_cap); ++b) {
    parts.push_back(load(dir / ("data_batch_" + std::to_string(b) + ".bin")));
    have += parts.back().size();
  }
  const std::size_t n = train_cap ? std::min(train_cap, have) : have;
  Tensor x(Shape{n, 3, 32, 32});
  Tensor y(Shape{n});
  std::size_t i = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.sample_width();
    for (std::size_t k = 0; k < p.size() && i < n; ++k, ++i) {
      std::copy_n(p.inputs.data().data() + k * w, w, x.data().data() + i * w);
      y[i] = p.labels[k];
    }
  }
  return {Dataset{std::move(x), std::move(y), 10, SplitTag::Unsplit, {}}, load(dir / "test_batch.bin").head(test_cap)};
}

/// Raw train/test sets, capped at read time. File datasets live under
/// data_dir(); a missing file names the path it expected.
inline LoadedData load_dataset(const std::string& name, const ExperimentConfig& c, RngStream& rng) {
  const std::size_t train_cap = c.caps.meta_train + c.caps.meta_test_train;
  const std::size_t test_cap = c.caps.meta_test_test;
  if (name == "blobs" || name == "blob_images") {
    BlobFamily fam = c.blobs;
    if (name == "blob_images") fam.dim = c.blob_image_side * c.blob_image_side;
    LoadedData d{make_blobs(fam, train_cap, rng), make_blobs(fam, test_cap, rng)};
    if (name == "blob_images") {
      d.train = reshape_images(std::move(d.train), c.blob_image_side);
      d.test = reshape_images(std::move(d.test), c.blob_image_side);
    }
    return d;
  }
  if (name == "mnist" || name == "fmnist") {
    const auto dir = data_dir() / (name == "mnist" ? "mnist" : "fashion-mnist");
    return {load_idx_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", train_cap),
            load_idx_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", test_cap)};
  }
  if (name == "cifar10") return load_cifar(data_dir() / "cifar-10-batches-bin", train_cap, test_cap);
  throw Error("unknown dataset '" + name + "'");
}

inline OptimizeeSpec make_spec(Architecture a, const Dataset& d) {
  const Shape& s = d.inputs.shape();
  Shape in(s.begin() + 1, s.end());
  switch (a) {
    case Architecture::MlpSigmoid: return OptimizeeSpec::mlp(in, d.num_classes);
    case Architecture::MlpRelu: return OptimizeeSpec::mlp(in, d.num_classes, true);
    case Architecture::Cnn:
      if (in.size() != 3) throw Error("cnn needs image data [C,H,W]; use blob_images, mnist, fmnist or cifar10");
      return OptimizeeSpec::cnn(in, d.num_classes);
    case Architecture::PolyRegression: break;
  }
  throw Error("architecture 'poly' only runs in the early-evidence experiment");
}

// ---- one optimization run -------------------------------------------------

/// Where a run stopped. The convergence step is the last strict improvement
/// of the per-step loss (the patience rule); theta_conv is the iterate where
/// its patience window closes.
struct TrainOutcome {
  Tensor theta_conv;
  Tensor theta_final;
  std::optional<std::size_t> convergence_step;
  std::vector<double> losses;
  std::size_t steps = 0;
  bool diverged = false;
};

class PatienceTracker {
 public:
  explicit PatienceTracker(std::size_t patience) : patience_(patience) {}

  /// Feeds loss_t at theta_t; true once the window closes (first time only).
  bool observe(std::size_t t, const Tensor& theta, double loss) {
    if (loss < best_) {
      best_ = loss;
      best_at_ = t;
    }
    if (!converged_ && t - best_at_ >= patience_) {
      converged_ = true;
      at_ = best_at_;
      theta_ = theta;
      return true;
    }
    return false;
  }

  bool converged() const { return converged_; }
  std::size_t step() const { return at_; }
  const Tensor& theta() const { return theta_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_at_ = 0;
  bool converged_ = false;
  std::size_t at_ = 0;
  Tensor theta_;
};

inline TrainOutcome finish(TrainOutcome o, const PatienceTracker& p, Tensor final_theta) {
  o.steps = o.losses.size();
  o.theta_final = std::move(final_theta);
  if (p.converged()) {
    o.convergence_step = p.step();
    o.theta_conv = p.theta();
  } else {
    o.theta_conv = o.theta_final;
  }
  return o;
}

/// Frozen LO applied to a fresh optimizee. Runs inside a meta-test scope, so
/// any regularizer path reached from here throws.
inline TrainOutcome meta_test_run(const CoordinatewiseLSTM& lo, const OptimizeeSpec& spec, const Dataset& train,
                                  Tensor theta0, std::size_t max_steps, std::size_t patience, std::size_t batch,
                                  bool stop_at_convergence, RngStream& rng) {
  protocol::MetaTestScope scope;
  PatienceTracker tracker(patience);
  StepObserver obs = [&](std::size_t t, const Tensor& theta, double loss) {
    return !tracker.observe(t, theta, loss) || !stop_at_convergence;
  };
  LoRun run = run_lo(lo, spec, train, std::move(theta0), max_steps, batch, rng, obs);
  TrainOutcome o;
  o.losses = std::move(run.losses);
  o.diverged = run.diverged;
  return finish(std::move(o), tracker, std::move(run.theta));
}

/// Plain SGD with decoupled-from-loss weight decay: theta -= lr (grad + wd theta).
/// The patience rule watches the objective being minimized, loss + wd/2 |theta|^2.
inline TrainOutcome sgd_run(const OptimizeeSpec& spec, const Dataset& train, Tensor theta, double lr, double wd,
                            std::size_t max_steps, std::size_t patience, std::size_t batch, bool stop_at_convergence,
                            RngStream& rng) {
  PatienceTracker tracker(patience);
  TrainOutcome o;
  for (std::size_t t = 0; t < max_steps; ++t) {
    Tensor g;
    const Dataset b = draw_batch(train, batch, rng);
    double loss = 0.0;
    try {
      loss = loss_and_grad(spec, theta, b, g);
    } catch (const NonFiniteError&) {
      o.diverged = true;
      break;
    }
    const double nt = norm2(theta.data());
    const double objective = loss + 0.5 * wd * nt * nt;
    o.losses.push_back(objective);
    if (tracker.observe(t, theta, objective) && stop_at_convergence) break;
    axpy(-lr * wd, theta.data(), theta.data());
    axpy(-lr, g.data(), theta.data());
    if (!theta.all_finite()) {
      o.diverged = true;
      break;
    }
  }
  return finish(std::move(o), tracker, std::move(theta));
}

// ---- run artifacts --------------------------------------------------------

/// Everything one job produces; the writer thread persists it.
struct RunArtifacts {
  std::vector<RunRecord> records;
  std::vector<ProbeRow> probes;
  std::string log_name;
  std::vector<std::string> log_lines;
  std::string checkpoint_name;
  std::vector<std::uint8_t> checkpoint;
};

inline std::string log_line(const TrainLogRecord& r) {
  nlohmann::json j{{"stage", r.stage},   {"stage_length", r.stage_length}, {"meta_step", r.meta_step},
                   {"meta_loss", r.meta_loss}, {"smooth", r.smooth}, {"reg", r.reg},
                   {"total", r.total}, {"lr", r.lr}, {"rho", r.rho}, {"diverged", r.diverged}};
  if (!r.eval.empty()) {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& [len, loss] : r.eval) ev.push_back({len, loss});
    j["eval"] = ev;
  }
  return j.dump();
}

/// Writes logs and checkpoints of finished jobs under dir; a no-op for an empty dir.
inline void persist_artifacts(const std::filesystem::path& dir, const RunArtifacts& a) {
  if (dir.empty()) return;
  if (!a.log_name.empty()) {
    ensure_dir(dir / "logs");
    std::string text;
    for (const auto& l : a.log_lines) text += l + "\n";
    write_text(dir / "logs" / (a.log_name + ".jsonl"), text);
  }
  if (!a.checkpoint_name.empty()) {
    ensure_dir(dir / "checkpoints");
    write_file(dir / "checkpoints" / (a.checkpoint_name + ".lolb"), a.checkpoint);
  }
}

struct ExperimentResult {
  std::vector<RunRecord> records;
  std::vector<ProbeRow> probes;
  std::size_t failed() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.status == "failed" ? 1 : 0;
    return n;
  }
};

inline std::size_t worker_count(const ExperimentConfig& c) {
  return c.workers ? c.workers : std::max(1u, std::thread::hardware_concurrency());
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- classification matrix ------------------------------------------------

struct MatrixJob {
  std::string dataset, arch, regularizer;
  std::size_t run = 0;
};

inline std::vector<MatrixJob> matrix_jobs(const ExperimentConfig& c) {
  std::vector<MatrixJob> jobs;
  for (const auto& d : c.datasets)
    for (const auto& a : c.architectures)
      for (const auto& r : c.regularizers)
        for (std::size_t k = 0; k < c.num_runs; ++k) jobs.push_back({d, a, r, k});
  return jobs;
}

inline std::string two_digits(std::size_t k) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%02zu", k);
  return buf;
}

struct PreparedCell {
  SplitData split;
  OptimizeeSpec spec;
};

inline PreparedCell prepare_cell(const ExperimentConfig& c, const MatrixJob& job, const RngStream& root) {
  RngStream data_rng = root.derive(1);
  RngStream split_rng = root.derive(2);
  LoadedData raw = load_dataset(job.dataset, c, data_rng);
  SplitData s = split_dataset(raw.train, raw.test, split_rng);
  s.meta_train = s.meta_train.head(c.caps.meta_train);
  s.meta_test_train = s.meta_test_train.head(c.caps.meta_test_train);
  s.meta_test_test = s.meta_test_test.head(c.caps.meta_test_test);
  OptimizeeSpec spec = make_spec(parse_arch(job.arch), s.meta_train);
  return {std::move(s), spec};
}

/// Meta-trains an LO for one cell on its MetaTrain split.
inline TrainResult meta_train_cell(const ExperimentConfig& c, const PreparedCell& cell, Regularizer reg,
                                   const RngStream& root, std::vector<std::string>* log) {
  MetaConfig m = c.meta;
  m.regularizer = reg;
  m.seed = root.derive(3).seed();
  const Dataset& mt = cell.split.meta_train;
  const OptimizeeSpec spec = cell.spec;
  TaskSampler sampler = [&mt, spec](RngStream&) { return MetaTask{spec, mt}; };
  return train_meta(m, sampler, [log](const TrainLogRecord& r) {
    if (log) log->push_back(log_line(r));
  });
}

inline RunArtifacts run_matrix_job(const ExperimentConfig& c, const MatrixJob& job, const std::string& hash) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string prefix = c.kind == ExperimentKind::ProbeOnly ? "probe" : "cls";
  RunArtifacts art;
  RunRecord rec;
  rec.run_id = prefix + "-" + job.dataset + "-" + job.arch + "-" + job.regularizer + "-s" + two_digits(job.run);
  rec.config_hash = hash;
  rec.seed = run_seed(c.seed, job.dataset, job.arch, job.run);
  rec.experiment = experiment_name(c.kind);
  rec.dataset = job.dataset;
  rec.architecture = job.arch;
  rec.regularizer = job.regularizer;
  rec.task = job.run;
  rec.metric = "accuracy";
  try {
    const RngStream root(rec.seed);
    const PreparedCell cell = prepare_cell(c, job, root);
    const Regularizer reg = enum_parse<Regularizer>(job.regularizer, "regularizer");

    CoordinatewiseLSTM lo;
    if (auto it = c.checkpoints.find(job.regularizer); it != c.checkpoints.end()) {
      lo = deserialize_lo(read_file(it->second));
    } else {
      art.log_name = rec.run_id;
      lo = meta_train_cell(c, cell, reg, root, &art.log_lines).best;
      art.checkpoint_name = rec.run_id;
      art.checkpoint = serialize_lo(lo);
    }

    RngStream init_rng = root.derive(4);
    RngStream test_rng = root.derive(5);
    const Tensor theta0 = init_optimizee(cell.spec, init_rng);
    const TrainOutcome o = meta_test_run(lo, cell.spec, cell.split.meta_test_train, theta0, c.meta_test.max_steps,
                                         c.meta_test.patience, c.meta_test.batch_size, false, test_rng);
    rec.steps = o.steps;
    rec.convergence_step = o.convergence_step;
    if (o.diverged) {
      rec.status = "diverged";
      rec.final_train_loss = rec.metric_at_convergence = rec.metric_at_completion = rec.param_norm = std::nan("");
    } else {
      const ClassCounts at_conv = classify(cell.spec, o.theta_conv, cell.split.meta_test_test);
      const ClassCounts at_done = classify(cell.spec, o.theta_final, cell.split.meta_test_test);
      rec.correct_at_convergence = at_conv.correct;
      rec.correct_at_completion = at_done.correct;
      rec.total = at_done.total;
      rec.metric_at_convergence = at_conv.accuracy();
      rec.metric_at_completion = at_done.accuracy();
      rec.final_train_loss = loss_value(cell.spec, o.theta_final, cell.split.meta_test_train);
      rec.param_norm = norm2(o.theta_final.data());
      if (c.run_probes) {
        ProbeConfig pc = c.probe;
        pc.seed = root.derive(6).seed();
        // Probe losses average over the held-out MetaTestTest split.
        const Dataset& pd = cell.split.meta_test_test;
        for (const auto& r : probe_sweep(cell.spec, o.theta_conv, pd, pc, Stage::AtConvergence))
          art.probes.push_back(probe_row(rec.run_id, r));
        for (const auto& r : probe_sweep(cell.spec, o.theta_final, pd, pc, Stage::AtCompletion))
          art.probes.push_back(probe_row(rec.run_id, r));
        rec.probe_rows = art.probes.size();
      }
    }
  } catch (const Error& e) {
    rec.status = "failed";
    rec.error = e.what();
    art.probes.clear();
    rec.probe_rows = 0;
  }
  rec.wall_clock_s = seconds_since(t0);
  art.records.push_back(rec);
  return art;
}

/// One run per (dataset, architecture, regularizer, run index). Without a
/// checkpoint for its regularizer, each run meta-trains its own LO.
inline ExperimentResult run_classification_matrix(const ExperimentConfig& c, const std::filesystem::path& out = {}) {
  c.validate();
  if (c.kind == ExperimentKind::EarlyEvidenceL2) throw Error("run_classification_matrix: wrong experiment kind");
  const std::string hash = config_hash(c);
  const auto jobs = matrix_jobs(c);
  std::function<RunArtifacts(std::size_t)> fn = [&](std::size_t i) { return run_matrix_job(c, jobs[i], hash); };
  const auto arts = parallel_map<RunArtifacts>(jobs.size(), worker_count(c), fn,
                                               [&](std::size_t, const RunArtifacts& a) { persist_artifacts(out, a); });
  ExperimentResult res;
  for (const auto& a : arts) {
    res.records.insert(res.records.end(), a.records.begin(), a.records.end());
    res.probes.insert(res.probes.end(), a.probes.begin(), a.probes.end());
  }
  return res;
}

/// One LO per (dataset, architecture, regularizer), seeded like run 0 of the
/// matrix. Returns regularizer -> checkpoint path for the last dataset/arch.
inline std::map<std::string, std::string> run_meta_train(const ExperimentConfig& c, const std::filesystem::path& out) {
  c.validate();
  std::vector<MatrixJob> jobs;
  for (const auto& d : c.datasets)
    for (const auto& a : c.architectures)
      for (const auto& r : c.regularizers) jobs.push_back({d, a, r, 0});
  std::function<RunArtifacts(std::size_t)> fn = [&](std::size_t i) {
    const MatrixJob& job = jobs[i];
    const RngStream root(run_seed(c.seed, job.dataset, job.arch, 0));
    const PreparedCell cell = prepare_cell(c, job, root);
    RunArtifacts a;
    a.log_name = "meta-" + job.dataset + "-" + job.arch + "-" + job.regularizer;
    a.checkpoint_name = a.log_name;
    a.checkpoint = serialize_lo(meta_train_cell(c, cell, enum_parse<Regularizer>(job.regularizer, "regularizer"), root,
                                                &a.log_lines)
                                    .best);
    return a;
  };
  ensure_dir(out);
  parallel_map<RunArtifacts>(jobs.size(), worker_count(c), fn,
                             [&](std::size_t, const RunArtifacts& a) { persist_artifacts(out, a); });
  std::map<std::string, std::string> ckpt;
  for (const auto& j : jobs)
    ckpt[j.regularizer] = (out / "checkpoints" / ("meta-" + j.dataset + "-" + j.arch + "-" + j.regularizer + ".lolb")).string();
  return ckpt;
}

// ---- early evidence -------------------------------------------------------

struct PolyTask {
  Dataset train;
  Dataset test;
  Tensor theta0;
};

/// Fresh cubic task k: training points, held-out points from the same
/// polynomial, and a shared initialization for every arm.
inline PolyTask early_task(const ExperimentConfig& c, std::size_t k) {
  RngStream r = RngStream(c.seed).derive(hash_str("early-task")).derive(k);
  PolyTask t;
  t.train = sample_poly_task(c.early.family, r);
  PolyTaskFamily test_fam = c.early.family;
  test_fam.points_per_task = std::max(c.early.test_points, 4 * (test_fam.degree + 1));
  t.test = sample_poly_task(test_fam, r, t.train.coefficients);
  t.test = t.test.head(c.early.test_points);
  t.theta0 = init_optimizee(OptimizeeSpec::poly(), r);
  return t;
}

inline const std::vector<std::string>& early_arms() {
  static const std::vector<std::string> arms{"sgd", "sgd_l2", "lo", "lo_l2"};
  return arms;
}

/// Two LOs meta-trained on the cubic family, without and with the L2 term in
/// the meta-loss, from the same seed and task stream.
inline std::vector<TrainResult> early_meta_train(const ExperimentConfig& c, const std::filesystem::path& out) {
  const PolyTaskFamily fam = c.early.family;
  TaskSampler sampler = [fam](RngStream& r) { return MetaTask{OptimizeeSpec::poly(), sample_poly_task(fam, r)}; };
  std::function<std::pair<TrainResult, RunArtifacts>(std::size_t)> fn = [&](std::size_t i) {
    MetaConfig m = c.early.meta;
    m.regularizer = Regularizer::None;
    m.optimizee_l2 = i == 0 ? 0.0 : c.early.lo_l2;
    m.seed = RngStream(c.seed).derive(hash_str("early-meta")).seed();
    RunArtifacts a;
    a.log_name = i == 0 ? "early-meta-lo" : "early-meta-lo_l2";
    TrainResult r = train_meta(m, sampler, [&a](const TrainLogRecord& rec) { a.log_lines.push_back(log_line(rec)); });
    a.checkpoint_name = i == 0 ? "early-lo" : "early-lo_l2";
    a.checkpoint = serialize_lo(r.best);
    return std::make_pair(std::move(r), std::move(a));
  };
  auto both = parallel_map<std::pair<TrainResult, RunArtifacts>>(
      2, worker_count(c), fn, [&](std::size_t, const auto& p) { persist_artifacts(out, p.second); });
  return {std::move(both[0].first), std::move(both[1].first)};
}

inline RunRecord early_arm_run(const ExperimentConfig& c, const std::vector<CoordinatewiseLSTM>& los, std::size_t task,
                               const std::string& arm, const std::string& hash) {
  const auto t0 = std::chrono::steady_clock::now();
  const EarlyEvidenceConfig& e = c.early;
  RunRecord rec;
  rec.run_id = "early-" + arm + "-t" + two_digits(task);
  rec.config_hash = hash;
  rec.seed = RngStream(c.seed).derive(hash_str("early-run")).derive(task).seed();
  rec.experiment = experiment_name(c.kind);
  rec.dataset = "cubic";
  rec.architecture = "poly";
  rec.regularizer = "none";
  rec.arm = arm;
  rec.task = task;
  rec.metric = "r2";
  try {
    const PolyTask t = early_task(c, task);
    const OptimizeeSpec spec = OptimizeeSpec::poly();
    RngStream rng(rec.seed);
    TrainOutcome o;
    if (arm == "sgd" || arm == "sgd_l2") {
      o = sgd_run(spec, t.train, t.theta0, e.sgd_lr, arm == "sgd" ? 0.0 : e.weight_decay, e.max_epochs, e.patience,
                  e.sgd_batch, true, rng);
    } else {
      const CoordinatewiseLSTM& lo = los.at(arm == "lo" ? 0 : 1);
      o = meta_test_run(lo, spec, t.train, t.theta0, e.max_epochs, e.patience, e.lo_batch, true, rng);
    }
    rec.steps = o.steps;
    rec.convergence_step = o.convergence_step;
    if (o.diverged) {
      rec.status = "diverged";
      rec.final_train_loss = rec.metric_at_convergence = rec.metric_at_completion = rec.param_norm = std::nan("");
    } else {
      rec.metric_at_convergence = r_squared(predict(spec, o.theta_conv, t.test).data(), t.test.labels.data());
      rec.metric_at_completion = r_squared(predict(spec, o.theta_final, t.test).data(), t.test.labels.data());
      rec.final_train_loss = loss_value(spec, o.theta_conv, t.train);
      rec.param_norm = norm2(o.theta_conv.data());
    }
  } catch (const Error& e2) {
    rec.status = "failed";
    rec.error = e2.what();
  }
  rec.wall_clock_s = seconds_since(t0);
  return rec;
}

/// SGD, SGD + weight decay, and the two meta-trained LOs on the same fresh
/// cubic tasks. LO arms meta-test with no regularizer. Records report the
/// iterate where training stopped: the patience window or the epoch cap.
inline ExperimentResult run_early_evidence(const ExperimentConfig& c, const std::filesystem::path& out = {},
                                           const std::vector<CoordinatewiseLSTM>* pretrained = nullptr) {
  c.validate();
  if (c.kind != ExperimentKind::EarlyEvidenceL2) throw Error("run_early_evidence: wrong experiment kind");
  const std::string hash = config_hash(c);
  std::vector<CoordinatewiseLSTM> los;
  if (pretrained) {
    los = *pretrained;
  } else {
    for (auto& r : early_meta_train(c, out)) los.push_back(std::move(r.best));
  }
  const auto& arms = early_arms();
  std::function<RunRecord(std::size_t)> fn = [&](std::size_t i) {
    return early_arm_run(c, los, i / arms.size(), arms[i % arms.size()], hash);
  };
  ExperimentResult res;
  res.records = parallel_map<RunRecord>(c.early.tasks * arms.size(), worker_count(c), fn);
  return res;
}

inline ExperimentResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& out = {}) {
  return c.kind == ExperimentKind::EarlyEvidenceL2 ? run_early_evidence(c, out) : run_classification_matrix(c, out);
}

}  // namespace lolab
