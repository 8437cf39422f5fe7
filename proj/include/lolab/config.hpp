#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lolab/data.hpp"
#include "lolab/meta_trainer.hpp"
#include "lolab/probes.hpp"

namespace lolab {

enum class ExperimentKind { EarlyEvidenceL2, ClassificationMatrix, ProbeOnly };

/// Samples kept per split. Training files are read up to
/// meta_train + meta_test_train samples before the random halving.
struct DeskCaps {
  std::size_t meta_train = 1000;
  std::size_t meta_test_train = 1000;
  std::size_t meta_test_test = 1000;
};

struct MetaTestBudget {
  std::size_t max_steps = 1000;
  std::size_t patience = 100;
  std::size_t batch_size = 128;  // 0 = full batch
};

struct EarlyEvidenceConfig {
  PolyTaskFamily family;
  std::size_t tasks = 10;
  std::size_t test_points = 100;
  std::size_t max_epochs = 5000;
  std::size_t patience = 500;
  double sgd_lr = 0.3;
  std::size_t sgd_batch = 0;
  double weight_decay = 0.1;
  double lo_l2 = 0.1;
  std::size_t lo_batch = 0;
  MetaConfig meta = default_meta();

  // A gradient-only coordinatewise rule has no way to express weight decay
  // (its fixed points all sit where every coordinate sees the same gradient),
  // so this experiment feeds theta to the LO.
  static MetaConfig default_meta() {
    MetaConfig m;
    m.lo.theta_input = true;
    m.batch_size = 0;
    m.meta_lr = 3e-3;
    m.stage_cap = 1000;
    m.stage_patience = 20;
    m.eval_every = 5;
    return m;
  }
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::ClassificationMatrix;
  std::vector<std::string> datasets{"blobs"};
  std::vector<std::string> architectures{"mlp_sigmoid"};
  std::vector<std::string> regularizers{"none", "sam", "gsam", "gam"};
  std::size_t num_runs = 10;
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // 0 = one per hardware thread
  std::string output_dir = "lolab_out";
  DeskCaps caps;
  BlobFamily blobs;
  std::size_t blob_image_side = 12;  // "blob_images" reshapes blobs of dim side^2 to [1, side, side]
  MetaConfig meta;
  MetaTestBudget meta_test;
  ProbeConfig probe;
  bool run_probes = true;
  EarlyEvidenceConfig early;
  std::map<std::string, std::string> checkpoints;  // regularizer name -> LO checkpoint path

  void validate() const;
};

inline const std::vector<std::string>& known_datasets() {
  static const std::vector<std::string> v{"blobs", "blob_images", "mnist", "fmnist", "cifar10"};
  return v;
}

// ---- enum names -----------------------------------------------------------

template <class E>
struct EnumNames;

template <>
struct EnumNames<ExperimentKind> {
  static constexpr std::pair<ExperimentKind, const char*> table[] = {
      {ExperimentKind::EarlyEvidenceL2, "early_evidence_l2"},
      {ExperimentKind::ClassificationMatrix, "classification_matrix"},
      {ExperimentKind::ProbeOnly, "probe_only"}};
};
template <>
struct EnumNames<Regularizer> {
  static constexpr std::pair<Regularizer, const char*> table[] = {
      {Regularizer::None, "none"}, {Regularizer::SAM, "sam"}, {Regularizer::GSAM, "gsam"}, {Regularizer::GAM, "gam"}};
};
template <>
struct EnumNames<LossWeighting> {
  static constexpr std::pair<LossWeighting, const char*> table[] = {{LossWeighting::FinalStep, "final_step"},
                                                                     {LossWeighting::Uniform, "uniform"}};
};
template <>
struct EnumNames<BaseOptimizer> {
  static constexpr std::pair<BaseOptimizer, const char*> table[] = {{BaseOptimizer::SGD, "sgd"},
                                                                     {BaseOptimizer::Adam, "adam"}};
};
template <>
struct EnumNames<StepRule> {
  static constexpr std::pair<StepRule, const char*> table[] = {{StepRule::EpsOver10, "eps_over_10"},
                                                                {StepRule::Eps, "eps"}};
};

template <class E>
const char* enum_name(E e) {
  for (const auto& [v, n] : EnumNames<E>::table)
    if (v == e) return n;
  return "?";
}

template <class E>
E enum_parse(const std::string& s, const std::string& what) {
  std::string options;
  for (const auto& [v, n] : EnumNames<E>::table) {
    if (s == n) return v;
    options += std::string(options.empty() ? "" : ", ") + n;
  }
  throw Error("config: " + what + " = '" + s + "' (expected one of " + options + ")");
}

inline const char* experiment_name(ExperimentKind k) { return enum_name(k); }

// ---- field lists ----------------------------------------------------------
// One list per struct drives both the JSON writer and the strict reader.

template <class F> void fields(LoConfig& c, F&& f) {
  f("num_layers", c.num_layers);
  f("hidden", c.hidden);
  f("preprocess", c.preprocess);
  f("p", c.p);
  f("output_scale", c.output_scale);
  f("theta_input", c.theta_input);
}

template <class F> void fields(MetaConfig& c, F&& f) {
  f("lo", c.lo);
  f("T_unroll", c.T_unroll);
  f("weighting", c.weighting);
  f("meta_lr", c.meta_lr);
  f("meta_lr_min", c.meta_lr_min);
  f("base_optimizer", c.base_optimizer);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("lambda_smooth", c.lambda_smooth);
  f("lambda_reg", c.lambda_reg);
  f("rho", c.rho);
  f("rho_min", c.rho_min);
  f("alpha_gsam", c.alpha_gsam);
  f("resample_perturbed", c.resample_perturbed);
  f("smooth_eps", c.smooth_eps);
  f("n_pga", c.n_pga);
  f("smooth_alpha", c.smooth_alpha);
  f("optimizee_l2", c.optimizee_l2);
  f("curriculum_train", c.curriculum_train);
  f("curriculum_eval", c.curriculum_eval);
  f("stage_patience", c.stage_patience);
  f("stage_cap", c.stage_cap);
  f("eval_every", c.eval_every);
  f("eval_tasks", c.eval_tasks);
  f("batch_size", c.batch_size);
}

template <class F> void fields(ProbeConfig& c, F&& f) {
  f("radii", c.radii);
  f("steps", c.steps);
  f("loss_step_rule", c.loss_step_rule);
  f("grad_norm_step_rule", c.grad_norm_step_rule);
  f("init_noise_std", c.init_noise_std);
}

template <class F> void fields(PolyTaskFamily& c, F&& f) {
  f("degree", c.degree);
  f("coeff_lo", c.coeff_lo);
  f("coeff_hi", c.coeff_hi);
  f("noise_std", c.noise_std);
  f("points_per_task", c.points_per_task);
  f("x_lo", c.x_lo);
  f("x_hi", c.x_hi);
}

template <class F> void fields(BlobFamily& c, F&& f) {
  f("dim", c.dim);
  f("num_classes", c.num_classes);
  f("centre_scale", c.centre_scale);
  f("noise_std", c.noise_std);
  f("centre_seed", c.centre_seed);
}

template <class F> void fields(DeskCaps& c, F&& f) {
  f("meta_train", c.meta_train);
  f("meta_test_train", c.meta_test_train);
  f("meta_test_test", c.meta_test_test);
}

template <class F> void fields(MetaTestBudget& c, F&& f) {
  f("max_steps", c.max_steps);
  f("patience", c.patience);
  f("batch_size", c.batch_size);
}

template <class F> void fields(EarlyEvidenceConfig& c, F&& f) {
  f("family", c.family);
  f("tasks", c.tasks);
  f("test_points", c.test_points);
  f("max_epochs", c.max_epochs);
  f("patience", c.patience);
  f("sgd_lr", c.sgd_lr);
  f("sgd_batch", c.sgd_batch);
  f("weight_decay", c.weight_decay);
  f("lo_l2", c.lo_l2);
  f("lo_batch", c.lo_batch);
  f("meta", c.meta);
}

template <class F> void fields(ExperimentConfig& c, F&& f) {
  f("experiment", c.kind);
  f("datasets", c.datasets);
  f("architectures", c.architectures);
  f("regularizers", c.regularizers);
  f("num_runs", c.num_runs);
  f("seed", c.seed);
  f("workers", c.workers);
  f("output_dir", c.output_dir);
  f("caps", c.caps);
  f("blobs", c.blobs);
  f("blob_image_side", c.blob_image_side);
  f("meta", c.meta);
  f("meta_test", c.meta_test);
  f("probe", c.probe);
  f("run_probes", c.run_probes);
  f("early", c.early);
  f("checkpoints", c.checkpoints);
}

// ---- JSON -----------------------------------------------------------------

namespace detail {

struct NullVisitor {
  template <class T>
  void operator()(const char*, T&) const {}
};

template <class T, class = void>
struct has_fields : std::false_type {};
template <class T>
struct has_fields<T, std::void_t<decltype(fields(std::declval<T&>(), NullVisitor{}))>> : std::true_type {};

template <class T, class = void>
struct is_named_enum : std::false_type {};
template <class T>
struct is_named_enum<T, std::void_t<decltype(EnumNames<T>::table)>> : std::true_type {};

template <class T>
nlohmann::json to_json_value(const T& v) {
  if constexpr (has_fields<T>::value) {
    nlohmann::json j = nlohmann::json::object();
    fields(const_cast<T&>(v), [&](const char* k, auto& m) { j[k] = to_json_value(m); });
    return j;
  } else if constexpr (is_named_enum<T>::value) {
    return enum_name(v);
  } else if constexpr (requires { v.begin(); typename T::value_type; } && !std::is_same_v<T, std::string>) {
    if constexpr (requires { typename T::mapped_type; }) {
      nlohmann::json j = nlohmann::json::object();
      for (const auto& [k, x] : v) j[k] = to_json_value(x);
      return j;
    } else {
      nlohmann::json j = nlohmann::json::array();
      for (const auto& x : v) j.push_back(to_json_value(x));
      return j;
    }
  } else {
    return nlohmann::json(v);
  }
}

inline void type_error(const std::string& path, const char* want) {
  throw Error("config: '" + path + "' must be " + want);
}

template <class T>
void from_json_value(const nlohmann::json& j, T& v, const std::string& path) {
  if constexpr (has_fields<T>::value) {
    if (!j.is_object()) type_error(path, "an object");
    std::vector<std::string> seen;
    fields(v, [&](const char* k, auto& m) {
      seen.emplace_back(k);
      if (auto it = j.find(k); it != j.end()) from_json_value(*it, m, path.empty() ? k : path + "." + k);
    });
    for (const auto& [k, _] : j.items())
      if (std::find(seen.begin(), seen.end(), k) == seen.end())
        throw Error("config: unknown key '" + (path.empty() ? k : path + "." + k) + "'");
  } else if constexpr (is_named_enum<T>::value) {
    if (!j.is_string()) type_error(path, "a string");
    v = enum_parse<T>(j.get<std::string>(), path);
  } else if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) type_error(path, "true or false");
    v = j.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_unsigned()) type_error(path, "a nonnegative integer");
    v = j.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) type_error(path, "a number");
    v = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) type_error(path, "a string");
    v = j.get<std::string>();
  } else if constexpr (requires { typename T::mapped_type; }) {
    if (!j.is_object()) type_error(path, "an object");
    v.clear();
    for (const auto& [k, x] : j.items()) from_json_value(x, v[k], path + "." + k);
  } else {
    if (!j.is_array()) type_error(path, "an array");
    v.clear();
    v.resize(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) from_json_value(j[i], v[i], path + "[" + std::to_string(i) + "]");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) { return detail::to_json_value(c); }

/// Starts from defaults and overrides whatever the document names; unknown
/// keys and wrongly typed values are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::from_json_value(j, c, "");
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

/// FNV-1a of the canonical JSON, without the keys that cannot change results
/// (output location, worker count).
inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("output_dir");
  j.erase("workers");
  const std::string s = j.dump();
  const auto h = detail::fnv1a({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void ExperimentConfig::validate() const {
  if (num_runs == 0) throw Error("config: num_runs must be >= 1");
  for (const auto& d : datasets)
    if (std::find(known_datasets().begin(), known_datasets().end(), d) == known_datasets().end())
      throw Error("config: unknown dataset '" + d + "'");
  for (const auto& a : architectures) parse_arch(a);
  for (const auto& r : regularizers) enum_parse<Regularizer>(r, "regularizers");
  for (const auto& [r, path] : checkpoints) enum_parse<Regularizer>(r, "checkpoints");
  if (kind != ExperimentKind::EarlyEvidenceL2) {
    if (datasets.empty() || architectures.empty() || regularizers.empty())
      throw Error("config: datasets, architectures and regularizers must be non-empty");
    if (caps.meta_train == 0 || caps.meta_test_train == 0 || caps.meta_test_test == 0)
      throw Error("config: caps must be positive");
    if (meta_test.max_steps == 0 || meta_test.patience == 0) throw Error("config: meta_test budget must be positive");
    meta.validate();
    probe.validate();
  } else {
    if (early.tasks == 0 || early.max_epochs == 0 || early.patience == 0 || early.test_points < 2)
      throw Error("config: early-evidence budget must be positive");
    if (!(early.sgd_lr > 0) || !(early.weight_decay >= 0) || !(early.lo_l2 >= 0))
      throw Error("config: early-evidence rates must be nonnegative");
    early.family.validate();
    early.meta.validate();
  }
  if (kind == ExperimentKind::ProbeOnly) {
    for (const auto& r : regularizers) {
      auto it = checkpoints.find(r);
      if (it == checkpoints.end()) throw Error("config: probe_only needs a checkpoint for regularizer '" + r + "'");
      if (!std::filesystem::exists(it->second)) throw Error("config: checkpoint not found: " + it->second);
    }
  }
}

}  // namespace lolab
