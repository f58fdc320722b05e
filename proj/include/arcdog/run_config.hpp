#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "arcdog/data.hpp"
#include "arcdog/training.hpp"

namespace arcdog {

inline constexpr const char* kVersion = "0.1.0";

/// Everything a run can be configured with: nested sections mirror the
/// module configs, flat fields cover paths and the experiment axes the
/// command-line flags override.
struct RunConfig {
  std::string data;
  std::string out;
  std::string checkpoint;
  std::uint64_t seed = 0;
  int test_region = 0;
  ClimateMode climate_input = ClimateMode::all;
  double validation_fraction = 0.10;

  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  SyntheticSpec synthetic;

  GridKind grid_kind = GridKind::c_sweep;
  std::vector<double> c_values = {-1.0, -0.1, 0.0, 0.001, 0.01, 0.1, 1.0};
  std::vector<int> test_regions = {0, 1, 2, 3};
  int trials = 5;
  int jobs = 1;

  bool ingest_curate = false;
  std::vector<std::string> allow_classes;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& scope) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key))
      throw ConfigError("config: unknown key '" + (scope.empty() ? key : scope + "." + key) + "'");
  }
}

template <typename T>
void assign_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  detail::reject_unknown_keys(
      j,
      {"data", "out", "checkpoint", "seed", "test_region", "climate_input", "validation_fraction",
       "model", "loss", "train", "synthetic", "experiment", "ingest"},
      "");
  detail::assign_if(j, "data", cfg.data);
  detail::assign_if(j, "out", cfg.out);
  detail::assign_if(j, "checkpoint", cfg.checkpoint);
  detail::assign_if(j, "seed", cfg.seed);
  detail::assign_if(j, "test_region", cfg.test_region);
  detail::assign_if(j, "validation_fraction", cfg.validation_fraction);
  if (j.contains("climate_input")) cfg.climate_input = parse_climate_mode(j.at("climate_input"));
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown_keys(m,
                                {"feature_dim", "encoder_layers", "heads", "feedforward_dim",
                                 "dropout_rate", "extractor_kernel", "timepoints"},
                                "model");
    detail::assign_if(m, "feature_dim", cfg.model.feature_dim);
    detail::assign_if(m, "encoder_layers", cfg.model.encoder_layers);
    detail::assign_if(m, "heads", cfg.model.heads);
    detail::assign_if(m, "feedforward_dim", cfg.model.feedforward_dim);
    detail::assign_if(m, "dropout_rate", cfg.model.dropout_rate);
    detail::assign_if(m, "extractor_kernel", cfg.model.extractor_kernel);
    detail::assign_if(m, "timepoints", cfg.model.timepoints);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    detail::reject_unknown_keys(l, {"c", "normalize_residual", "square_residual", "ridge"}, "loss");
    detail::assign_if(l, "c", cfg.loss.c);
    detail::assign_if(l, "normalize_residual", cfg.loss.normalize_residual);
    detail::assign_if(l, "square_residual", cfg.loss.square_residual);
    detail::assign_if(l, "ridge", cfg.loss.ridge);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(t,
                                {"learning_rate", "plateau_factor", "patience", "max_reductions",
                                 "batch_size", "adam_beta1", "adam_beta2", "adam_epsilon",
                                 "max_epochs"},
                                "train");
    detail::assign_if(t, "learning_rate", cfg.train.learning_rate);
    detail::assign_if(t, "plateau_factor", cfg.train.plateau_factor);
    detail::assign_if(t, "patience", cfg.train.patience);
    detail::assign_if(t, "max_reductions", cfg.train.max_reductions);
    detail::assign_if(t, "batch_size", cfg.train.batch_size);
    detail::assign_if(t, "adam_beta1", cfg.train.adam_beta1);
    detail::assign_if(t, "adam_beta2", cfg.train.adam_beta2);
    detail::assign_if(t, "adam_epsilon", cfg.train.adam_epsilon);
    detail::assign_if(t, "max_epochs", cfg.train.max_epochs);
  }
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    detail::reject_unknown_keys(s,
                                {"grid_n", "domain_dim", "num_classes", "timepoints",
                                 "obs_channels", "harmonics", "drift_strength", "noise_sigma",
                                 "cloud_prob", "seed"},
                                "synthetic");
    detail::assign_if(s, "grid_n", cfg.synthetic.grid_n);
    detail::assign_if(s, "domain_dim", cfg.synthetic.domain_dim);
    detail::assign_if(s, "num_classes", cfg.synthetic.num_classes);
    detail::assign_if(s, "timepoints", cfg.synthetic.timepoints);
    detail::assign_if(s, "obs_channels", cfg.synthetic.obs_channels);
    detail::assign_if(s, "harmonics", cfg.synthetic.harmonics);
    detail::assign_if(s, "drift_strength", cfg.synthetic.drift_strength);
    detail::assign_if(s, "noise_sigma", cfg.synthetic.noise_sigma);
    detail::assign_if(s, "cloud_prob", cfg.synthetic.cloud_prob);
    detail::assign_if(s, "seed", cfg.synthetic.seed);
  }
  if (j.contains("experiment")) {
    const auto& e = j.at("experiment");
    detail::reject_unknown_keys(e, {"kind", "c_values", "test_regions", "trials", "jobs"},
                                "experiment");
    if (e.contains("kind")) {
      const std::string kind = e.at("kind");
      if (kind == "c_sweep")
        cfg.grid_kind = GridKind::c_sweep;
      else if (kind == "climate_sweep")
        cfg.grid_kind = GridKind::climate_sweep;
      else
        throw ConfigError("config: experiment.kind must be c_sweep or climate_sweep, got '" +
                          kind + "'");
    }
    detail::assign_if(e, "c_values", cfg.c_values);
    detail::assign_if(e, "test_regions", cfg.test_regions);
    detail::assign_if(e, "trials", cfg.trials);
    detail::assign_if(e, "jobs", cfg.jobs);
  }
  if (j.contains("ingest")) {
    const auto& i = j.at("ingest");
    detail::reject_unknown_keys(i, {"curate", "allow_classes"}, "ingest");
    detail::assign_if(i, "curate", cfg.ingest_curate);
    detail::assign_if(i, "allow_classes", cfg.allow_classes);
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid json: " + e.what());
  }
  try {
    return parse_run_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "': " + e.what());
  }
}

/// Fully-resolved config echo, written into every output directory.
inline nlohmann::ordered_json echo_config(const RunConfig& cfg) {
  nlohmann::ordered_json e;
  e["tool"] = "arcdog";
  e["version"] = kVersion;
  e["data"] = cfg.data;
  e["out"] = cfg.out;
  e["checkpoint"] = cfg.checkpoint;
  e["seed"] = cfg.seed;
  e["test_region"] = cfg.test_region;
  e["climate_input"] = climate_mode_name(cfg.climate_input);
  e["validation_fraction"] = cfg.validation_fraction;
  e["model"] = model_config_to_json(cfg.model);
  e["loss"] = loss_config_to_json(cfg.loss);
  e["train"] = train_config_to_json(cfg.train);
  e["synthetic"] = {{"grid_n", cfg.synthetic.grid_n},
                    {"domain_dim", cfg.synthetic.domain_dim},
                    {"num_classes", cfg.synthetic.num_classes},
                    {"timepoints", cfg.synthetic.timepoints},
                    {"obs_channels", cfg.synthetic.obs_channels},
                    {"harmonics", cfg.synthetic.harmonics},
                    {"drift_strength", cfg.synthetic.drift_strength},
                    {"noise_sigma", cfg.synthetic.noise_sigma},
                    {"cloud_prob", cfg.synthetic.cloud_prob},
                    {"seed", cfg.synthetic.seed}};
  e["experiment"] = {{"kind", cfg.grid_kind == GridKind::c_sweep ? "c_sweep" : "climate_sweep"},
                     {"c_values", cfg.c_values},
                     {"test_regions", cfg.test_regions},
                     {"trials", cfg.trials},
                     {"jobs", cfg.jobs}};
  e["ingest"] = {{"curate", cfg.ingest_curate}, {"allow_classes", cfg.allow_classes}};
  return e;
}

}  // namespace arcdog
