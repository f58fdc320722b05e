#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "arcdog/analysis.hpp"
#include "arcdog/data.hpp"
#include "arcdog/loss.hpp"
#include "arcdog/model.hpp"

namespace arcdog {

struct TrainConfig {
  double learning_rate = 1e-3;
  double plateau_factor = 0.1;
  int patience = 5;
  int max_reductions = 3;
  std::int64_t batch_size = 0;  // 0 = auto: 512 below 50k samples, else 4096
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int max_epochs = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("train: learning_rate must be > 0");
    if (plateau_factor <= 0.0 || plateau_factor >= 1.0)
      throw ConfigError("train: plateau_factor must be in (0, 1)");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (max_reductions < 0) throw ConfigError("train: max_reductions must be >= 0");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (batch_size < 0) throw ConfigError("train: batch_size must be >= 0");
  }

  std::int64_t effective_batch(std::int64_t dataset_size) const {
    if (batch_size > 0) return batch_size;
    return dataset_size < 50000 ? 512 : 4096;
  }
};

/// Standard Adam with bias correction. Moments are kept per parameter in
/// registration order; the learning rate is supplied per step (the plateau
/// scheduler owns it).
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1, double beta2, double epsilon)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  explicit AdamOptimizer(const TrainConfig& cfg)
      : AdamOptimizer(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon) {}

  /// Applies one update from the gradients accumulated on `params`, then
  /// clears them. Non-finite gradients abort the epoch.
  void step(ModelParams& params, double lr) {
    if (m_.empty()) {
      for (const auto& [name, t] : params.named) {
        m_.emplace_back(t.size(), 0.0);
        v_.emplace_back(t.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.named.size(); ++p) {
      auto& [name, tensor] = params.named[p];
      auto grad = tensor.grad();
      for (double g : grad)
        if (!std::isfinite(g))
          throw NumericError("adam: non-finite gradient in '" + name + "', aborting epoch");
      auto data = tensor.data();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < data.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        data[i] -= lr * mhat / (std::sqrt(vhat) + epsilon_);
      }
    }
    params.zero_grad();
  }

  std::int64_t steps() const { return t_; }

 private:
  double beta1_, beta2_, epsilon_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Reduce-on-plateau with early stop: a strict improvement of the validation
/// loss resets the counter; `patience` consecutive non-improving epochs cut
/// the lr by `factor`; the `max_reductions`-th cut stops training.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, double factor, int patience, int max_reductions)
      : lr_(initial_lr), factor_(factor), patience_(patience), max_reductions_(max_reductions) {}

  explicit PlateauScheduler(const TrainConfig& cfg)
      : PlateauScheduler(cfg.learning_rate, cfg.plateau_factor, cfg.patience, cfg.max_reductions) {}

  struct Decision {
    bool improved = false;
    bool reduced = false;
    bool stop = false;
    double lr = 0.0;
  };

  /// One call per epoch, in order, with that epoch's validation loss.
  Decision observe(double val_loss) {
    Decision d;
    if (val_loss < best_) {
      best_ = val_loss;
      stale_ = 0;
      d.improved = true;
    } else {
      ++stale_;
      if (stale_ >= patience_) {
        lr_ *= factor_;
        ++reductions_;
        stale_ = 0;
        d.reduced = true;
        if (reductions_ >= max_reductions_) d.stop = true;
      }
    }
    d.lr = lr_;
    return d;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  int reductions() const { return reductions_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  int max_reductions_;
  double best_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
  int reductions_ = 0;
};

struct EpochLogEntry {
  int epoch = 0;  // 1-based
  double train_total = 0.0, train_classification = 0.0, train_regression = 0.0;
  double val_total = 0.0, val_classification = 0.0, val_regression = 0.0;
  double lr = 0.0;  // learning rate in effect during this epoch
};

struct TrainRun {
  ModelParams params;  // restored to the best-validation snapshot
  std::vector<EpochLogEntry> log;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  Dataset data;  // re-imputed copy with fitted normalization stats
  SplitIndices split;
  ClimateMode climate_mode = ClimateMode::all;
};

namespace detail {

struct EvalLoss {
  double total = 0.0, classification = 0.0, regression = 0.0;
};

inline EvalLoss eval_loss(const ModelParams& params, const Dataset& data,
                          std::span<const std::int64_t> indices, ClimateMode mode,
                          const LossConfig& loss_cfg, std::int64_t batch_size,
                          Arena* arena = nullptr) {
  NoGradGuard ng;
  EvalLoss acc;
  double weight = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const std::int64_t> batch(indices.data() + start, end - start);
    {
      std::optional<ArenaScope> scope;
      if (arena) scope.emplace(*arena);
      Tensor input = make_model_input(data, batch, mode);
      Tensor domains = domain_matrix(data, batch, mode);
      auto fwd = forward(params, input, /*train_flag=*/false);
      auto loss = arcdog_loss(fwd.logits, labels_of(data, batch), fwd.features, domains, loss_cfg);
      const double w = static_cast<double>(batch.size());
      acc.total += w * loss.total_value();
      acc.classification += w * loss.classification_value();
      acc.regression += w * loss.regression_value();
      weight += w;
    }
    if (arena) arena->reset();
  }
  if (weight > 0.0) {
    acc.total /= weight;
    acc.classification /= weight;
    acc.regression /= weight;
  }
  return acc;
}

}  // namespace detail

/// Trains on the three source quadrants of the split with the combined
/// objective, validating each epoch and applying reduce-on-plateau with
/// early stopping; returns the best-validation parameters and the epoch log.
/// The model's input width and class count come from the dataset and mode.
inline TrainRun train(const Dataset& dataset, const SplitPlan& plan, ModelConfig model_cfg,
                      const LossConfig& loss_cfg, const TrainConfig& train_cfg,
                      ClimateMode mode = ClimateMode::all) {
  train_cfg.validate();
  loss_cfg.validate();

  TrainRun run;
  run.climate_mode = mode;
  run.split = make_split(dataset, plan);
  if (run.split.train.empty()) throw DataError("train: empty training split");
  run.data = dataset;
  fit_normalization(run.data, run.split.train);

  model_cfg.input_channels = model_input_channels(run.data, mode);
  model_cfg.num_classes = run.data.num_classes();
  model_cfg.timepoints = run.data.timepoints;
  model_cfg.validate();

  run.params = init_params(model_cfg, train_cfg.seed);
  AdamOptimizer adam(train_cfg);
  PlateauScheduler scheduler(train_cfg);
  const auto batch_size = train_cfg.effective_batch(run.data.size());

  ModelParams best = run.params.clone();
  std::vector<std::int64_t> order = run.split.train;
  Arena arena;  // recycles all per-batch tensor memory
  for (int epoch = 1; epoch <= train_cfg.max_epochs; ++epoch) {
    const double epoch_lr = scheduler.lr();
    Rng shuffle_rng = Rng::from(train_cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    Rng dropout_rng = Rng::from(train_cfg.seed, "dropout", static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double train_total = 0.0, train_cls = 0.0, train_reg = 0.0, weight = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      std::span<const std::int64_t> batch(order.data() + start, end - start);
      {
        ArenaScope scope(arena);
        Tensor input = make_model_input(run.data, batch, mode);
        Tensor domains = domain_matrix(run.data, batch, mode);
        auto fwd = forward(run.params, input, /*train_flag=*/true, &dropout_rng);
        auto loss =
            arcdog_loss(fwd.logits, labels_of(run.data, batch), fwd.features, domains, loss_cfg);
        run.params.zero_grad();
        loss.total.backward();
        adam.step(run.params, epoch_lr);
        const double w = static_cast<double>(batch.size());
        train_total += w * loss.total_value();
        train_cls += w * loss.classification_value();
        train_reg += w * loss.regression_value();
        weight += w;
      }
      arena.reset();
    }
    train_total /= weight;
    train_cls /= weight;
    train_reg /= weight;

    // validation loss drives the scheduler; with no validation carve-out the
    // train loss stands in
    detail::EvalLoss val =
        run.split.val.empty()
            ? detail::EvalLoss{train_total, train_cls, train_reg}
            : detail::eval_loss(run.params, run.data, run.split.val, mode, loss_cfg, batch_size,
                                &arena);

    auto decision = scheduler.observe(val.total);
    if (decision.improved) {
      best = run.params.clone();
      run.best_val = val.total;
      run.best_epoch = epoch;
    }
    run.log.push_back({epoch, train_total, train_cls, train_reg, val.total, val.classification,
                       val.regression, epoch_lr});
    if (decision.stop) break;
  }
  run.params = std::move(best);
  return run;
}

/// Eval-mode class predictions (argmax of logits, first index on ties).
inline std::vector<std::int64_t> predict(const ModelParams& params, const Dataset& data,
                                         std::span<const std::int64_t> indices, ClimateMode mode,
                                         std::int64_t batch_size = 1024) {
  NoGradGuard ng;
  std::vector<std::int64_t> out;
  out.reserve(indices.size());
  Arena arena;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const std::int64_t> batch(indices.data() + start, end - start);
    {
      ArenaScope scope(arena);
      Tensor input = make_model_input(data, batch, mode);
      auto fwd = forward(params, input, /*train_flag=*/false);
      const auto K = fwd.logits.dim(1);
      for (std::int64_t r = 0; r < fwd.logits.dim(0); ++r) {
        const double* row = fwd.logits.data().data() + r * K;
        std::int64_t arg = 0;
        for (std::int64_t k = 1; k < K; ++k)
          if (row[k] > row[arg]) arg = k;
        out.push_back(arg);
      }
    }
    arena.reset();
  }
  return out;
}

/// Extracts max-pool features in eval mode (the representation the kNN
/// analyses operate on).
inline Tensor extract_features(const ModelParams& params, const Dataset& data,
                               std::span<const std::int64_t> indices, ClimateMode mode,
                               std::int64_t batch_size = 1024) {
  NoGradGuard ng;
  const auto f = params.config.feature_dim;
  Tensor out(Shape{static_cast<std::int64_t>(indices.size()), f});  // heap: outlives the arena
  std::size_t written = 0;
  Arena arena;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const std::int64_t> batch(indices.data() + start, end - start);
    {
      ArenaScope scope(arena);
      Tensor input = make_model_input(data, batch, mode);
      auto fwd = forward(params, input, /*train_flag=*/false);
      std::copy(fwd.features.data().begin(), fwd.features.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(written));
      written += fwd.features.data().size();
    }
    arena.reset();
  }
  return out;
}

// --- experiment grid ----------------------------------------------------------

enum class GridKind { c_sweep, climate_sweep };

/// One grid over the experiment axes: leave-one-out region columns,
/// rows that are either a c sweep (climate input "all") or a climate-mode
/// ablation, each cell averaged over `trials` seeds.
struct ExperimentConfig {
  std::vector<int> test_regions = {0, 1, 2, 3};
  GridKind kind = GridKind::c_sweep;
  std::vector<double> c_values = {-1.0, -0.1, 0.0, 0.001, 0.01, 0.1, 1.0};
  int trials = 5;
  std::uint64_t base_seed = 0;
  int jobs = 1;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  double validation_fraction = 0.10;
  std::string out_dir;  // when set, per-run metrics land here

  void validate() const {
    if (trials < 1) throw ConfigError("experiment: trials must be >= 1");
    if (jobs < 1) throw ConfigError("experiment: jobs must be >= 1");
    if (test_regions.empty()) throw ConfigError("experiment: no test regions");
    for (int r : test_regions)
      if (r < 0 || r > 3) throw ConfigError("experiment: test_region must be in {0,1,2,3}");
  }
};

struct GridRowSpec {
  std::string label;
  ClimateMode mode = ClimateMode::all;
  double c = 0.0;
};

inline std::string format_c(double c) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", c);
  return buf;
}

inline std::vector<GridRowSpec> grid_rows(const ExperimentConfig& cfg) {
  std::vector<GridRowSpec> rows;
  if (cfg.kind == GridKind::c_sweep) {
    rows.push_back({"baseline", ClimateMode::none, 0.0});
    for (double c : cfg.c_values) rows.push_back({"c=" + format_c(c), ClimateMode::all, c});
  } else {
    rows.push_back({"baseline", ClimateMode::none, cfg.loss.c});
    rows.push_back({"all", ClimateMode::all, cfg.loss.c});
    rows.push_back({"temperature", ClimateMode::temperature, cfg.loss.c});
    rows.push_back({"precipitation", ClimateMode::precipitation, cfg.loss.c});
  }
  return rows;
}

struct GridCell {
  std::string row_label;
  int region = 0;
  std::vector<double> macro, overall;  // per trial
  double mean_macro = 0.0, std_macro = 0.0;
  double mean_overall = 0.0, std_overall = 0.0;
  bool failed = false;
  std::string error;
};

struct GridResult {
  std::vector<GridRowSpec> rows;
  std::vector<int> regions;
  int trials = 0;
  std::vector<GridCell> cells;  // rows-major over (row, region)

  const GridCell& cell(std::size_t row, std::size_t region_ix) const {
    return cells[row * regions.size() + region_ix];
  }
};

// --- metrics json -------------------------------------------------------------

inline nlohmann::ordered_json metrics_to_json(const MetricsReport& r) {
  return {{"overall_accuracy", r.overall},
          {"macro_accuracy", r.macro},
          {"per_class_accuracy", r.per_class},
          {"class_counts", r.class_counts},
          {"confusion", r.confusion},
          {"samples", r.total}};
}

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  return {{"input_channels", c.input_channels},
          {"timepoints", c.timepoints},
          {"feature_dim", c.feature_dim},
          {"encoder_layers", c.encoder_layers},
          {"heads", c.heads},
          {"feedforward_dim", c.feedforward_dim},
          {"dropout_rate", c.dropout_rate},
          {"num_classes", c.num_classes},
          {"extractor_kernel", c.extractor_kernel}};
}

inline nlohmann::ordered_json loss_config_to_json(const LossConfig& c) {
  return {{"c", c.c},
          {"normalize_residual", c.normalize_residual},
          {"square_residual", c.square_residual},
          {"ridge", c.ridge}};
}

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"plateau_factor", c.plateau_factor},
          {"patience", c.patience},
          {"max_reductions", c.max_reductions},
          {"batch_size", c.batch_size},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"max_epochs", c.max_epochs},
          {"seed", c.seed}};
}

/// Self-describing per-run record: resolved config, seed, the epoch log, and
/// final metrics on all three partitions.
inline nlohmann::ordered_json run_metrics_json(const TrainRun& run, const ModelConfig& model_cfg,
                                               const LossConfig& loss_cfg,
                                               const TrainConfig& train_cfg, int test_region,
                                               const MetricsReport& train_m,
                                               const MetricsReport& val_m,
                                               const MetricsReport& test_m) {
  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  nlohmann::ordered_json reg_trace = nlohmann::ordered_json::array();
  for (const auto& e : run.log) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_total", e.train_total},
                      {"train_classification", e.train_classification},
                      {"train_regression", e.train_regression},
                      {"val_total", e.val_total},
                      {"val_classification", e.val_classification},
                      {"val_regression", e.val_regression},
                      {"lr", e.lr}});
    reg_trace.push_back(e.train_regression);
  }
  return {{"seed", train_cfg.seed},
          {"test_region", test_region},
          {"climate_input", climate_mode_name(run.climate_mode)},
          {"config",
           {{"model", model_config_to_json(model_cfg)},
            {"loss", loss_config_to_json(loss_cfg)},
            {"train", train_config_to_json(train_cfg)}}},
          {"dataset",
           {{"provenance", run.data.provenance},
            {"seed", run.data.seed},
            {"classes", run.data.num_classes()},
            {"samples", run.data.size()},
            {"imputed_cells", run.data.imputed_cells}}},
          {"best_epoch", run.best_epoch},
          {"best_val_loss", run.best_val},
          {"epoch_log", epochs},
          {"regression_term_trace", reg_trace},
          {"final",
           {{"train", metrics_to_json(train_m)},
            {"val", metrics_to_json(val_m)},
            {"test", metrics_to_json(test_m)}}}};
}

namespace detail {

inline std::string sanitize_label(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw DataError("write to '" + path + "' failed");
}

}  // namespace detail

/// Full leave-one-out run for one grid cell and trial; returns the metrics
/// json and the held-out metrics. Persists nothing itself.
inline std::pair<nlohmann::ordered_json, MetricsReport> run_grid_unit(
    const Dataset& ds, const ExperimentConfig& cfg, const GridRowSpec& row, int region,
    int trial) {
  SplitPlan plan{region, cfg.validation_fraction, cfg.base_seed + static_cast<std::uint64_t>(trial)};
  LossConfig loss_cfg = cfg.loss;
  loss_cfg.c = row.c;
  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = cfg.base_seed + static_cast<std::uint64_t>(trial);
  TrainRun run = train(ds, plan, cfg.model, loss_cfg, train_cfg, row.mode);

  ModelConfig resolved = run.params.config;
  auto train_pred = predict(run.params, run.data, run.split.train, row.mode);
  auto train_m = compute_metrics(train_pred, labels_of(run.data, run.split.train), run.data.num_classes());
  MetricsReport val_m;
  if (!run.split.val.empty()) {
    auto val_pred = predict(run.params, run.data, run.split.val, row.mode);
    val_m = compute_metrics(val_pred, labels_of(run.data, run.split.val), run.data.num_classes());
  }
  if (run.split.test.empty()) throw DataError("grid: held-out region has no samples");
  auto test_pred = predict(run.params, run.data, run.split.test, row.mode);
  auto test_m = compute_metrics(test_pred, labels_of(run.data, run.split.test), run.data.num_classes());

  auto j = run_metrics_json(run, resolved, loss_cfg, train_cfg, region, train_m, val_m, test_m);
  j["grid"] = {{"row", row.label}, {"trial", trial}};
  return {std::move(j), test_m};
}

/// Aggregates per-trial metrics into cell means and standard deviations.
/// Trials are sorted first, so the summary is independent of the order in
/// which grid cells executed.
inline void finalize_grid_stats(GridResult& result) {
  for (auto& cell : result.cells) {
    std::sort(cell.macro.begin(), cell.macro.end());
    std::sort(cell.overall.begin(), cell.overall.end());
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
      if (v.empty()) return;
      mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      sd = 0.0;
      for (double x : v) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / static_cast<double>(v.size()));
    };
    stats(cell.macro, cell.mean_macro, cell.std_macro);
    stats(cell.overall, cell.mean_overall, cell.std_overall);
  }
}

/// Runs the whole grid, cells in parallel up to `jobs`, persisting per-run
/// metrics json under out_dir/runs when out_dir is set. Per-run failures
/// mark the cell failed and the grid continues.
inline GridResult run_experiment_grid(const Dataset& ds, const ExperimentConfig& cfg) {
  cfg.validate();
  GridResult result;
  result.rows = grid_rows(cfg);
  result.regions = cfg.test_regions;
  result.trials = cfg.trials;
  result.cells.resize(result.rows.size() * result.regions.size());
  for (std::size_t r = 0; r < result.rows.size(); ++r)
    for (std::size_t g = 0; g < result.regions.size(); ++g) {
      auto& cell = result.cells[r * result.regions.size() + g];
      cell.row_label = result.rows[r].label;
      cell.region = result.regions[g];
    }

  if (!cfg.out_dir.empty())
    std::filesystem::create_directories(std::filesystem::path(cfg.out_dir) / "runs");

  struct Unit {
    std::size_t row, region_ix;
    int trial;
  };
  std::vector<Unit> units;
  for (std::size_t r = 0; r < result.rows.size(); ++r)
    for (std::size_t g = 0; g < result.regions.size(); ++g)
      for (int t = 0; t < cfg.trials; ++t) units.push_back({r, g, t});

  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&]() {
    for (;;) {
      std::size_t u;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= units.size()) return;
        u = next++;
      }
      const Unit unit = units[u];
      const auto& row = result.rows[unit.row];
      const int region = result.regions[unit.region_ix];
      auto& cell = result.cells[unit.row * result.regions.size() + unit.region_ix];
      try {
        auto [json, test_m] = run_grid_unit(ds, cfg, row, region, unit.trial);
        json["grid"]["row_index"] = unit.row;
        if (!cfg.out_dir.empty()) {
          const std::string dir = (std::filesystem::path(cfg.out_dir) / "runs" /
                                   ("region" + std::to_string(region) + "_" +
                                    detail::sanitize_label(row.label) + "_trial" +
                                    std::to_string(unit.trial)))
                                      .string();
          std::filesystem::create_directories(dir);
          detail::write_text_file(dir + "/metrics.json", json.dump(2) + "\n");
        }
        std::lock_guard<std::mutex> lock(mu);
        cell.macro.push_back(test_m.macro);
        cell.overall.push_back(test_m.overall);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        cell.failed = true;
        cell.error = e.what();
      }
    }
  };
  if (cfg.jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < cfg.jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  finalize_grid_stats(result);
  return result;
}

/// Summary CSV shaped like the leave-one-out results tables: one row per
/// method, one column per test region, macro accuracy by default.
inline std::string grid_summary_csv(const GridResult& grid, bool macro = true) {
  std::string csv = "method,metric";
  for (int r : grid.regions) csv += "," + std::to_string(r);
  for (int r : grid.regions) csv += ",std_" + std::to_string(r);
  csv += ",trials\n";
  char buf[64];
  for (std::size_t r = 0; r < grid.rows.size(); ++r) {
    csv += grid.rows[r].label;
    csv += macro ? ",macro_accuracy" : ",overall_accuracy";
    for (std::size_t g = 0; g < grid.regions.size(); ++g) {
      const auto& cell = grid.cell(r, g);
      if (cell.failed || cell.macro.empty()) {
        csv += ",failed";
      } else {
        std::snprintf(buf, sizeof(buf), ",%.6f", macro ? cell.mean_macro : cell.mean_overall);
        csv += buf;
      }
    }
    for (std::size_t g = 0; g < grid.regions.size(); ++g) {
      const auto& cell = grid.cell(r, g);
      if (cell.failed || cell.macro.empty()) {
        csv += ",failed";
      } else {
        std::snprintf(buf, sizeof(buf), ",%.6f", macro ? cell.std_macro : cell.std_overall);
        csv += buf;
      }
    }
    csv += "," + std::to_string(grid.trials) + "\n";
  }
  return csv;
}

}  // namespace arcdog
