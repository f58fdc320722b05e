// Command-line driver: dataset generation/ingestion, training, evaluation,
// leave-one-out experiment grids, and 1-NN feature analyses, configured by a
// json file with flag overrides.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "arcdog/analysis.hpp"
#include "arcdog/run_config.hpp"
#include "arcdog/training.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Flags {
  std::optional<std::string> config, data, out, checkpoint, climate_input, source, in_dir, kind;
  std::optional<std::uint64_t> seed;
  std::optional<int> test_region, jobs, trials;
  std::optional<double> c;
  bool raster = false;
};

arcdog::RunConfig resolve(const Flags& f) {
  arcdog::RunConfig cfg;
  if (f.config) cfg = arcdog::load_run_config(*f.config);
  if (f.data) cfg.data = *f.data;
  if (f.out) cfg.out = *f.out;
  if (f.checkpoint) cfg.checkpoint = *f.checkpoint;
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.synthetic.seed = *f.seed;
  }
  if (f.test_region) cfg.test_region = *f.test_region;
  if (f.climate_input) cfg.climate_input = arcdog::parse_climate_mode(*f.climate_input);
  if (f.c) cfg.loss.c = *f.c;
  if (f.jobs) cfg.jobs = *f.jobs;
  if (f.trials) cfg.trials = *f.trials;
  if (f.kind) {
    if (*f.kind == "c_sweep")
      cfg.grid_kind = arcdog::GridKind::c_sweep;
    else if (*f.kind == "climate_sweep")
      cfg.grid_kind = arcdog::GridKind::climate_sweep;
    else
      throw arcdog::ConfigError("--kind must be c_sweep or climate_sweep");
  }
  cfg.train.seed = cfg.seed;
  return cfg;
}

void write_output_dir(const arcdog::RunConfig& cfg) {
  if (cfg.out.empty()) throw arcdog::ConfigError("an output directory is required (--out)");
  fs::create_directories(cfg.out);
  std::ofstream os(fs::path(cfg.out) / "config.json");
  os << arcdog::echo_config(cfg).dump(2) << "\n";
  if (!os) throw arcdog::DataError("cannot write config echo to '" + cfg.out + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw arcdog::DataError("cannot write '" + path.string() + "'");
}

arcdog::Dataset load_data(const arcdog::RunConfig& cfg) {
  if (cfg.data.empty()) throw arcdog::ConfigError("a dataset path is required (--data)");
  return arcdog::load_dataset(cfg.data);
}

// --- subcommands -------------------------------------------------------------

int cmd_generate(const Flags& f) {
  arcdog::RunConfig cfg = resolve(f);
  write_output_dir(cfg);
  arcdog::Dataset ds = arcdog::generate_synthetic(cfg.synthetic);
  const auto path = fs::path(cfg.out) / "dataset.bin";
  arcdog::save_dataset(ds, path.string());
  std::cout << "generated " << ds.size() << " samples (" << ds.num_classes() << " classes, grid "
            << cfg.synthetic.grid_n << "x" << cfg.synthetic.grid_n << ") -> " << path.string()
            << "\n";
  return 0;
}

int cmd_ingest(const Flags& f) {
  arcdog::RunConfig cfg = resolve(f);
  write_output_dir(cfg);
  if (cfg.data.empty()) throw arcdog::ConfigError("a csv path is required (--data)");
  arcdog::Dataset ds = arcdog::ingest_csv(cfg.data);
  if (cfg.ingest_curate || !cfg.allow_classes.empty()) {
    const auto& allowed =
        cfg.allow_classes.empty() ? arcdog::curated_crop_classes() : cfg.allow_classes;
    ds = arcdog::curate_classes(ds, allowed);
  }
  const auto path = fs::path(cfg.out) / "dataset.bin";
  arcdog::save_dataset(ds, path.string());
  ordered_json stats = {{"samples", ds.size()},
                        {"classes", ds.class_names},
                        {"imputed_cells", ds.imputed_cells},
                        {"median_lat", ds.median_lat},
                        {"median_lon", ds.median_lon}};
  write_text(fs::path(cfg.out) / "stats.json", stats.dump(2) + "\n");
  std::cout << "ingested " << ds.size() << " samples, " << ds.num_classes() << " classes, "
            << ds.imputed_cells << " imputed cells -> " << path.string() << "\n";
  return 0;
}

int cmd_train(const Flags& f) {
  arcdog::RunConfig cfg = resolve(f);
  write_output_dir(cfg);
  arcdog::Dataset ds = load_data(cfg);
  arcdog::SplitPlan plan{cfg.test_region, cfg.validation_fraction, cfg.seed};
  arcdog::TrainRun run = arcdog::train(ds, plan, cfg.model, cfg.loss, cfg.train, cfg.climate_input);

  auto train_pred = arcdog::predict(run.params, run.data, run.split.train, cfg.climate_input);
  auto train_m = arcdog::compute_metrics(train_pred, arcdog::labels_of(run.data, run.split.train),
                                         run.data.num_classes());
  arcdog::MetricsReport val_m, test_m;
  if (!run.split.val.empty()) {
    auto val_pred = arcdog::predict(run.params, run.data, run.split.val, cfg.climate_input);
    val_m = arcdog::compute_metrics(val_pred, arcdog::labels_of(run.data, run.split.val),
                                    run.data.num_classes());
  }
  if (!run.split.test.empty()) {
    auto test_pred = arcdog::predict(run.params, run.data, run.split.test, cfg.climate_input);
    test_m = arcdog::compute_metrics(test_pred, arcdog::labels_of(run.data, run.split.test),
                                     run.data.num_classes());
  }
  arcdog::save_checkpoint(run.params, (fs::path(cfg.out) / "checkpoint.bin").string());
  auto j = arcdog::run_metrics_json(run, run.params.config, cfg.loss, cfg.train, cfg.test_region,
                                    train_m, val_m, test_m);
  write_text(fs::path(cfg.out) / "metrics.json", j.dump(2) + "\n");
  std::cout << "trained " << run.log.size() << " epochs (best val " << run.best_val << " at epoch "
            << run.best_epoch << "); test macro " << test_m.macro << ", overall " << test_m.overall
            << "\n";
  return 0;
}

int cmd_eval(const Flags& f) {
  arcdog::RunConfig cfg = resolve(f);
  write_output_dir(cfg);
  if (cfg.checkpoint.empty()) throw arcdog::ConfigError("a checkpoint is required (--checkpoint)");
  arcdog::ModelParams params = arcdog::load_checkpoint(cfg.checkpoint);
  arcdog::Dataset ds = load_data(cfg);
  arcdog::SplitPlan plan{cfg.test_region, cfg.validation_fraction, cfg.seed};
  auto split = arcdog::make_split(ds, plan);
  if (split.train.empty()) throw arcdog::DataError("eval: empty training split for stats");
  arcdog::fit_normalization(ds, split.train);
  const auto expect = arcdog::model_input_channels(ds, cfg.climate_input);
  if (expect != params.config.input_channels)
    throw arcdog::ConfigError("eval: checkpoint expects " +
                              std::to_string(params.config.input_channels) +
                              " input channels but data+mode gives " + std::to_string(expect));
  if (split.test.empty()) throw arcdog::DataError("eval: held-out region has no samples");
  auto preds = arcdog::predict(params, ds, split.test, cfg.climate_input);
  auto m = arcdog::compute_metrics(preds, arcdog::labels_of(ds, split.test), ds.num_classes());
  ordered_json j = {{"test_region", cfg.test_region},
                    {"climate_input", arcdog::climate_mode_name(cfg.climate_input)},
                    {"metrics", arcdog::metrics_to_json(m)}};
  write_text(fs::path(cfg.out) / "eval.json", j.dump(2) + "\n");
  std::cout << "region " << cfg.test_region << ": macro " << m.macro << ", overall " << m.overall
            << " on " << m.total << " samples\n";
  return 0;
}

int cmd_grid(const Flags& f) {
  arcdog::RunConfig cfg = resolve(f);
  write_output_dir(cfg);
  arcdog::Dataset ds = load_data(cfg);
  arcdog::ExperimentConfig exp;
  exp.kind = cfg.grid_kind;
  exp.c_values = cfg.c_values;
  exp.trials = cfg.trials;
  exp.base_seed = cfg.seed;
  exp.jobs = cfg.jobs;
  exp.model = cfg.model;
  exp.loss = cfg.loss;
  exp.train = cfg.train;
  exp.validation_fraction = cfg.validation_fraction;
  exp.out_dir = cfg.out;
  exp.test_regions = f.test_region ? std::vector<int>{*f.test_region} : cfg.test_regions;
  arcdog::GridResult grid = arcdog::run_experiment_grid(ds, exp);
  const std::string csv = arcdog::grid_summary_csv(grid);
  write_text(fs::path(cfg.out) / "summary.csv", csv);
  std::cout << csv;
  for (const auto& cell : grid.cells)
    if (cell.failed)
      std::cerr << "cell " << cell.row_label << " region " << cell.region
                << " failed: " << cell.error << "\n";
  return 0;
}

int cmd_knn(const Flags& f) {
  arcdog::RunConfig cfg = resolve(f);
  write_output_dir(cfg);
  arcdog::Dataset ds = load_data(cfg);
  arcdog::SplitPlan plan{cfg.test_region, cfg.validation_fraction, cfg.seed};
  auto split = arcdog::make_split(ds, plan);
  if (split.train.empty() || split.test.empty())
    throw arcdog::DataError("knn: need non-empty training and test regions");
  arcdog::fit_normalization(ds, split.train);

  // reference set = everything outside the held-out region
  std::vector<std::int64_t> sources = split.train;
  sources.insert(sources.end(), split.val.begin(), split.val.end());
  std::sort(sources.begin(), sources.end());

  const std::string source = f.source.value_or("features");
  arcdog::KnnResult result;
  if (source == "climate") {
    result = arcdog::knn_climate(ds, sources, split.test,
                                 cfg.climate_input == arcdog::ClimateMode::none
                                     ? arcdog::ClimateMode::all
                                     : cfg.climate_input);
  } else if (source == "features") {
    if (cfg.checkpoint.empty())
      throw arcdog::ConfigError("knn --source features needs a checkpoint (--checkpoint)");
    arcdog::ModelParams params = arcdog::load_checkpoint(cfg.checkpoint);
    // infer the climate mode the checkpoint was trained with from its width
    std::optional<arcdog::ClimateMode> mode;
    for (auto m : {arcdog::ClimateMode::none, arcdog::ClimateMode::all,
                   arcdog::ClimateMode::temperature, arcdog::ClimateMode::precipitation}) {
      try {
        if (arcdog::model_input_channels(ds, m) == params.config.input_channels) {
          mode = m;
          break;
        }
      } catch (const arcdog::DataError&) {
        // subset modes undefined for this climate layout
      }
    }
    if (!mode)
      throw arcdog::ConfigError("knn: checkpoint input width " +
                                std::to_string(params.config.input_channels) +
                                " matches no climate mode of this dataset");
    arcdog::Tensor train_feats = arcdog::extract_features(params, ds, sources, *mode);
    arcdog::Tensor test_feats = arcdog::extract_features(params, ds, split.test, *mode);
    std::vector<int> regions;
    for (auto i : sources) regions.push_back(ds.samples[static_cast<std::size_t>(i)].region);
    result = arcdog::knn_features(train_feats, regions, test_feats);
    for (auto i : split.test) {
      result.lat.push_back(ds.samples[static_cast<std::size_t>(i)].lat);
      result.lon.push_back(ds.samples[static_cast<std::size_t>(i)].lon);
    }
  } else {
    throw arcdog::ConfigError("knn: --source must be features or climate");
  }

  std::vector<arcdog::HeatPoint> region_pts, dist_pts;
  for (std::size_t i = 0; i < result.nearest_region.size(); ++i) {
    region_pts.push_back(
        {result.lat[i], result.lon[i], static_cast<double>(result.nearest_region[i])});
    dist_pts.push_back({result.lat[i], result.lon[i], result.nearest_distance[i]});
  }
  arcdog::write_heatmap_csv(region_pts, (fs::path(cfg.out) / "knn_regions.csv").string());
  arcdog::write_heatmap_csv(dist_pts, (fs::path(cfg.out) / "knn_distance.csv").string());
  if (f.raster) {
    arcdog::write_heatmap_ppm(region_pts, (fs::path(cfg.out) / "knn_regions.ppm").string(), true);
    arcdog::write_heatmap_ppm(dist_pts, (fs::path(cfg.out) / "knn_distance.ppm").string(), false);
  }
  double mean_d = 0.0;
  for (double d : result.nearest_distance) mean_d += d;
  mean_d /= static_cast<double>(result.nearest_distance.size());
  std::cout << "knn (" << source << ") over " << result.nearest_region.size()
            << " test points, mean nearest distance " << mean_d << "\n";
  return 0;
}

int cmd_report(const Flags& f) {
  arcdog::RunConfig cfg = resolve(f);
  const std::string in_dir = f.in_dir.value_or(cfg.out);
  if (in_dir.empty()) throw arcdog::ConfigError("report: an input directory is required (--in)");
  const fs::path runs = fs::path(in_dir) / "runs";
  if (!fs::exists(runs)) throw arcdog::DataError("report: no runs directory under '" + in_dir + "'");

  struct Key {
    std::size_t row_index;
    std::string label;
    int region;
    bool operator<(const Key& o) const {
      return std::tie(row_index, region) < std::tie(o.row_index, o.region);
    }
  };
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> cells;  // macro, overall
  for (const auto& entry : fs::recursive_directory_iterator(runs)) {
    if (entry.path().filename() != "metrics.json") continue;
    std::ifstream is(entry.path());
    nlohmann::json j;
    is >> j;
    if (!j.contains("grid")) continue;
    Key key{j["grid"].value("row_index", std::size_t{0}), j["grid"].value("row", std::string{}),
            j.value("test_region", 0)};
    cells[key].first.push_back(j["final"]["test"]["macro_accuracy"].get<double>());
    cells[key].second.push_back(j["final"]["test"]["overall_accuracy"].get<double>());
  }
  if (cells.empty())
    throw arcdog::DataError("report: no grid metrics found under '" + in_dir + "'");

  arcdog::GridResult grid;
  std::map<std::size_t, std::string> row_labels;
  std::set<int> regions;
  std::size_t trials = 0;
  for (const auto& [key, vals] : cells) {
    row_labels[key.row_index] = key.label;
    regions.insert(key.region);
    trials = std::max(trials, vals.first.size());
  }
  for (const auto& [ix, label] : row_labels)
    grid.rows.push_back({label, arcdog::ClimateMode::all, 0.0});
  grid.regions.assign(regions.begin(), regions.end());
  grid.trials = static_cast<int>(trials);
  grid.cells.resize(grid.rows.size() * grid.regions.size());
  std::size_t r = 0;
  for (const auto& [ix, label] : row_labels) {
    for (std::size_t g = 0; g < grid.regions.size(); ++g) {
      auto& cell = grid.cells[r * grid.regions.size() + g];
      cell.row_label = label;
      cell.region = grid.regions[g];
      auto it = cells.find(Key{ix, label, grid.regions[g]});
      if (it != cells.end()) {
        cell.macro = it->second.first;
        cell.overall = it->second.second;
      } else {
        cell.failed = true;
        cell.error = "missing";
      }
    }
    ++r;
  }
  arcdog::finalize_grid_stats(grid);
  const std::string csv = arcdog::grid_summary_csv(grid);
  if (!cfg.out.empty()) {
    fs::create_directories(cfg.out);
    write_text(fs::path(cfg.out) / "summary.csv", csv);
  }
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continuous domain generalization via closed-form activation regression"};
  app.require_subcommand(1);

  Flags f;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", f.config, "json config file");
    cmd->add_option("--data", f.data, "dataset path (cache or csv)");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--seed", f.seed, "seed override");
  };
  auto* generate = app.add_subcommand("generate", "create a synthetic benchmark cache");
  add_common(generate);
  auto* ingest = app.add_subcommand("ingest", "parse a grid csv into a binary cache");
  add_common(ingest);
  auto* train = app.add_subcommand("train", "train one leave-one-out run");
  add_common(train);
  train->add_option("--test-region", f.test_region, "held-out quadrant (0-3)");
  train->add_option("--c", f.c, "regression weight");
  train->add_option("--climate-input", f.climate_input, "none|all|temperature|precipitation");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a held-out region");
  add_common(eval);
  eval->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  eval->add_option("--test-region", f.test_region, "held-out quadrant (0-3)");
  eval->add_option("--climate-input", f.climate_input, "none|all|temperature|precipitation");
  auto* grid = app.add_subcommand("grid", "run the leave-one-out experiment grid");
  add_common(grid);
  grid->add_option("--test-region", f.test_region, "restrict to one held-out quadrant");
  grid->add_option("--jobs", f.jobs, "parallel training runs");
  grid->add_option("--trials", f.trials, "seeds per cell");
  grid->add_option("--kind", f.kind, "c_sweep|climate_sweep");
  grid->add_option("--climate-input", f.climate_input, "unused for c_sweep rows");
  auto* knn = app.add_subcommand("knn", "nearest-neighbor analysis of a held-out region");
  add_common(knn);
  knn->add_option("--checkpoint", f.checkpoint, "model checkpoint (features source)");
  knn->add_option("--test-region", f.test_region, "held-out quadrant (0-3)");
  knn->add_option("--source", f.source, "features|climate");
  knn->add_option("--climate-input", f.climate_input, "climate subset for --source climate");
  knn->add_flag("--raster", f.raster, "also write ppm rasters");
  auto* report = app.add_subcommand("report", "collate per-run metrics into a summary table");
  add_common(report);
  report->add_option("--in", f.in_dir, "directory holding runs/*/metrics.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << nlohmann::json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }

  try {
    if (generate->parsed()) return cmd_generate(f);
    if (ingest->parsed()) return cmd_ingest(f);
    if (train->parsed()) return cmd_train(f);
    if (eval->parsed()) return cmd_eval(f);
    if (grid->parsed()) return cmd_grid(f);
    if (knn->parsed()) return cmd_knn(f);
    if (report->parsed()) return cmd_report(f);
  } catch (const arcdog::ConfigError& e) {
    std::cerr << nlohmann::json{{"error", "config"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const arcdog::ShapeError& e) {
    std::cerr << nlohmann::json{{"error", "config"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const arcdog::DataError& e) {
    std::cerr << nlohmann::json{{"error", "data"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  } catch (const arcdog::NumericError& e) {
    std::cerr << nlohmann::json{{"error", "numeric"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  }
  return 1;
}
