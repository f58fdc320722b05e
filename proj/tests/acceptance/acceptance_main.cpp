// Acceptance suite: every release criterion exercised end to end at its
// stated tolerance, one [PASS]/[FAIL] line per criterion. Exits nonzero if
// anything fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "arcdog/analysis.hpp"
#include "arcdog/grad_check.hpp"
#include "arcdog/linalg.hpp"
#include "arcdog/training.hpp"
#include "support/oracles.hpp"

using namespace arcdog;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor random_matrix(std::int64_t m, std::int64_t n, Rng& rng, bool requires_grad = false) {
  std::vector<double> d(static_cast<std::size_t>(m * n));
  for (auto& v : d) v = rng.normal();
  return Tensor::from_data({m, n}, std::move(d), requires_grad);
}

std::string fail(const std::string& msg) { return msg; }

// --- 1. least-squares oracle equivalence -------------------------------------

std::string criterion_lstsq_oracle() {
  auto t0 = Clock::now();
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t m = 8 + static_cast<std::int64_t>(rng.uniform_int(249));
    const std::int64_t fmax = std::min<std::int64_t>(64, std::max<std::int64_t>(2, m / 2));
    const std::int64_t f = 2 + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(fmax - 1)));
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform_int(19));
    Tensor th = random_matrix(m, f, rng);
    Tensor v = random_matrix(m, d, rng);
    auto res = pinv_least_squares(th, v, 0.0);
    const double ref = oracle::svd_lstsq_residual({th.data().begin(), th.data().end()}, m, f,
                                                  {v.data().begin(), v.data().end()}, d);
    const double rel = std::fabs(res.residual_norm - ref) / std::max(ref, 1e-300);
    if (rel >= 1e-8)
      return fail("instance " + std::to_string(trial) + " (m=" + std::to_string(m) + ", f=" +
                  std::to_string(f) + ", d=" + std::to_string(d) + "): relative error " +
                  std::to_string(rel));
  }
  const double dt = seconds_since(t0);
  if (dt >= 10.0) return fail("100 instances took " + std::to_string(dt) + " s (budget 10 s)");
  std::printf("       100 instances vs the SVD oracle, %.2f s\n", dt);
  return "";
}

// --- 2. projection properties -------------------------------------------------

std::string criterion_projection_properties() {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t m = 12 + static_cast<std::int64_t>(rng.uniform_int(52));
    const std::int64_t f = 2 + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(m / 2 - 1)));
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform_int(8));
    Tensor th = random_matrix(m, f, rng);
    Tensor v = random_matrix(m, d, rng);
    auto res = pinv_least_squares(th, v, 0.0);

    // idempotence: projecting the fitted values changes nothing
    auto again = pinv_least_squares(th, res.fitted, 0.0);
    double diff = 0.0;
    for (std::size_t i = 0; i < res.fitted.data().size(); ++i)
      diff += std::pow(res.fitted.data()[i] - again.fitted.data()[i], 2);
    if (std::sqrt(diff) >= 1e-9)
      return fail("idempotence violated: " + std::to_string(std::sqrt(diff)));

    // residual orthogonal to the column space: Θᵀ·R = 0
    for (std::int64_t j = 0; j < f; ++j)
      for (std::int64_t c = 0; c < d; ++c) {
        double dot = 0.0;
        for (std::int64_t i = 0; i < m; ++i)
          dot += th.at({i, j}) * (v.at({i, c}) - res.fitted.at({i, c}));
        if (std::fabs(dot) >= 1e-9 * std::max(1.0, res.target_norm))
          return fail("residual not orthogonal: |Θᵀ·R| = " + std::to_string(std::fabs(dot)));
      }

    // normalized residual within [0, 1]
    const double nr = res.residual_norm / res.target_norm;
    if (nr < 0.0 || nr > 1.0 + 1e-12) return fail("normalized residual " + std::to_string(nr));

    // column-space invariance under a well-conditioned mixing matrix
    auto mix = oracle::random_well_conditioned(f, 100.0, rng);
    auto mixed = oracle::naive_matmul({th.data().begin(), th.data().end()}, mix, m, f, f);
    auto res_mixed = pinv_least_squares(Tensor::from_data({m, f}, mixed), v, 0.0);
    const double rel = std::fabs(res_mixed.residual_norm - res.residual_norm) /
                       std::max(res.residual_norm, 1e-12);
    if (rel >= 1e-6) return fail("column-space invariance violated: rel " + std::to_string(rel));
  }
  std::printf("       idempotence, orthogonality, [0,1] range, invariance on 50 instances\n");
  return "";
}

// --- 3. gradient fidelity ------------------------------------------------------

std::string criterion_gradient_fidelity() {
  Rng rng(9001);
  double worst = 0.0;
  int resampled = 0;
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg;
    cfg.input_channels = 2 + static_cast<std::int64_t>(rng.uniform_int(3));
    cfg.timepoints = 3 + static_cast<std::int64_t>(rng.uniform_int(3));
    cfg.feature_dim = 4 + 2 * static_cast<std::int64_t>(rng.uniform_int(3));
    cfg.encoder_layers = 1 + static_cast<std::int64_t>(rng.uniform_int(2));
    cfg.heads = 2;
    cfg.feedforward_dim = 8 + static_cast<std::int64_t>(rng.uniform_int(9));
    cfg.num_classes = 2 + static_cast<std::int64_t>(rng.uniform_int(3));
    cfg.dropout_rate = 0.0;
    LossConfig loss_cfg;
    loss_cfg.c = trial % 3 == 0 ? -0.4 : 0.3;
    // the training-default relative ridge; an exactly ridgeless solve on
    // near-collinear activations is too stiff for finite differences at
    // step 1e-5 (ridge-0 gradients are FD-checked on explicit
    // well-conditioned matrices in the unit suite)
    loss_cfg.ridge = 1e-6;
    loss_cfg.square_residual = trial % 5 == 0;
    // m >= f keeps the regression well-posed (the loss itself recommends it)
    const std::int64_t m = cfg.feature_dim + 1 + static_cast<std::int64_t>(rng.uniform_int(4));
    const std::int64_t ddim = 1 + static_cast<std::int64_t>(rng.uniform_int(4));
    std::vector<std::int64_t> labels(static_cast<std::size_t>(m));
    for (auto& l : labels) l = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(cfg.num_classes)));

    // central differences at step 1e-5 need the instance to sit away from
    // relu/max kinks; resample until the kink diagnostics clear the step
    ModelParams params;
    Tensor batch, domains;
    bool smooth = false;
    for (int attempt = 0; attempt < 12 && !smooth; ++attempt) {
      params = init_params(cfg, 100 + static_cast<std::uint64_t>(trial) +
                                    1000 * static_cast<std::uint64_t>(attempt));
      std::vector<double> bd(static_cast<std::size_t>(m * cfg.timepoints * cfg.input_channels));
      for (auto& v : bd) v = rng.normal();
      batch = Tensor::from_data({m, cfg.timepoints, cfg.input_channels}, std::move(bd));
      domains = random_matrix(m, ddim, rng);
      NoGradGuard ng;
      ForwardTrace trace;
      forward(params, batch, false, nullptr, &trace);
      smooth = trace.min_relu_abs > 1e-4 && trace.min_pool_gap > 1e-4;
      if (!smooth) ++resampled;
    }
    if (!smooth) return fail("could not sample a kink-free instance for config " + std::to_string(trial));

    auto fn = [&]() {
      auto out = forward(params, batch, false);
      return arcdog_loss(out.logits, labels, out.features, domains, loss_cfg).total;
    };
    auto report = grad_check(fn, params.named, 1e-5);
    worst = std::max(worst, report.max_rel_error);
    if (report.max_rel_error >= 1e-4)
      return fail("config " + std::to_string(trial) + ": max rel error " +
                  std::to_string(report.max_rel_error));
  }
  std::printf("       20 random configurations through both loss terms, worst rel err %.2e"
              " (%d kink resamples)\n", worst, resampled);
  return "";
}

// --- 4. scheduler exactness ----------------------------------------------------

std::string criterion_scheduler_exactness() {
  // the derived trace: one improvement, then 15 flat epochs
  PlateauScheduler sched(1e-3, 0.1, 5, 3);
  if (!sched.observe(0.8).improved) return fail("epoch 1 should improve");
  std::vector<int> reductions;
  int stop_epoch = -1;
  for (int epoch = 2; epoch <= 30; ++epoch) {
    auto d = sched.observe(0.8);
    if (d.reduced) reductions.push_back(epoch);
    if (d.stop) {
      stop_epoch = epoch;
      break;
    }
  }
  if (reductions != std::vector<int>{6, 11, 16} || stop_epoch != 16)
    return fail("derived trace mismatch: reductions at epochs " +
                std::to_string(reductions.size() > 0 ? reductions[0] : -1) + ",...  stop " +
                std::to_string(stop_epoch));
  if (std::fabs(sched.lr() - 1e-6) > 1e-18) return fail("final lr is not 1e-6");

  // a real run: the emitted epoch log must replay through a fresh scheduler,
  // and the restored params must achieve the logged best validation loss
  SyntheticSpec spec;
  spec.grid_n = 20;
  spec.num_classes = 3;
  spec.seed = 15;
  Dataset ds = generate_synthetic(spec);
  ModelConfig mc;
  mc.feature_dim = 16;
  mc.encoder_layers = 1;
  mc.feedforward_dim = 32;
  TrainConfig tc;
  tc.max_epochs = 40;
  tc.batch_size = 64;
  tc.patience = 2;  // small patience so reductions actually fire here
  tc.seed = 4;
  LossConfig lc;
  TrainRun run = train(ds, SplitPlan{0, 0.10, 4}, mc, lc, tc, ClimateMode::all);

  PlateauScheduler replay(tc.learning_rate, tc.plateau_factor, tc.patience, tc.max_reductions);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < run.log.size(); ++i) {
    if (std::fabs(run.log[i].lr - replay.lr()) > 1e-18)
      return fail("epoch " + std::to_string(i + 1) + ": logged lr " +
                  std::to_string(run.log[i].lr) + " != replayed " + std::to_string(replay.lr()));
    auto d = replay.observe(run.log[i].val_total);
    best = std::min(best, run.log[i].val_total);
    const bool is_last = i + 1 == run.log.size();
    if (d.stop && !is_last) return fail("run continued past the scheduler stop");
    if (is_last && !d.stop && run.log.size() != static_cast<std::size_t>(tc.max_epochs))
      return fail("run stopped without a scheduler stop before the epoch cap");
  }
  if (run.best_val != best) return fail("best_val does not match the log minimum");
  auto val = detail::eval_loss(run.params, run.data, run.split.val, ClimateMode::all, lc,
                               tc.effective_batch(ds.size()));
  if (std::fabs(val.total - run.best_val) > 1e-12)
    return fail("restored params give val " + std::to_string(val.total) + " != logged best " +
                std::to_string(run.best_val));
  std::printf("       derived 3-reduction trace and a %zu-epoch live run replayed exactly\n",
              run.log.size());
  return "";
}

// --- 5. mechanism check --------------------------------------------------------

std::string criterion_mechanism() {
  auto t0 = Clock::now();
  SyntheticSpec spec;  // the default benchmark: 160x160 grid, K=5, d=8
  spec.seed = 7;
  if (spec.grid_n * spec.grid_n != 25600 || spec.num_classes != 5 || spec.domain_dim != 8 ||
      spec.drift_strength <= 0.0)
    return fail("default synthetic spec drifted from the benchmark definition");
  Dataset ds = generate_synthetic(spec);

  ExperimentConfig cfg;
  cfg.kind = GridKind::c_sweep;
  cfg.c_values = {-1.0, -0.1, 0.0, 0.01};
  cfg.trials = 5;
  cfg.base_seed = 1;
  cfg.jobs = 2;
  cfg.train.max_epochs = 4;  // the effect is stable well before the plateau rule engages
  GridResult grid = run_experiment_grid(ds, cfg);

  std::printf("       %s", grid_summary_csv(grid).c_str());
  int beaten = 0;
  for (std::size_t g = 0; g < grid.regions.size(); ++g) {
    const auto& baseline = grid.cell(0, g);
    if (baseline.failed) return fail("baseline cell failed: " + baseline.error);
    double best_c = -1.0;
    for (std::size_t r = 1; r < grid.rows.size(); ++r) {
      const auto& cell = grid.cell(r, g);
      if (cell.failed) return fail("cell " + cell.row_label + " failed: " + cell.error);
      best_c = std::max(best_c, cell.mean_macro);
    }
    const double margin = best_c - baseline.mean_macro;
    std::printf("       region %d: best climate %.4f vs baseline %.4f (%+.2f pp)\n",
                grid.regions[g], best_c, baseline.mean_macro, 100.0 * margin);
    if (margin >= 0.02) ++beaten;
  }
  const double dt = seconds_since(t0);
  std::printf("       runtime %.1f min\n", dt / 60.0);
  if (beaten < 3)
    return fail("climate input beat the baseline by >= 2 pp on only " + std::to_string(beaten) +
                " of 4 quadrants");
  if (dt >= 1800.0) return fail("runtime " + std::to_string(dt / 60.0) + " min exceeds 30 min");
  return "";
}

// --- 6. fit sanity ---------------------------------------------------------------

std::string criterion_fit_sanity() {
  SyntheticSpec spec;
  spec.grid_n = 25;
  spec.num_classes = 3;
  spec.noise_sigma = 0.02;
  spec.cloud_prob = 0.0;
  spec.seed = 6;
  std::vector<std::int64_t> first600(600);
  std::iota(first600.begin(), first600.end(), 0);
  Dataset toy = generate_synthetic(spec).subset(first600);
  TrainConfig tc;
  tc.max_epochs = 30;
  tc.batch_size = 64;
  tc.seed = 1;
  TrainRun run = train(toy, SplitPlan{3, 0.10, 1}, ModelConfig{}, LossConfig{}, tc, ClimateMode::none);
  auto preds = predict(run.params, run.data, run.split.train, ClimateMode::none);
  auto m = compute_metrics(preds, labels_of(run.data, run.split.train), run.data.num_classes());
  std::printf("       train accuracy %.3f after %zu epochs on the 600-sample toy\n", m.overall,
              run.log.size());
  if (m.overall < 0.95) return fail("train accuracy " + std::to_string(m.overall) + " < 0.95");
  return "";
}

// --- 7. determinism ---------------------------------------------------------------

std::string criterion_determinism() {
#ifndef ARCDOG_CLI_PATH
  return fail("cli path not wired into the build");
#else
  const auto dir = fs::temp_directory_path() / "arcdog_acceptance_det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({
    "synthetic": {"grid_n": 20, "num_classes": 3, "domain_dim": 4},
    "model": {"feature_dim": 16, "encoder_layers": 1, "feedforward_dim": 32},
    "train": {"max_epochs": 4, "batch_size": 128}
  })";
  auto run = [&](const std::string& args) {
    const std::string cmd = std::string(ARCDOG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  if (!run("generate --config " + (dir / "cfg.json").string() + " --seed 9 --out " +
           (dir / "data").string()))
    return fail("generate failed");
  const std::string train_args = "train --config " + (dir / "cfg.json").string() + " --data " +
                                 (dir / "data" / "dataset.bin").string() +
                                 " --test-region 2 --c 0.01 --climate-input all --seed 13 --out ";
  if (!run(train_args + (dir / "a").string())) return fail("first train run failed");
  if (!run(train_args + (dir / "b").string())) return fail("second train run failed");
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  };
  const std::string a = slurp(dir / "a" / "metrics.json");
  const std::string b = slurp(dir / "b" / "metrics.json");
  if (a.empty() || a != b) return fail("metrics.json bytes differ between identical runs");
  const std::string ca = slurp(dir / "a" / "checkpoint.bin");
  const std::string cb = slurp(dir / "b" / "checkpoint.bin");
  if (ca.empty() || ca != cb) return fail("checkpoints differ between identical runs");
  fs::remove_all(dir);
  std::printf("       two cli train runs: metrics.json and checkpoint byte-identical\n");
  return "";
#endif
}

// --- 8. knn oracle equivalence -------------------------------------------------

std::string criterion_knn() {
  Rng rng(31337);
  const std::int64_t n = 1000, m = 1000, f = 64;
  std::vector<double> td(static_cast<std::size_t>(n * f)), qd(static_cast<std::size_t>(m * f));
  for (auto& v : td) v = rng.normal();
  for (auto& v : qd) v = rng.normal();
  Tensor train = Tensor::from_data({n, f}, std::move(td));
  Tensor test = Tensor::from_data({m, f}, std::move(qd));
  std::vector<int> regions(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < regions.size(); ++i) regions[i] = static_cast<int>(i % 4);
  auto got = knn_features(train, regions, test);
  // independent scan: whole distance table first, then argmin with tie-break
  for (std::int64_t i = 0; i < m; ++i) {
    double best_d2 = std::numeric_limits<double>::infinity();
    int best_region = -1;
    std::int64_t best_ix = -1;
    for (std::int64_t j = 0; j < n; ++j) {
      double d2 = 0.0;
      for (std::int64_t k = 0; k < f; ++k) {
        const double diff = test.at({i, k}) - train.at({j, k});
        d2 += diff * diff;
      }
      const int rj = regions[static_cast<std::size_t>(j)];
      if (d2 < best_d2 || (d2 == best_d2 && (rj < best_region || (rj == best_region && j < best_ix)))) {
        best_d2 = d2;
        best_region = rj;
        best_ix = j;
      }
    }
    if (got.nearest_region[static_cast<std::size_t>(i)] != best_region ||
        got.nearest_distance[static_cast<std::size_t>(i)] != std::sqrt(best_d2))
      return fail("mismatch vs brute force at test point " + std::to_string(i));
  }

  // climate knn on the synthetic field: near-zero distances within one grid
  // step of the held-out region's boundary
  SyntheticSpec spec;
  spec.grid_n = 40;
  spec.seed = 23;
  Dataset ds = generate_synthetic(spec);
  SplitPlan plan{2, 0.0, 1};
  auto split = make_split(ds, plan);
  fit_normalization(ds, split.train);
  auto knn = knn_climate(ds, split.train, split.test);
  const double h = 1.0 / static_cast<double>(spec.grid_n - 1);
  // z-scoring rescales each climate dim by 1/std; bound the scaled field's
  // step change by the raw Lipschitz bound over the smallest training std
  double min_std = 1e300;
  for (double s : ds.stats.climate_std) min_std = std::min(min_std, s);
  const double scaled_bound = domain_field_for(spec).lipschitz_bound() * h / min_std + 1e-9;
  double border_sum = 0.0, interior_sum = 0.0;
  std::int64_t border_n = 0, interior_n = 0;
  for (std::size_t i = 0; i < split.test.size(); ++i) {
    const auto& t = ds.samples[static_cast<std::size_t>(split.test[i])];
    double geo = std::numeric_limits<double>::infinity();
    for (auto si : split.train) {
      const auto& s = ds.samples[static_cast<std::size_t>(si)];
      geo = std::min(geo, std::max(std::fabs(t.lat - s.lat), std::fabs(t.lon - s.lon)));
    }
    if (geo <= h * 1.0001) {
      if (knn.nearest_distance[i] > scaled_bound)
        return fail("border point exceeds the one-step Lipschitz bound: " +
                    std::to_string(knn.nearest_distance[i]) + " > " + std::to_string(scaled_bound));
      border_sum += knn.nearest_distance[i];
      ++border_n;
    } else if (geo > 5 * h) {
      interior_sum += knn.nearest_distance[i];
      ++interior_n;
    }
  }
  if (border_n == 0 || interior_n == 0) return fail("degenerate border/interior partition");
  const double border_mean = border_sum / static_cast<double>(border_n);
  const double interior_mean = interior_sum / static_cast<double>(interior_n);
  std::printf("       1k x 1k exact match; border mean distance %.4f vs interior %.4f\n",
              border_mean, interior_mean);
  if (border_mean * 3.0 >= interior_mean)
    return fail("climate distances are not locally constant at the boundary");
  return "";
}

// --- 9. ablation plumbing -------------------------------------------------------

std::string criterion_ablation() {
  SyntheticSpec spec;
  spec.grid_n = 14;
  spec.domain_dim = 19;  // bioclim-shaped synthetic: subset modes apply
  spec.num_classes = 3;
  spec.seed = 3;
  Dataset ds = generate_synthetic(spec);
  const std::vector<std::pair<ClimateMode, std::int64_t>> expected = {
      {ClimateMode::none, 9},
      {ClimateMode::all, 28},
      {ClimateMode::temperature, 20},
      {ClimateMode::precipitation, 17}};
  for (auto [mode, channels] : expected) {
    if (model_input_channels(ds, mode) != channels)
      return fail(std::string("mode ") + climate_mode_name(mode) + " gives " +
                  std::to_string(model_input_channels(ds, mode)) + " channels, expected " +
                  std::to_string(channels));
  }

  ExperimentConfig cfg;
  cfg.kind = GridKind::climate_sweep;
  cfg.trials = 1;
  cfg.base_seed = 2;
  cfg.jobs = 2;
  cfg.model.feature_dim = 16;
  cfg.model.encoder_layers = 1;
  cfg.model.feedforward_dim = 32;
  cfg.train.max_epochs = 2;
  cfg.train.batch_size = 64;
  GridResult grid = run_experiment_grid(ds, cfg);
  std::vector<std::string> labels;
  for (const auto& r : grid.rows) labels.push_back(r.label);
  if (labels != std::vector<std::string>{"baseline", "all", "temperature", "precipitation"})
    return fail("climate sweep rows are not table-shaped");
  for (const auto& cell : grid.cells)
    if (cell.failed) return fail("cell " + cell.row_label + " failed: " + cell.error);
  const std::string csv = grid_summary_csv(grid);
  if (csv.find("method,metric,0,1,2,3") != 0) return fail("summary csv header mismatch");
  std::printf("       channel widths 9/28/20/17 and a 4-row x 4-region summary\n");
  return "";
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "least-squares oracle equivalence", criterion_lstsq_oracle},
      {2, "projection properties", criterion_projection_properties},
      {3, "gradient fidelity", criterion_gradient_fidelity},
      {4, "scheduler exactness", criterion_scheduler_exactness},
      {5, "mechanism check on the synthetic benchmark", criterion_mechanism},
      {6, "fit sanity on a separable toy", criterion_fit_sanity},
      {7, "bitwise determinism of identical runs", criterion_determinism},
      {8, "knn oracle equivalence and border locality", criterion_knn},
      {9, "ablation plumbing (channel widths + table shape)", criterion_ablation},
  };
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    std::string msg;
    try {
      msg = c.run();
    } catch (const std::exception& e) {
      msg = std::string("exception: ") + e.what();
    }
    if (msg.empty()) {
      std::printf("[PASS] criterion %d: %s\n", c.id, c.name);
    } else {
      std::printf("[FAIL] criterion %d: %s — %s\n", c.id, c.name, msg.c_str());
      ++failures;
    }
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
