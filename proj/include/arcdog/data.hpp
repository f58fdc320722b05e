#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "arcdog/model.hpp"  // checkpoint io helpers (write_pod/read_pod)
#include "arcdog/tensor.hpp"

namespace arcdog {

/// One grid point: coordinates, a T x C observation timeseries (row-major
/// over (t, c)), the climate descriptor, a dense class label and the
/// quadrant id. `missing` flags cells that were imputed.
struct Sample {
  double lat = 0.0, lon = 0.0;
  std::vector<double> timeseries;
  std::vector<std::uint8_t> missing;
  std::vector<double> climate;
  std::int64_t label = -1;
  int region = -1;
};

/// Per-channel / per-climate-variable z-score statistics, fitted on the
/// training partition of a split only.
struct NormStats {
  bool fitted = false;
  std::vector<double> obs_mean, obs_std;
  std::vector<double> climate_mean, climate_std;
};

struct RegionAssignment {
  std::vector<int> region;
  double median_lat = 0.0, median_lon = 0.0;
};

/// Quadrants split at the median latitude/longitude: 0 = SW, 1 = NW,
/// 2 = SE, 3 = NE; ties (>=) go north/east.
inline RegionAssignment assign_regions(std::span<const double> lats, std::span<const double> lons) {
  if (lats.empty() || lats.size() != lons.size())
    throw DataError("assign_regions: need at least one (lat, lon) point");
  auto median = [](std::span<const double> v) {
    std::vector<double> s(v.begin(), v.end());
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    return n % 2 == 1 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  };
  RegionAssignment out;
  out.median_lat = median(lats);
  out.median_lon = median(lons);
  out.region.resize(lats.size());
  for (std::size_t i = 0; i < lats.size(); ++i) {
    const bool north = lats[i] >= out.median_lat;
    const bool east = lons[i] >= out.median_lon;
    out.region[i] = east ? (north ? 3 : 2) : (north ? 1 : 0);
  }
  return out;
}

struct Dataset {
  std::int64_t timepoints = 0;
  std::int64_t obs_channels = 0;
  std::int64_t climate_dim = 0;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;
  double median_lat = 0.0, median_lon = 0.0;
  NormStats stats;
  std::string provenance;  // "ingested" or "synthetic"
  std::uint64_t seed = 0;
  std::uint64_t imputed_cells = 0;

  std::int64_t num_classes() const { return static_cast<std::int64_t>(class_names.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(samples.size()); }

  void recompute_regions() {
    std::vector<double> lats, lons;
    lats.reserve(samples.size());
    lons.reserve(samples.size());
    for (const auto& s : samples) {
      lats.push_back(s.lat);
      lons.push_back(s.lon);
    }
    auto ra = assign_regions(lats, lons);
    median_lat = ra.median_lat;
    median_lon = ra.median_lon;
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i].region = ra.region[i];
  }

  Dataset subset(std::span<const std::int64_t> indices) const {
    Dataset out = *this;
    out.samples.clear();
    out.samples.reserve(indices.size());
    for (auto i : indices) out.samples.push_back(samples.at(static_cast<std::size_t>(i)));
    out.stats = NormStats{};
    out.recompute_regions();
    return out;
  }
};

/// The curated crop class allow-list.
inline const std::vector<std::string>& curated_crop_classes() {
  static const std::vector<std::string> names = {
      "Corn",        "Soybeans",      "Rice",        "Alfalfa",     "Grapes",
      "Almonds",     "Pecans",        "Peanuts",     "Walnuts",     "Potatoes",
      "Oats",        "Cotton",        "Dry beans",   "Sugarbeets",  "Winter Wheat",
      "Spring Wheat", "Durum Wheat",  "Sorghum",     "Canola",      "Barley",
      "Sunflower",   "Pop or Orn Corn", "Other Hay-Non Alfalfa", "Woody Wetlands",
      "Fallow-Idle Cropland"};
  return names;
}

/// Keeps only samples whose class name is in `allowed`, re-indexing labels
/// densely in allow-list order. Allow-list entries must be recognizable:
/// either curated crop names or names present in the input.
inline Dataset curate_classes(const Dataset& raw, const std::vector<std::string>& allowed) {
  if (allowed.empty()) throw DataError("curate_classes: empty allow-list");
  std::set<std::string> catalog(curated_crop_classes().begin(), curated_crop_classes().end());
  catalog.insert(raw.class_names.begin(), raw.class_names.end());
  for (const auto& name : allowed)
    if (!catalog.count(name))
      throw DataError("curate_classes: unknown class name '" + name + "' in allow-list");
  std::vector<std::int64_t> remap(raw.class_names.size(), -1);
  for (std::size_t i = 0; i < raw.class_names.size(); ++i) {
    auto it = std::find(allowed.begin(), allowed.end(), raw.class_names[i]);
    if (it != allowed.end()) remap[i] = static_cast<std::int64_t>(it - allowed.begin());
  }
  Dataset out;
  out.timepoints = raw.timepoints;
  out.obs_channels = raw.obs_channels;
  out.climate_dim = raw.climate_dim;
  out.class_names = allowed;
  out.provenance = raw.provenance;
  out.seed = raw.seed;
  out.imputed_cells = raw.imputed_cells;
  for (const auto& s : raw.samples) {
    const auto m = remap.at(static_cast<std::size_t>(s.label));
    if (m < 0) continue;
    out.samples.push_back(s);
    out.samples.back().label = m;
  }
  if (out.samples.empty()) throw DataError("curate_classes: no samples left after curation");
  out.recompute_regions();
  return out;
}

// --- csv ingestion ----------------------------------------------------------
// Schema (94 columns): lat, lon, label, ls_t{0..7}_b{1..7,10,11}, bio{01..19}.
// Empty observation cells are missing (cloud gaps) and get imputed; empty
// coordinates, labels or climate cells are errors.

namespace detail {

inline const std::array<int, 9>& landsat_bands() {
  static const std::array<int, 9> bands = {1, 2, 3, 4, 5, 6, 7, 10, 11};
  return bands;
}

inline std::vector<std::string> csv_header_fields() {
  std::vector<std::string> h = {"lat", "lon", "label"};
  for (int t = 0; t < 8; ++t)
    for (int b : landsat_bands())
      h.push_back("ls_t" + std::to_string(t) + "_b" + std::to_string(b));
  for (int b = 1; b <= 19; ++b) {
    std::ostringstream os;
    os << "bio" << (b < 10 ? "0" : "") << b;
    h.push_back(os.str());
  }
  return h;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(field);
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no, const std::string& col) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw DataError("line " + std::to_string(line_no) + ": unparseable float '" + s +
                    "' in column " + col);
  }
}

/// Missing-cell imputation with per-channel means over present cells.
/// Returns the number of cells imputed. Channel means are computed over the
/// samples listed in `basis` (all samples at ingest; the training partition
/// when a split is fitted).
inline std::uint64_t impute_missing(Dataset& ds, std::span<const std::int64_t> basis) {
  const auto T = ds.timepoints, C = ds.obs_channels;
  std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
  std::vector<std::int64_t> count(static_cast<std::size_t>(C), 0);
  for (auto i : basis) {
    const auto& s = ds.samples[static_cast<std::size_t>(i)];
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t c = 0; c < C; ++c) {
        const auto cell = static_cast<std::size_t>(t * C + c);
        if (!s.missing[cell]) {
          mean[static_cast<std::size_t>(c)] += s.timeseries[cell];
          ++count[static_cast<std::size_t>(c)];
        }
      }
  }
  for (std::int64_t c = 0; c < C; ++c) {
    auto ci = static_cast<std::size_t>(c);
    mean[ci] = count[ci] > 0 ? mean[ci] / static_cast<double>(count[ci]) : 0.0;
  }
  std::uint64_t imputed = 0;
  for (auto& s : ds.samples)
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t c = 0; c < C; ++c) {
        const auto cell = static_cast<std::size_t>(t * C + c);
        if (s.missing[cell]) {
          s.timeseries[cell] = mean[static_cast<std::size_t>(c)];
          ++imputed;
        }
      }
  return imputed;
}

}  // namespace detail

/// Parses the 94-column grid CSV. Labels are free strings (the curated
/// allow-list is applied separately by curate_classes). Missing observation
/// cells are imputed with whole-file per-channel means; training-split means
/// replace them once a split is fitted.
inline Dataset ingest_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("ingest: cannot open '" + path + "'");
  const auto expected = detail::csv_header_fields();
  std::string line;
  if (!std::getline(is, line)) throw DataError("ingest: '" + path + "' is empty");
  auto header = detail::split_csv_line(line);
  if (header != expected) {
    std::string hint = header.size() != expected.size()
                           ? "expected " + std::to_string(expected.size()) + " columns, got " +
                                 std::to_string(header.size())
                           : "first mismatch at column " +
                                 std::to_string(std::mismatch(header.begin(), header.end(),
                                                              expected.begin())
                                                    .first -
                                                header.begin());
    throw DataError("ingest: header does not match the grid schema (" + hint + ")");
  }

  Dataset ds;
  ds.timepoints = 8;
  ds.obs_channels = 9;
  ds.climate_dim = 19;
  ds.provenance = "ingested";
  std::vector<std::string> names;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != expected.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(expected.size()) + " columns, got " +
                      std::to_string(fields.size()));
    Sample s;
    s.lat = detail::parse_double(fields[0], line_no, "lat");
    s.lon = detail::parse_double(fields[1], line_no, "lon");
    const std::string& label = fields[2];
    if (label.empty())
      throw DataError("line " + std::to_string(line_no) + ": unknown label (empty class name)");
    auto it = std::find(names.begin(), names.end(), label);
    if (it == names.end()) {
      names.push_back(label);
      s.label = static_cast<std::int64_t>(names.size()) - 1;
    } else {
      s.label = it - names.begin();
    }
    s.timeseries.resize(72, 0.0);
    s.missing.assign(72, 0);
    for (int i = 0; i < 72; ++i) {
      const auto& f = fields[static_cast<std::size_t>(3 + i)];
      if (f.empty()) {
        s.missing[static_cast<std::size_t>(i)] = 1;
      } else {
        s.timeseries[static_cast<std::size_t>(i)] =
            detail::parse_double(f, line_no, expected[static_cast<std::size_t>(3 + i)]);
      }
    }
    s.climate.resize(19);
    for (int i = 0; i < 19; ++i) {
      const auto& f = fields[static_cast<std::size_t>(75 + i)];
      if (f.empty())
        throw DataError("line " + std::to_string(line_no) + ": missing climate field " +
                        expected[static_cast<std::size_t>(75 + i)]);
      s.climate[static_cast<std::size_t>(i)] =
          detail::parse_double(f, line_no, expected[static_cast<std::size_t>(75 + i)]);
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw DataError("ingest: '" + path + "' has no data rows");
  ds.class_names = std::move(names);
  std::vector<std::int64_t> all(ds.samples.size());
  std::iota(all.begin(), all.end(), 0);
  ds.imputed_cells = detail::impute_missing(ds, all);
  ds.recompute_regions();
  return ds;
}

// --- synthetic benchmark ----------------------------------------------------

/// Knobs for the synthetic continuous-domain benchmark: a smooth harmonic
/// domain field over a square grid drives class prevalence and an affine
/// shift of the observations.
struct SyntheticSpec {
  std::int64_t grid_n = 160;
  std::int64_t domain_dim = 8;
  std::int64_t num_classes = 5;
  std::int64_t timepoints = 8;
  std::int64_t obs_channels = 9;
  std::int64_t harmonics = 3;
  double drift_strength = 5.0;
  double noise_sigma = 0.3;
  double cloud_prob = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (grid_n < 2 || domain_dim < 1 || num_classes < 2 || timepoints < 1 || obs_channels < 1 ||
        harmonics < 1)
      throw ConfigError("synthetic: grid/dims/classes/harmonics must be positive");
    if (drift_strength < 0.0 || noise_sigma < 0.0)
      throw ConfigError("synthetic: drift_strength and noise_sigma must be >= 0");
    if (cloud_prob < 0.0 || cloud_prob > 1.0)
      throw ConfigError("synthetic: cloud_prob must be in [0, 1]");
  }
};

/// Smooth vector field on [0,1]^2: each dimension is a sum of random
/// low-frequency sinusoidal harmonics. Exposes an analytic Lipschitz bound
/// the generator's continuity can be checked against.
class HarmonicField {
 public:
  HarmonicField(std::int64_t dim, std::int64_t harmonics, Rng rng) : dim_(dim) {
    const double amp_scale = 1.0 / std::sqrt(static_cast<double>(harmonics));
    terms_.resize(static_cast<std::size_t>(dim));
    for (auto& dim_terms : terms_) {
      dim_terms.resize(static_cast<std::size_t>(harmonics));
      for (auto& h : dim_terms) {
        h.amplitude = rng.uniform(0.4, 1.0) * amp_scale;
        h.freq_x = rng.uniform(-1.5, 1.5);
        h.freq_y = rng.uniform(-1.5, 1.5);
        h.phase = rng.uniform(0.0, 2.0 * kPi);
      }
    }
  }

  std::int64_t dim() const { return dim_; }

  void value(double x, double y, double* out) const {
    for (std::size_t j = 0; j < terms_.size(); ++j) {
      double v = 0.0;
      for (const auto& h : terms_[j])
        v += h.amplitude * std::sin(2.0 * kPi * (h.freq_x * x + h.freq_y * y) + h.phase);
      out[j] = v;
    }
  }

  std::vector<double> value(double x, double y) const {
    std::vector<double> out(static_cast<std::size_t>(dim_));
    value(x, y, out.data());
    return out;
  }

  /// L2 Lipschitz constant of the vector field: sqrt(sum_j L_j^2) with
  /// L_j = sum_h |a|·2π·‖(fx, fy)‖.
  double lipschitz_bound() const {
    double total = 0.0;
    for (const auto& dim_terms : terms_) {
      double lj = 0.0;
      for (const auto& h : dim_terms)
        lj += std::fabs(h.amplitude) * 2.0 * kPi * std::hypot(h.freq_x, h.freq_y);
      total += lj * lj;
    }
    return std::sqrt(total);
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;
  struct Harmonic {
    double amplitude, freq_x, freq_y, phase;
  };
  std::int64_t dim_;
  std::vector<std::vector<Harmonic>> terms_;
};

/// The domain field a given spec generates (deterministic in the seed);
/// exposed so tests can check the generated samples against the same field.
inline HarmonicField domain_field_for(const SyntheticSpec& spec) {
  return HarmonicField(spec.domain_dim, spec.harmonics, Rng::from(spec.seed, "domain-field"));
}

namespace detail {

// Template-texture constants: classes share one base curve and differ by a
// small smooth delta, so observations alone leave residual class confusion,
// and the domain field shifts every channel, confounding the deltas. The
// location prior carried by the field is then genuinely informative.
constexpr double kTemplateBaseAmp = 0.7;
constexpr double kTemplateDeltaAmp = 0.05;
constexpr double kObsModulation = 0.6;
constexpr double kPrevalenceBias = 0.3;

inline std::vector<double> smooth_curve(std::int64_t timepoints, std::int64_t channels, double amp,
                                        Rng& rng) {
  std::vector<double> out(static_cast<std::size_t>(timepoints * channels));
  for (std::int64_t c = 0; c < channels; ++c) {
    const double a0 = rng.uniform(-amp, amp);
    const double a1 = rng.uniform(-amp, amp);
    const double a2 = rng.uniform(-amp, amp);
    const double p1 = rng.uniform(0.0, 6.283185307179586);
    const double p2 = rng.uniform(0.0, 6.283185307179586);
    for (std::int64_t t = 0; t < timepoints; ++t) {
      const double tau = timepoints > 1 ? static_cast<double>(t) / static_cast<double>(timepoints - 1) : 0.0;
      out[static_cast<std::size_t>(t * channels + c)] =
          a0 + a1 * std::sin(6.283185307179586 * tau + p1) +
          a2 * std::sin(2.0 * 6.283185307179586 * tau + p2);
    }
  }
  return out;
}

}  // namespace detail

/// Deterministic synthetic continuous-domain benchmark. The domain field v
/// is smooth over the grid; class prevalence follows softmax(drift·W·v + b);
/// observations are a per-class template curve plus an affine shift A·v,
/// Gaussian noise, and cloud-masked (then imputed) timepoints.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto n = spec.grid_n, d = spec.domain_dim, K = spec.num_classes;
  const auto T = spec.timepoints, C = spec.obs_channels;

  HarmonicField field = domain_field_for(spec);

  Rng prev_rng = Rng::from(spec.seed, "prevalence");
  std::vector<double> w(static_cast<std::size_t>(K * d));
  std::vector<double> b(static_cast<std::size_t>(K));
  const double wscale = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : w) v = prev_rng.normal() * wscale;
  for (auto& v : b) v = prev_rng.uniform(-detail::kPrevalenceBias, detail::kPrevalenceBias);

  Rng tmpl_rng = Rng::from(spec.seed, "templates");
  std::vector<double> base = detail::smooth_curve(T, C, detail::kTemplateBaseAmp, tmpl_rng);
  std::vector<std::vector<double>> delta(static_cast<std::size_t>(K));
  for (auto& dk : delta) dk = detail::smooth_curve(T, C, detail::kTemplateDeltaAmp, tmpl_rng);

  Rng mod_rng = Rng::from(spec.seed, "modulation");
  std::vector<double> modulation(static_cast<std::size_t>(T * C * d));
  const double mscale = detail::kObsModulation / std::sqrt(static_cast<double>(d));
  for (auto& v : modulation) v = mod_rng.normal() * mscale;

  Dataset ds;
  ds.timepoints = T;
  ds.obs_channels = C;
  ds.climate_dim = d;
  ds.provenance = "synthetic";
  ds.seed = spec.seed;
  for (std::int64_t k = 0; k < K; ++k) {
    std::ostringstream os;
    os << "class_" << (k < 10 ? "0" : "") << k;
    ds.class_names.push_back(os.str());
  }
  ds.samples.reserve(static_cast<std::size_t>(n * n));

  std::vector<double> v(static_cast<std::size_t>(d));
  std::vector<double> logits(static_cast<std::size_t>(K));
  for (std::int64_t row = 0; row < n; ++row) {
    for (std::int64_t col = 0; col < n; ++col) {
      const std::uint64_t index = static_cast<std::uint64_t>(row * n + col);
      Rng rng = Rng::from(spec.seed, "point", index);
      Sample s;
      s.lat = static_cast<double>(row) / static_cast<double>(n - 1);
      s.lon = static_cast<double>(col) / static_cast<double>(n - 1);
      field.value(s.lon, s.lat, v.data());
      s.climate.assign(v.begin(), v.end());

      // label ~ categorical(softmax(drift·W·v + b))
      double mx = -1e300;
      for (std::int64_t k = 0; k < K; ++k) {
        double z = b[static_cast<std::size_t>(k)];
        for (std::int64_t j = 0; j < d; ++j)
          z += spec.drift_strength * w[static_cast<std::size_t>(k * d + j)] * v[static_cast<std::size_t>(j)];
        logits[static_cast<std::size_t>(k)] = z;
        mx = std::max(mx, z);
      }
      double zsum = 0.0;
      for (auto& z : logits) {
        z = std::exp(z - mx);
        zsum += z;
      }
      const double u = rng.uniform() * zsum;
      double acc = 0.0;
      std::int64_t label = K - 1;
      for (std::int64_t k = 0; k < K; ++k) {
        acc += logits[static_cast<std::size_t>(k)];
        if (u < acc) {
          label = k;
          break;
        }
      }
      s.label = label;

      s.timeseries.resize(static_cast<std::size_t>(T * C));
      s.missing.assign(static_cast<std::size_t>(T * C), 0);
      const auto& dk = delta[static_cast<std::size_t>(label)];
      for (std::int64_t t = 0; t < T; ++t) {
        for (std::int64_t c = 0; c < C; ++c) {
          const auto cell = static_cast<std::size_t>(t * C + c);
          double shift = 0.0;
          for (std::int64_t j = 0; j < d; ++j)
            shift += modulation[cell * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] *
                     v[static_cast<std::size_t>(j)];
          s.timeseries[cell] = base[cell] + dk[cell] + shift + spec.noise_sigma * rng.normal();
        }
      }
      for (std::int64_t t = 0; t < T; ++t) {
        if (rng.uniform() < spec.cloud_prob) {
          for (std::int64_t c = 0; c < C; ++c) s.missing[static_cast<std::size_t>(t * C + c)] = 1;
        }
      }
      ds.samples.push_back(std::move(s));
    }
  }
  std::vector<std::int64_t> all(ds.samples.size());
  std::iota(all.begin(), all.end(), 0);
  ds.imputed_cells = detail::impute_missing(ds, all);
  ds.recompute_regions();
  return ds;
}

// --- splits and normalization ------------------------------------------------

/// Leave-one-quadrant-out split: test = the held-out region, validation = a
/// seeded uniform fraction of the remaining samples.
struct SplitPlan {
  int test_region = 0;
  double validation_fraction = 0.10;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::int64_t> train, val, test;
};

inline SplitIndices make_split(const Dataset& ds, const SplitPlan& plan) {
  if (plan.test_region < 0 || plan.test_region > 3)
    throw ConfigError("split: test_region must be in {0,1,2,3}, got " +
                      std::to_string(plan.test_region));
  if (plan.validation_fraction < 0.0 || plan.validation_fraction >= 1.0)
    throw ConfigError("split: validation_fraction must be in [0, 1)");
  SplitIndices out;
  std::vector<std::int64_t> pool;
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    if (ds.samples[static_cast<std::size_t>(i)].region == plan.test_region)
      out.test.push_back(i);
    else
      pool.push_back(i);
  }
  Rng rng = Rng::from(plan.seed, "validation-split");
  rng.shuffle(pool);
  const auto n_val = static_cast<std::size_t>(plan.validation_fraction * static_cast<double>(pool.size()));
  out.val.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.train.begin(), out.train.end());
  return out;
}

/// Re-imputes missing cells with training-partition channel means, then fits
/// per-channel and per-climate-variable z-score stats on the training
/// partition.
inline void fit_normalization(Dataset& ds, std::span<const std::int64_t> train_indices) {
  if (train_indices.empty()) throw DataError("fit_normalization: empty training split");
  ds.imputed_cells = detail::impute_missing(ds, train_indices);
  const auto T = ds.timepoints, C = ds.obs_channels, D = ds.climate_dim;
  NormStats st;
  st.obs_mean.assign(static_cast<std::size_t>(C), 0.0);
  st.obs_std.assign(static_cast<std::size_t>(C), 0.0);
  st.climate_mean.assign(static_cast<std::size_t>(D), 0.0);
  st.climate_std.assign(static_cast<std::size_t>(D), 0.0);
  const double n_obs = static_cast<double>(train_indices.size() * static_cast<std::size_t>(T));
  const double n_cli = static_cast<double>(train_indices.size());
  for (auto i : train_indices) {
    const auto& s = ds.samples[static_cast<std::size_t>(i)];
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t c = 0; c < C; ++c)
        st.obs_mean[static_cast<std::size_t>(c)] += s.timeseries[static_cast<std::size_t>(t * C + c)];
    for (std::int64_t j = 0; j < D; ++j)
      st.climate_mean[static_cast<std::size_t>(j)] += s.climate[static_cast<std::size_t>(j)];
  }
  for (auto& v : st.obs_mean) v /= n_obs;
  for (auto& v : st.climate_mean) v /= n_cli;
  for (auto i : train_indices) {
    const auto& s = ds.samples[static_cast<std::size_t>(i)];
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t c = 0; c < C; ++c) {
        const double diff =
            s.timeseries[static_cast<std::size_t>(t * C + c)] - st.obs_mean[static_cast<std::size_t>(c)];
        st.obs_std[static_cast<std::size_t>(c)] += diff * diff;
      }
    for (std::int64_t j = 0; j < D; ++j) {
      const double diff = s.climate[static_cast<std::size_t>(j)] - st.climate_mean[static_cast<std::size_t>(j)];
      st.climate_std[static_cast<std::size_t>(j)] += diff * diff;
    }
  }
  for (auto& v : st.obs_std) v = std::sqrt(v / n_obs);
  for (auto& v : st.climate_std) v = std::sqrt(v / n_cli);
  st.fitted = true;
  ds.stats = st;
}

namespace detail {

inline double zscore(double x, double mean, double std) {
  const double diff = x - mean;
  return std > 1e-12 ? diff / std : 0.0;
}

}  // namespace detail

/// Model input for the given samples: standardized observation channels,
/// plus (per climate mode) standardized climate variables copied onto every
/// timepoint. Shape (m, T, C_obs + selected climate dims).
inline Tensor make_model_input(const Dataset& ds, std::span<const std::int64_t> indices,
                               ClimateMode mode) {
  if (!ds.stats.fitted) throw DataError("make_model_input: normalization stats not fitted");
  const auto cc = climate_columns(mode, ds.climate_dim);
  const auto T = ds.timepoints, C = ds.obs_channels;
  const auto total_c = C + cc.count;
  const auto m = static_cast<std::int64_t>(indices.size());
  std::vector<double> data(static_cast<std::size_t>(m * T * total_c));
  for (std::int64_t r = 0; r < m; ++r) {
    const auto& s = ds.samples[static_cast<std::size_t>(indices[static_cast<std::size_t>(r)])];
    for (std::int64_t t = 0; t < T; ++t) {
      double* row = data.data() + (r * T + t) * total_c;
      for (std::int64_t c = 0; c < C; ++c)
        row[c] = detail::zscore(s.timeseries[static_cast<std::size_t>(t * C + c)],
                                ds.stats.obs_mean[static_cast<std::size_t>(c)],
                                ds.stats.obs_std[static_cast<std::size_t>(c)]);
      for (std::int64_t j = 0; j < cc.count; ++j) {
        const auto src = static_cast<std::size_t>(cc.start + j);
        row[C + j] = detail::zscore(s.climate[src], ds.stats.climate_mean[src],
                                    ds.stats.climate_std[src]);
      }
    }
  }
  return Tensor::from_data({m, T, total_c}, std::move(data));
}

inline std::vector<std::int64_t> labels_of(const Dataset& ds,
                                           std::span<const std::int64_t> indices) {
  std::vector<std::int64_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(ds.samples[static_cast<std::size_t>(i)].label);
  return out;
}

/// Channel count the model sees for a dataset under a climate mode.
inline std::int64_t model_input_channels(const Dataset& ds, ClimateMode mode) {
  return ds.obs_channels + climate_columns(mode, ds.climate_dim).count;
}

// --- binary dataset cache ----------------------------------------------------
// Layout: magic, version, provenance, seed, dims, class names, imputation
// counter, stats block, then packed per-sample records (LE 64-bit floats).

namespace detail {

constexpr char kDatasetMagic[8] = {'A', 'R', 'C', 'D', 'O', 'G', 'D', 'S'};

inline void write_f64_vec(std::ostream& os, const std::vector<double>& v) {
  write_pod<std::uint64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_f64_vec(std::istream& is) {
  auto n = read_pod<std::uint64_t>(is);
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw DataError("dataset cache: truncated float block");
  return v;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("dataset cache: cannot open '" + path + "' for writing");
  os.write(detail::kDatasetMagic, 8);
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_string(os, ds.provenance);
  detail::write_pod<std::uint64_t>(os, ds.seed);
  detail::write_pod<std::int64_t>(os, ds.timepoints);
  detail::write_pod<std::int64_t>(os, ds.obs_channels);
  detail::write_pod<std::int64_t>(os, ds.climate_dim);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.class_names.size()));
  for (const auto& n : ds.class_names) detail::write_string(os, n);
  detail::write_pod<std::uint64_t>(os, ds.imputed_cells);
  detail::write_pod<std::uint8_t>(os, ds.stats.fitted ? 1 : 0);
  if (ds.stats.fitted) {
    detail::write_f64_vec(os, ds.stats.obs_mean);
    detail::write_f64_vec(os, ds.stats.obs_std);
    detail::write_f64_vec(os, ds.stats.climate_mean);
    detail::write_f64_vec(os, ds.stats.climate_std);
  }
  detail::write_pod<std::uint64_t>(os, ds.samples.size());
  for (const auto& s : ds.samples) {
    detail::write_pod<double>(os, s.lat);
    detail::write_pod<double>(os, s.lon);
    os.write(reinterpret_cast<const char*>(s.timeseries.data()),
             static_cast<std::streamsize>(s.timeseries.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(s.missing.data()),
             static_cast<std::streamsize>(s.missing.size()));
    os.write(reinterpret_cast<const char*>(s.climate.data()),
             static_cast<std::streamsize>(s.climate.size() * sizeof(double)));
    detail::write_pod<std::int64_t>(os, s.label);
  }
  if (!os) throw DataError("dataset cache: write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("dataset cache: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kDatasetMagic, 8) != 0)
    throw DataError("dataset cache: bad magic in '" + path + "'");
  if (detail::read_pod<std::uint32_t>(is) != 1)
    throw DataError("dataset cache: unsupported version in '" + path + "'");
  Dataset ds;
  ds.provenance = detail::read_string(is);
  ds.seed = detail::read_pod<std::uint64_t>(is);
  ds.timepoints = detail::read_pod<std::int64_t>(is);
  ds.obs_channels = detail::read_pod<std::int64_t>(is);
  ds.climate_dim = detail::read_pod<std::int64_t>(is);
  const auto n_classes = detail::read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_classes; ++i) ds.class_names.push_back(detail::read_string(is));
  ds.imputed_cells = detail::read_pod<std::uint64_t>(is);
  if (detail::read_pod<std::uint8_t>(is)) {
    ds.stats.obs_mean = detail::read_f64_vec(is);
    ds.stats.obs_std = detail::read_f64_vec(is);
    ds.stats.climate_mean = detail::read_f64_vec(is);
    ds.stats.climate_std = detail::read_f64_vec(is);
    ds.stats.fitted = true;
  }
  const auto n = detail::read_pod<std::uint64_t>(is);
  const auto cells = static_cast<std::size_t>(ds.timepoints * ds.obs_channels);
  ds.samples.resize(n);
  for (auto& s : ds.samples) {
    s.lat = detail::read_pod<double>(is);
    s.lon = detail::read_pod<double>(is);
    s.timeseries.resize(cells);
    is.read(reinterpret_cast<char*>(s.timeseries.data()),
            static_cast<std::streamsize>(cells * sizeof(double)));
    s.missing.resize(cells);
    is.read(reinterpret_cast<char*>(s.missing.data()), static_cast<std::streamsize>(cells));
    s.climate.resize(static_cast<std::size_t>(ds.climate_dim));
    is.read(reinterpret_cast<char*>(s.climate.data()),
            static_cast<std::streamsize>(s.climate.size() * sizeof(double)));
    s.label = detail::read_pod<std::int64_t>(is);
    if (!is) throw DataError("dataset cache: truncated sample block");
    if (s.label < 0 || s.label >= ds.num_classes())
      throw DataError("dataset cache: label out of range");
  }
  ds.recompute_regions();
  return ds;
}

}  // namespace arcdog
