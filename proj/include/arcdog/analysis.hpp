#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "arcdog/loss.hpp"
#include "arcdog/tensor.hpp"

namespace arcdog {

/// Overall (micro) and macro accuracy plus the full confusion table.
/// Macro averages per-class recall over classes with at least one sample.
struct MetricsReport {
  double overall = 0.0;
  double macro = 0.0;
  std::vector<double> per_class;             // recall per class (0 when unseen)
  std::vector<std::int64_t> class_counts;    // true-label counts
  std::vector<std::int64_t> confusion;       // K x K, rows = truth, cols = prediction
  std::int64_t total = 0;
};

inline MetricsReport compute_metrics(std::span<const std::int64_t> predictions,
                                     std::span<const std::int64_t> labels, std::int64_t num_classes) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw DataError("compute_metrics: need equal-length, non-empty predictions and labels");
  MetricsReport r;
  r.total = static_cast<std::int64_t>(labels.size());
  r.confusion.assign(static_cast<std::size_t>(num_classes * num_classes), 0);
  r.class_counts.assign(static_cast<std::size_t>(num_classes), 0);
  r.per_class.assign(static_cast<std::size_t>(num_classes), 0.0);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = labels[i], p = predictions[i];
    if (y < 0 || y >= num_classes || p < 0 || p >= num_classes)
      throw DataError("compute_metrics: label/prediction outside [0, K)");
    ++r.confusion[static_cast<std::size_t>(y * num_classes + p)];
    ++r.class_counts[static_cast<std::size_t>(y)];
    if (y == p) ++correct;
  }
  r.overall = static_cast<double>(correct) / static_cast<double>(r.total);
  std::int64_t present = 0;
  double recall_sum = 0.0;
  for (std::int64_t k = 0; k < num_classes; ++k) {
    const auto count = r.class_counts[static_cast<std::size_t>(k)];
    if (count == 0) continue;
    const double recall =
        static_cast<double>(r.confusion[static_cast<std::size_t>(k * num_classes + k)]) /
        static_cast<double>(count);
    r.per_class[static_cast<std::size_t>(k)] = recall;
    recall_sum += recall;
    ++present;
  }
  r.macro = present > 0 ? recall_sum / static_cast<double>(present) : 0.0;
  return r;
}

/// Per-test-point nearest training neighbor: its region id and distance,
/// plus the test coordinates for gridding.
struct KnnResult {
  std::vector<int> nearest_region;
  std::vector<double> nearest_distance;
  std::vector<double> lat, lon;
};

/// Exact 1-NN under Euclidean distance, brute force. Ties break to the
/// lowest region id, then the lowest training index.
inline KnnResult knn_features(const Tensor& train_features, std::span<const int> train_regions,
                              const Tensor& test_features) {
  detail::require(train_features.rank() == 2 && test_features.rank() == 2 &&
                      train_features.dim(1) == test_features.dim(1),
                  "knn: feature dims disagree: " + format_shape(train_features.shape()) + " vs " +
                      format_shape(test_features.shape()));
  const auto n = train_features.dim(0), f = train_features.dim(1), m = test_features.dim(0);
  if (n == 0) throw DataError("knn: empty training set");
  if (train_regions.size() != static_cast<std::size_t>(n))
    throw DataError("knn: region list does not match training rows");
  KnnResult out;
  out.nearest_region.resize(static_cast<std::size_t>(m));
  out.nearest_distance.resize(static_cast<std::size_t>(m));
  const double* tr = train_features.data().data();
  const double* te = test_features.data().data();
  for (std::int64_t i = 0; i < m; ++i) {
    double best_d2 = std::numeric_limits<double>::infinity();
    int best_region = -1;
    std::int64_t best_idx = -1;
    const double* q = te + i * f;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* p = tr + j * f;
      double d2 = 0.0;
      for (std::int64_t k = 0; k < f; ++k) {
        const double diff = q[k] - p[k];
        d2 += diff * diff;
      }
      const int rj = train_regions[static_cast<std::size_t>(j)];
      if (d2 < best_d2 || (d2 == best_d2 && (rj < best_region ||
                                             (rj == best_region && j < best_idx)))) {
        best_d2 = d2;
        best_region = rj;
        best_idx = j;
      }
    }
    out.nearest_region[static_cast<std::size_t>(i)] = best_region;
    out.nearest_distance[static_cast<std::size_t>(i)] = std::sqrt(best_d2);
  }
  return out;
}

/// 1-NN on z-scored climate vectors (training-split stats), matching test
/// samples against training samples of a dataset.
inline KnnResult knn_climate(const Dataset& ds, std::span<const std::int64_t> train_indices,
                             std::span<const std::int64_t> test_indices,
                             ClimateMode mode = ClimateMode::all) {
  Tensor train = domain_matrix(ds, train_indices, mode);
  Tensor test = domain_matrix(ds, test_indices, mode);
  std::vector<int> regions;
  regions.reserve(train_indices.size());
  for (auto i : train_indices) regions.push_back(ds.samples[static_cast<std::size_t>(i)].region);
  KnnResult out = knn_features(train, regions, test);
  out.lat.reserve(test_indices.size());
  out.lon.reserve(test_indices.size());
  for (auto i : test_indices) {
    out.lat.push_back(ds.samples[static_cast<std::size_t>(i)].lat);
    out.lon.push_back(ds.samples[static_cast<std::size_t>(i)].lon);
  }
  return out;
}

// --- heatmap emission --------------------------------------------------------

struct HeatPoint {
  double lat = 0.0, lon = 0.0, value = 0.0;
};

namespace detail {

inline std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// CSV rows (lat, lon, value); %.17g so emit -> read -> emit is idempotent.
inline void write_heatmap_csv(std::span<const HeatPoint> points, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("heatmap: cannot open '" + path + "' for writing");
  os << "lat,lon,value\n";
  for (const auto& p : points)
    os << detail::format_g17(p.lat) << ',' << detail::format_g17(p.lon) << ','
       << detail::format_g17(p.value) << '\n';
  if (!os) throw DataError("heatmap: write to '" + path + "' failed");
}

inline std::vector<HeatPoint> read_heatmap_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("heatmap: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != "lat,lon,value")
    throw DataError("heatmap: '" + path + "' lacks the lat,lon,value header");
  std::vector<HeatPoint> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != 3)
      throw DataError("heatmap: line " + std::to_string(line_no) + ": expected 3 columns");
    out.push_back({detail::parse_double(fields[0], line_no, "lat"),
                   detail::parse_double(fields[1], line_no, "lon"),
                   detail::parse_double(fields[2], line_no, "value")});
  }
  return out;
}

namespace detail {

struct Rgb {
  unsigned char r, g, b;
};

/// Linear blue -> red ramp over [0, 1]: low values cool, high values warm.
inline Rgb ramp_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return {static_cast<unsigned char>(std::lround(255.0 * t)), 0,
          static_cast<unsigned char>(std::lround(255.0 * (1.0 - t)))};
}

/// Fixed palette for region-id fields (documented in the README).
inline Rgb region_color(int region) {
  static const Rgb palette[4] = {{0, 114, 178}, {230, 159, 0}, {0, 158, 115}, {213, 94, 0}};
  if (region < 0 || region > 3)
    throw DataError("heatmap: categorical value " + std::to_string(region) + " outside 0..3");
  return palette[region];
}

}  // namespace detail

/// Binary portable pixmap of the gridded points, north up. Continuous
/// fields use the blue->red ramp over [min, max]; categorical renders
/// region ids 0-3 with a fixed palette. Cells without points are gray.
inline void write_heatmap_ppm(std::span<const HeatPoint> points, const std::string& path,
                              bool categorical = false) {
  if (points.empty()) throw DataError("heatmap: no points to raster");
  std::map<double, std::int64_t> lat_ix, lon_ix;
  for (const auto& p : points) {
    lat_ix.emplace(p.lat, 0);
    lon_ix.emplace(p.lon, 0);
  }
  std::int64_t H, W;
  bool exact = lat_ix.size() <= 1024 && lon_ix.size() <= 1024;
  double lat_min = lat_ix.begin()->first, lat_max = lat_ix.rbegin()->first;
  double lon_min = lon_ix.begin()->first, lon_max = lon_ix.rbegin()->first;
  if (exact) {
    H = static_cast<std::int64_t>(lat_ix.size());
    W = static_cast<std::int64_t>(lon_ix.size());
    std::int64_t i = 0;
    for (auto& [k, v] : lat_ix) v = i++;
    i = 0;
    for (auto& [k, v] : lon_ix) v = i++;
  } else {
    H = W = 256;
  }
  auto row_of = [&](double lat) {
    const std::int64_t r = exact ? lat_ix[lat]
                                 : (lat_max > lat_min
                                        ? static_cast<std::int64_t>((lat - lat_min) / (lat_max - lat_min) * static_cast<double>(H - 1) + 0.5)
                                        : 0);
    return H - 1 - r;  // north up
  };
  auto col_of = [&](double lon) {
    return exact ? lon_ix[lon]
                 : (lon_max > lon_min
                        ? static_cast<std::int64_t>((lon - lon_min) / (lon_max - lon_min) * static_cast<double>(W - 1) + 0.5)
                        : 0);
  };
  std::vector<double> sum(static_cast<std::size_t>(H * W), 0.0);
  std::vector<std::int64_t> count(static_cast<std::size_t>(H * W), 0);
  double vmin = points[0].value, vmax = points[0].value;
  for (const auto& p : points) {
    const auto cell = static_cast<std::size_t>(row_of(p.lat) * W + col_of(p.lon));
    sum[cell] += p.value;
    ++count[cell];
    vmin = std::min(vmin, p.value);
    vmax = std::max(vmax, p.value);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("heatmap: cannot open '" + path + "' for writing");
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> rgb(static_cast<std::size_t>(H * W * 3), 200);
  for (std::int64_t cell = 0; cell < H * W; ++cell) {
    const auto ci = static_cast<std::size_t>(cell);
    if (count[ci] == 0) continue;
    const double v = sum[ci] / static_cast<double>(count[ci]);
    detail::Rgb c;
    if (categorical) {
      c = detail::region_color(static_cast<int>(std::lround(v)));
    } else {
      c = detail::ramp_color(vmax > vmin ? (v - vmin) / (vmax - vmin) : 0.5);
    }
    rgb[ci * 3] = c.r;
    rgb[ci * 3 + 1] = c.g;
    rgb[ci * 3 + 2] = c.b;
  }
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw DataError("heatmap: write to '" + path + "' failed");
}

}  // namespace arcdog
