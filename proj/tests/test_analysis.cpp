#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "arcdog/analysis.hpp"
#include "support/oracles.hpp"

using namespace arcdog;

namespace {

// Independent 1-NN scan: builds the full distance table first, then picks
// minima with the documented tie-break.
KnnResult reference_knn(const Tensor& train, std::span<const int> regions, const Tensor& test) {
  const auto n = train.dim(0), f = train.dim(1), m = test.dim(0);
  std::vector<double> table(static_cast<std::size_t>(n * m));
  for (std::int64_t j = 0; j < n; ++j)
    for (std::int64_t i = 0; i < m; ++i) {
      double d2 = 0.0;
      for (std::int64_t k = 0; k < f; ++k) {
        const double diff = test.at({i, k}) - train.at({j, k});
        d2 += diff * diff;
      }
      table[static_cast<std::size_t>(j * m + i)] = d2;
    }
  KnnResult out;
  out.nearest_region.resize(static_cast<std::size_t>(m));
  out.nearest_distance.resize(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < n; ++j) {
      const double d = table[static_cast<std::size_t>(j * m + i)];
      const double bd = table[static_cast<std::size_t>(best * m + i)];
      if (d < bd || (d == bd && (regions[static_cast<std::size_t>(j)] < regions[static_cast<std::size_t>(best)])))
        best = j;
    }
    out.nearest_region[static_cast<std::size_t>(i)] = regions[static_cast<std::size_t>(best)];
    out.nearest_distance[static_cast<std::size_t>(i)] = std::sqrt(table[static_cast<std::size_t>(best * m + i)]);
  }
  return out;
}

}  // namespace

TEST_CASE("metrics arithmetic: per-class recalls and their mean") {
  // class 0: 3 of 4 correct, class 1: 1 of 2 correct
  std::vector<std::int64_t> labels = {0, 0, 0, 0, 1, 1};
  std::vector<std::int64_t> preds = {0, 0, 0, 1, 1, 0};
  auto m = compute_metrics(preds, labels, 2);
  CHECK(m.macro == doctest::Approx(0.625).epsilon(1e-12));
  CHECK(m.overall == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
  CHECK(m.class_counts == std::vector<std::int64_t>{4, 2});
  // confusion row sums equal the class counts
  for (std::int64_t k = 0; k < 2; ++k) {
    std::int64_t row = 0;
    for (std::int64_t j = 0; j < 2; ++j) row += m.confusion[static_cast<std::size_t>(k * 2 + j)];
    CHECK(row == m.class_counts[static_cast<std::size_t>(k)]);
  }
}

TEST_CASE("metrics: perfect predictions score 1.0 on both metrics") {
  std::vector<std::int64_t> labels = {0, 1, 2, 2, 1};
  auto m = compute_metrics(labels, labels, 3);
  CHECK(m.overall == 1.0);
  CHECK(m.macro == 1.0);
}

TEST_CASE("metrics: random predictions over 25 uniform classes sit near chance") {
  Rng rng(3);
  std::vector<std::int64_t> labels(1000), preds(1000);
  for (auto& v : labels) v = static_cast<std::int64_t>(rng.uniform_int(25));
  for (auto& v : preds) v = static_cast<std::int64_t>(rng.uniform_int(25));
  auto m = compute_metrics(preds, labels, 25);
  CHECK(m.overall > 0.04 - 0.025);
  CHECK(m.overall < 0.04 + 0.025);
  CHECK(m.overall >= 0.0);
  CHECK(m.overall <= 1.0);
  CHECK(m.macro >= 0.0);
  CHECK(m.macro <= 1.0);
}

TEST_CASE("metrics: empty input is an error") {
  std::vector<std::int64_t> empty;
  CHECK_THROWS_AS(compute_metrics(empty, empty, 3), DataError);
}

TEST_CASE("1-NN basics: exact hits, tiny example, tie-breaks") {
  Tensor train = Tensor::from_data({3, 2}, {0, 0, 1, 0, 0, 2});
  std::vector<int> regions = {0, 1, 2};

  SUBCASE("a query equal to a training feature has distance zero") {
    Tensor q = Tensor::from_data({1, 2}, {1, 0});
    auto r = knn_features(train, regions, q);
    CHECK(r.nearest_distance[0] == 0.0);
    CHECK(r.nearest_region[0] == 1);
  }

  SUBCASE("(0.9, 0.1) is closest to (1, 0)") {
    Tensor q = Tensor::from_data({1, 2}, {0.9, 0.1});
    auto r = knn_features(train, regions, q);
    CHECK(r.nearest_region[0] == 1);
    CHECK(r.nearest_distance[0] == doctest::Approx(std::sqrt(0.02)).epsilon(1e-9));
  }

  SUBCASE("equidistant duplicates resolve to the lowest region id") {
    Tensor dup = Tensor::from_data({3, 2}, {5, 5, 5, 5, 0, 0});
    std::vector<int> dup_regions = {2, 1, 3};
    Tensor q = Tensor::from_data({1, 2}, {5, 5});
    auto r = knn_features(dup, dup_regions, q);
    CHECK(r.nearest_region[0] == 1);
    CHECK(r.nearest_distance[0] == 0.0);
  }

  SUBCASE("empty training set is an error") {
    Tensor none(Shape{0, 2});
    std::vector<int> no_regions;
    CHECK_THROWS_AS(knn_features(none, no_regions, train), DataError);
  }
}

TEST_CASE("1-NN matches the independent brute-force scan exactly") {
  Rng rng(17);
  const std::int64_t n = 300, m = 200, f = 8;
  std::vector<double> td(static_cast<std::size_t>(n * f)), qd(static_cast<std::size_t>(m * f));
  for (auto& v : td) v = rng.normal();
  for (auto& v : qd) v = rng.normal();
  Tensor train = Tensor::from_data({n, f}, std::move(td));
  Tensor test = Tensor::from_data({m, f}, std::move(qd));
  std::vector<int> regions(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < regions.size(); ++i) regions[i] = static_cast<int>(i % 4);
  auto got = knn_features(train, regions, test);
  auto ref = reference_knn(train, regions, test);
  for (std::int64_t i = 0; i < m; ++i) {
    CHECK(got.nearest_region[static_cast<std::size_t>(i)] == ref.nearest_region[static_cast<std::size_t>(i)]);
    CHECK(got.nearest_distance[static_cast<std::size_t>(i)] == ref.nearest_distance[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("climate 1-NN: locally constant at the border, growing with distance") {
  SyntheticSpec spec;
  spec.grid_n = 40;
  spec.seed = 23;
  Dataset ds = generate_synthetic(spec);
  SplitPlan plan{2, 0.0, 1};
  auto split = make_split(ds, plan);
  fit_normalization(ds, split.train);
  auto result = knn_climate(ds, split.train, split.test);

  SUBCASE("identical climates across the border give zero distance") {
    Dataset flat = ds;
    for (auto& s : flat.samples) s.climate.assign(s.climate.size(), 1.0);
    // constant climate z-scores to a zero vector on both sides of the border
    auto flat_split = make_split(flat, plan);
    fit_normalization(flat, flat_split.train);
    auto r = knn_climate(flat, flat_split.train, flat_split.test);
    for (double d : r.nearest_distance) CHECK(d == 0.0);
  }

  SUBCASE("distance to the nearest training climate grows away from the border") {
    // geographic distance of each test point to its nearest training point
    std::vector<double> geo;
    for (auto ti : split.test) {
      const auto& t = ds.samples[static_cast<std::size_t>(ti)];
      double best = std::numeric_limits<double>::infinity();
      for (auto si : split.train) {
        const auto& s = ds.samples[static_cast<std::size_t>(si)];
        best = std::min(best, std::hypot(t.lat - s.lat, t.lon - s.lon));
      }
      geo.push_back(best);
    }
    double mg = 0, mc = 0;
    for (std::size_t i = 0; i < geo.size(); ++i) {
      mg += geo[i];
      mc += result.nearest_distance[i];
    }
    mg /= static_cast<double>(geo.size());
    mc /= static_cast<double>(geo.size());
    double num = 0, dg = 0, dc = 0;
    for (std::size_t i = 0; i < geo.size(); ++i) {
      num += (geo[i] - mg) * (result.nearest_distance[i] - mc);
      dg += (geo[i] - mg) * (geo[i] - mg);
      dc += (result.nearest_distance[i] - mc) * (result.nearest_distance[i] - mc);
    }
    const double corr = num / std::sqrt(dg * dc);
    CHECK(corr > 0.2);
  }

  SUBCASE("temperature subset recomputes distances on 11 dims") {
    SyntheticSpec bio = spec;
    bio.domain_dim = 19;
    Dataset ds19 = generate_synthetic(bio);
    auto s19 = make_split(ds19, plan);
    fit_normalization(ds19, s19.train);
    auto full = knn_climate(ds19, s19.train, s19.test, ClimateMode::all);
    auto temp = knn_climate(ds19, s19.train, s19.test, ClimateMode::temperature);
    // brute-force check on the first few test points, using only dims 0..10
    Tensor train_t = domain_matrix(ds19, s19.train, ClimateMode::temperature);
    CHECK(train_t.dim(1) == 11);
    bool any_differs = false;
    for (std::size_t i = 0; i < temp.nearest_distance.size(); ++i)
      if (temp.nearest_distance[i] != full.nearest_distance[i]) any_differs = true;
    CHECK(any_differs);
    for (std::size_t i = 0; i < std::min<std::size_t>(20, temp.nearest_distance.size()); ++i) {
      const auto& t = ds19.samples[static_cast<std::size_t>(s19.test[i])];
      double best = std::numeric_limits<double>::infinity();
      for (auto si : s19.train) {
        const auto& s = ds19.samples[static_cast<std::size_t>(si)];
        double d2 = 0.0;
        for (std::size_t j = 0; j < 11; ++j) {
          const double zt = (t.climate[j] - ds19.stats.climate_mean[j]) / ds19.stats.climate_std[j];
          const double zs = (s.climate[j] - ds19.stats.climate_mean[j]) / ds19.stats.climate_std[j];
          d2 += (zt - zs) * (zt - zs);
        }
        best = std::min(best, d2);
      }
      CHECK(temp.nearest_distance[i] == doctest::Approx(std::sqrt(best)).epsilon(1e-9));
    }
  }
}

TEST_CASE("heatmap csv: rows, idempotence, errors") {
  std::vector<HeatPoint> pts = {{0, 0, 0.0}, {0, 1, 1.0}, {1, 0, 2.0}, {1, 1, 3.0}};
  auto dir = std::filesystem::temp_directory_path();
  auto p1 = (dir / "arcdog_hm1.csv").string();
  auto p2 = (dir / "arcdog_hm2.csv").string();
  write_heatmap_csv(pts, p1);
  auto rows = read_heatmap_csv(p1);
  REQUIRE(rows.size() == 4);
  CHECK(rows[3].value == 3.0);
  write_heatmap_csv(rows, p2);
  std::ifstream a(p1), b(p2);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK_THROWS_AS(write_heatmap_csv(pts, "/nonexistent-dir/x.csv"), DataError);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("heatmap raster: ramp corners, constant fields, categorical palette") {
  auto dir = std::filesystem::temp_directory_path();
  auto path = (dir / "arcdog_hm.ppm").string();
  std::vector<HeatPoint> pts = {{0, 0, 0.0}, {0, 1, 1.0}, {1, 0, 2.0}, {1, 1, 3.0}};
  write_heatmap_ppm(pts, path);
  {
    std::ifstream is(path, std::ios::binary);
    std::string header;
    std::getline(is, header);
    CHECK(header == "P6");
    std::string dims;
    std::getline(is, dims);
    CHECK(dims == "2 2");
    std::getline(is, dims);  // 255
    unsigned char rgb[12];
    is.read(reinterpret_cast<char*>(rgb), 12);
    // row 0 is north (lat 1): values 2,3 -> warm; row 1 south: 0 -> pure blue
    CHECK(static_cast<int>(rgb[6 + 0]) == 0);    // south-west red channel
    CHECK(static_cast<int>(rgb[6 + 2]) == 255);  // south-west blue channel
    CHECK(static_cast<int>(rgb[3 + 0]) == 255);  // north-east (value 3) pure red
    CHECK(static_cast<int>(rgb[3 + 2]) == 0);
  }
  // constant field: a single mid-ramp color everywhere
  std::vector<HeatPoint> flat = {{0, 0, 5.0}, {0, 1, 5.0}, {1, 0, 5.0}, {1, 1, 5.0}};
  write_heatmap_ppm(flat, path);
  {
    std::ifstream is(path, std::ios::binary);
    std::string line;
    for (int i = 0; i < 3; ++i) std::getline(is, line);
    unsigned char rgb[12];
    is.read(reinterpret_cast<char*>(rgb), 12);
    for (int p = 1; p < 4; ++p) {
      CHECK(rgb[p * 3] == rgb[0]);
      CHECK(rgb[p * 3 + 2] == rgb[2]);
    }
  }
  // categorical region field uses the documented 4-color palette
  std::vector<HeatPoint> regions = {{0, 0, 0}, {0, 1, 2}, {1, 0, 1}, {1, 1, 3}};
  write_heatmap_ppm(regions, path, /*categorical=*/true);
  {
    std::ifstream is(path, std::ios::binary);
    std::string line;
    for (int i = 0; i < 3; ++i) std::getline(is, line);
    unsigned char rgb[12];
    is.read(reinterpret_cast<char*>(rgb), 12);
    CHECK(static_cast<int>(rgb[6 + 0]) == 0);  // region 0: blue-ish (0,114,178)
    CHECK(static_cast<int>(rgb[6 + 1]) == 114);
    CHECK(static_cast<int>(rgb[6 + 2]) == 178);
    CHECK(static_cast<int>(rgb[9 + 0]) == 0);  // region 2: green (0,158,115)
    CHECK(static_cast<int>(rgb[9 + 1]) == 158);
  }
  std::vector<HeatPoint> bad = {{0, 0, 7.0}};
  CHECK_THROWS_AS(write_heatmap_ppm(bad, path, true), DataError);
  std::filesystem::remove(path);
}
