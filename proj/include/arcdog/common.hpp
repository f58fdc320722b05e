#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace arcdog {

/// Shape/argument violations (maps to CLI exit code 1).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Config-file / usage problems (CLI exit code 1).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failures: non-finite values, failed solves (CLI exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a ridgeless normal-equation solve meets singular features.
class RankDeficientError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Which climate variables enter the model input / regression target.
/// `temperature` is bio01-bio11, `precipitation` bio12-bio19; the subsets
/// are only defined for the 19-variable bioclim layout.
enum class ClimateMode { none, all, temperature, precipitation };

inline const char* climate_mode_name(ClimateMode m) {
  switch (m) {
    case ClimateMode::none: return "none";
    case ClimateMode::all: return "all";
    case ClimateMode::temperature: return "temperature";
    case ClimateMode::precipitation: return "precipitation";
  }
  return "?";
}

inline ClimateMode parse_climate_mode(const std::string& s) {
  if (s == "none") return ClimateMode::none;
  if (s == "all") return ClimateMode::all;
  if (s == "temperature") return ClimateMode::temperature;
  if (s == "precipitation") return ClimateMode::precipitation;
  throw ConfigError("unknown climate mode '" + s + "' (expected none|all|temperature|precipitation)");
}

/// Column range [start, start+count) of the climate vector selected by a
/// mode. Subset modes require the 19-dim bioclim layout.
struct ClimateColumns {
  std::int64_t start = 0;
  std::int64_t count = 0;
};

inline ClimateColumns climate_columns(ClimateMode mode, std::int64_t climate_dim) {
  switch (mode) {
    case ClimateMode::none: return {0, 0};
    case ClimateMode::all: return {0, climate_dim};
    case ClimateMode::temperature:
    case ClimateMode::precipitation:
      if (climate_dim != 19)
        throw DataError("climate mode '" + std::string(climate_mode_name(mode)) +
                        "' needs the 19-variable bioclim layout, dataset has " +
                        std::to_string(climate_dim));
      return mode == ClimateMode::temperature ? ClimateColumns{0, 11} : ClimateColumns{11, 8};
  }
  return {0, 0};
}

namespace detail {

// splitmix64 finalizer; also used to fold labels/indices into seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Deterministic, portable random stream (splitmix64 core). The standard
/// library distributions are implementation-defined, so uniform/normal are
/// derived from raw bits here; identical seeds give identical streams on
/// every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(detail::mix64(seed ^ 0xa076bc81fd92c3d1ULL)) {}

  /// Derives an independent stream from (seed, label, index). Used to split
  /// one experiment seed into per-purpose / per-point streams.
  static Rng from(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) {
    std::uint64_t s = detail::mix64(seed ^ 0x8e2f0915c64c71a3ULL);
    for (unsigned char c : label) s = detail::mix64(s ^ (0x100000001b3ULL * c));
    s = detail::mix64(s ^ detail::mix64(index));
    Rng r;
    r.state_ = s;
    return r;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // multiply-shift; bias is negligible for the n used here (n << 2^64)
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Standard normal via Box-Muller (spare value cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace arcdog
