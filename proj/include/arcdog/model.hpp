#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "arcdog/ops.hpp"
#include "arcdog/tensor.hpp"

namespace arcdog {

/// Architecture of the single-pixel timeseries classifier: layer norm ->
/// two-block conv extractor -> layer norm -> sinusoidal positional encoding
/// -> transformer encoder stack -> layer norm -> max-pool over time ->
/// linear (kernel-1 conv) classification head.
struct ModelConfig {
  std::int64_t input_channels = 9;
  std::int64_t timepoints = 8;
  std::int64_t feature_dim = 64;
  std::int64_t encoder_layers = 2;
  std::int64_t heads = 2;
  std::int64_t feedforward_dim = 256;
  double dropout_rate = 0.1;
  std::int64_t num_classes = 25;
  std::int64_t extractor_kernel = 3;

  void validate() const {
    if (feature_dim <= 0 || heads <= 0 || feature_dim % heads != 0)
      throw ConfigError("model: feature_dim " + std::to_string(feature_dim) +
                        " must be a positive multiple of heads " + std::to_string(heads));
    if (timepoints < 1) throw ConfigError("model: timepoints must be >= 1");
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (input_channels < 1) throw ConfigError("model: input_channels must be >= 1");
    if (encoder_layers < 1) throw ConfigError("model: encoder_layers must be >= 1");
    if (feedforward_dim < 1) throw ConfigError("model: feedforward_dim must be >= 1");
    if (extractor_kernel < 1 || extractor_kernel % 2 == 0)
      throw ConfigError("model: extractor_kernel must be odd and >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ConfigError("model: dropout_rate must be in [0, 1)");
  }
};

/// All learnable tensors, in a stable order (checkpoint and optimizer state
/// both key off it).
struct ModelParams {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> named;

  Tensor& at(const std::string& name) {
    for (auto& [n, t] : named)
      if (n == name) return t;
    throw ShapeError("model: unknown parameter '" + name + "'");
  }
  const Tensor& at(const std::string& name) const {
    for (const auto& [n, t] : named)
      if (n == name) return t;
    throw ShapeError("model: unknown parameter '" + name + "'");
  }

  void zero_grad() {
    for (auto& [n, t] : named) t.zero_grad();
  }

  /// Detached deep copy (snapshots for early stopping).
  ModelParams clone() const {
    ModelParams out;
    out.config = config;
    out.named.reserve(named.size());
    for (const auto& [n, t] : named) {
      Tensor c = t.detach();
      c.set_requires_grad(t.requires_grad());
      out.named.emplace_back(n, std::move(c));
    }
    return out;
  }
};

namespace detail {

inline Tensor init_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : d) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(d), true);
}

inline void add_norm_params(ModelParams& p, const std::string& prefix, std::int64_t dim) {
  p.named.emplace_back(prefix + ".gain", Tensor(Shape{dim}, 1.0, true));
  p.named.emplace_back(prefix + ".bias", Tensor(Shape{dim}, 0.0, true));
}

}  // namespace detail

/// Deterministic fan-in-scaled uniform initialization; norm gains start at 1
/// and every bias at 0.
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  Rng rng = Rng::from(seed, "model-init");
  const auto C = config.input_channels, D = config.feature_dim, F = config.feedforward_dim;
  const auto K = config.num_classes, k = config.extractor_kernel;

  detail::add_norm_params(p, "input_norm", C);
  p.named.emplace_back("conv1.weight", detail::init_uniform({k, C, D}, k * C, rng));
  p.named.emplace_back("conv1.bias", Tensor(Shape{D}, 0.0, true));
  p.named.emplace_back("conv2.weight", detail::init_uniform({k, D, D}, k * D, rng));
  p.named.emplace_back("conv2.bias", Tensor(Shape{D}, 0.0, true));
  detail::add_norm_params(p, "pre_encoder_norm", D);
  for (std::int64_t l = 0; l < config.encoder_layers; ++l) {
    const std::string e = "encoder" + std::to_string(l);
    for (const char* w : {"wq", "wk", "wv", "wo"})
      p.named.emplace_back(e + ".attn." + w, detail::init_uniform({D, D}, D, rng));
    for (const char* b : {"bq", "bk", "bv", "bo"})
      p.named.emplace_back(e + ".attn." + b, Tensor(Shape{D}, 0.0, true));
    detail::add_norm_params(p, e + ".norm1", D);
    p.named.emplace_back(e + ".ff.w1", detail::init_uniform({D, F}, D, rng));
    p.named.emplace_back(e + ".ff.b1", Tensor(Shape{F}, 0.0, true));
    p.named.emplace_back(e + ".ff.w2", detail::init_uniform({F, D}, F, rng));
    p.named.emplace_back(e + ".ff.b2", Tensor(Shape{D}, 0.0, true));
    detail::add_norm_params(p, e + ".norm2", D);
  }
  detail::add_norm_params(p, "final_norm", D);
  p.named.emplace_back("classifier.weight", detail::init_uniform({D, K}, D, rng));
  p.named.emplace_back("classifier.bias", Tensor(Shape{K}, 0.0, true));
  return p;
}

/// Fixed sinusoidal positional encoding over `timepoints` positions.
inline Tensor positional_encoding(std::int64_t timepoints, std::int64_t dim) {
  std::vector<double> pe(static_cast<std::size_t>(timepoints * dim), 0.0);
  for (std::int64_t t = 0; t < timepoints; ++t) {
    for (std::int64_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe[static_cast<std::size_t>(t * dim + i)] = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < dim) pe[static_cast<std::size_t>(t * dim + i + 1)] = std::cos(static_cast<double>(t) * freq);
    }
  }
  return Tensor::from_data({timepoints, dim}, std::move(pe));
}

struct ForwardResult {
  Tensor logits;    // m x num_classes
  Tensor features;  // m x feature_dim, tapped at the max-pool output
};

/// Optional capture of attention probabilities, one (m, heads, T, T) tensor
/// per encoder layer, plus kink-distance diagnostics: the smallest |pre-relu
/// activation| and max-pool runner-up gap seen. Finite-difference gradient
/// checks are only valid when these clear the step size.
struct ForwardTrace {
  std::vector<Tensor> attention;
  double min_relu_abs = std::numeric_limits<double>::infinity();
  double min_pool_gap = std::numeric_limits<double>::infinity();
};

namespace detail {

inline Tensor self_attention(const Tensor& x, const ModelParams& p, const std::string& prefix,
                             std::int64_t heads, ForwardTrace* trace) {
  const auto D = x.dim(2);
  const auto dh = D / heads;
  Tensor q = split_heads(linear(x, p.at(prefix + ".wq"), p.at(prefix + ".bq")), heads);
  Tensor kk = split_heads(linear(x, p.at(prefix + ".wk"), p.at(prefix + ".bk")), heads);
  Tensor v = split_heads(linear(x, p.at(prefix + ".wv"), p.at(prefix + ".bv")), heads);
  Tensor scores = scale(bmm(q, kk, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor att = softmax(scores);
  if (trace) trace->attention.push_back(att);
  Tensor ctx = merge_heads(bmm(att, v));
  return linear(ctx, p.at(prefix + ".wo"), p.at(prefix + ".bo"));
}

}  // namespace detail

/// Full classifier forward pass on a (m, T, C) batch. Pure in (params,
/// batch, train_flag, rng state); dropout fires only when train_flag.
inline ForwardResult forward(const ModelParams& p, const Tensor& batch, bool train_flag,
                             Rng* dropout_rng = nullptr, ForwardTrace* trace = nullptr) {
  const auto& cfg = p.config;
  detail::require(batch.rank() == 3, "forward: batch must be (m, T, C), got " +
                                         format_shape(batch.shape()));
  detail::require(batch.dim(1) == cfg.timepoints && batch.dim(2) == cfg.input_channels,
                  "forward: batch shape " + format_shape(batch.shape()) +
                      " does not match config (T=" + std::to_string(cfg.timepoints) +
                      ", C=" + std::to_string(cfg.input_channels) + ")");
  const double rate = cfg.dropout_rate;
  auto drop = [&](const Tensor& t) { return dropout(t, rate, train_flag, dropout_rng); };
  auto track_kinks = [&](const Tensor& pre) {
    if (!trace) return;
    for (double v : pre.data())
      trace->min_relu_abs = std::min(trace->min_relu_abs, std::fabs(v));
  };

  Tensor x = layer_norm(batch, p.at("input_norm.gain"), p.at("input_norm.bias"));
  Tensor pre = conv1d(x, p.at("conv1.weight"), p.at("conv1.bias"));
  track_kinks(pre);
  x = relu(pre);
  pre = conv1d(x, p.at("conv2.weight"), p.at("conv2.bias"));
  track_kinks(pre);
  x = relu(pre);
  x = layer_norm(x, p.at("pre_encoder_norm.gain"), p.at("pre_encoder_norm.bias"));
  x = add_broadcast(x, positional_encoding(cfg.timepoints, cfg.feature_dim));
  for (std::int64_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string e = "encoder" + std::to_string(l);
    Tensor att = detail::self_attention(x, p, e + ".attn", cfg.heads, trace);
    x = layer_norm(add(x, drop(att)), p.at(e + ".norm1.gain"), p.at(e + ".norm1.bias"));
    pre = linear(x, p.at(e + ".ff.w1"), p.at(e + ".ff.b1"));
    track_kinks(pre);
    Tensor h = drop(relu(pre));
    h = linear(h, p.at(e + ".ff.w2"), p.at(e + ".ff.b2"));
    x = layer_norm(add(x, drop(h)), p.at(e + ".norm2.gain"), p.at(e + ".norm2.bias"));
  }
  x = layer_norm(x, p.at("final_norm.gain"), p.at("final_norm.bias"));
  if (trace) {
    const auto M = x.dim(0), T = x.dim(1), D = x.dim(2);
    for (std::int64_t s = 0; s < M; ++s)
      for (std::int64_t d = 0; d < D; ++d) {
        double best = -std::numeric_limits<double>::infinity(), second = best;
        for (std::int64_t t = 0; t < T; ++t) {
          const double v = x.at({s, t, d});
          if (v > best) {
            second = best;
            best = v;
          } else if (v > second) {
            second = v;
          }
        }
        if (T > 1) trace->min_pool_gap = std::min(trace->min_pool_gap, best - second);
      }
  }
  ForwardResult out;
  out.features = max_over_axis(x, 1);
  out.logits = linear(out.features, p.at("classifier.weight"), p.at("classifier.bias"));
  return out;
}

// --- checkpoint io ---------------------------------------------------------
// Layout: magic, version, config block, then each named tensor as
// (u32 name length, name bytes, u32 rank, i64 dims, little-endian f64 data).

namespace detail {

constexpr char kCheckpointMagic[8] = {'A', 'R', 'C', 'D', 'O', 'G', 'C', 'K'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint/cache: truncated file");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("checkpoint/cache: truncated string");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  os.write(detail::kCheckpointMagic, 8);
  detail::write_pod<std::uint32_t>(os, 1);
  const auto& c = p.config;
  for (std::int64_t v : {c.input_channels, c.timepoints, c.feature_dim, c.encoder_layers, c.heads,
                         c.feedforward_dim, c.num_classes, c.extractor_kernel})
    detail::write_pod<std::int64_t>(os, v);
  detail::write_pod<double>(os, c.dropout_rate);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.named.size()));
  for (const auto& [name, t] : p.named) {
    detail::write_string(os, name);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::write_pod<std::int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write to '" + path + "' failed");
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint: bad magic in '" + path + "'");
  if (detail::read_pod<std::uint32_t>(is) != 1)
    throw DataError("checkpoint: unsupported version in '" + path + "'");
  ModelParams p;
  auto& c = p.config;
  c.input_channels = detail::read_pod<std::int64_t>(is);
  c.timepoints = detail::read_pod<std::int64_t>(is);
  c.feature_dim = detail::read_pod<std::int64_t>(is);
  c.encoder_layers = detail::read_pod<std::int64_t>(is);
  c.heads = detail::read_pod<std::int64_t>(is);
  c.feedforward_dim = detail::read_pod<std::int64_t>(is);
  c.num_classes = detail::read_pod<std::int64_t>(is);
  c.extractor_kernel = detail::read_pod<std::int64_t>(is);
  c.dropout_rate = detail::read_pod<double>(is);
  const auto n = detail::read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = detail::read_string(is);
    const auto rank = detail::read_pod<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_pod<std::int64_t>(is);
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated tensor '" + name + "'");
    p.named.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data), true));
  }
  return p;
}

}  // namespace arcdog
