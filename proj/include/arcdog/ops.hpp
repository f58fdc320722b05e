#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "arcdog/tensor.hpp"

namespace arcdog {

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using CMatMap = Eigen::Map<const EMat>;

inline CMatMap cmap(std::span<const double> v, std::int64_t rows, std::int64_t cols) {
  return CMatMap(v.data(), rows, cols);
}
inline MatMap map(std::span<double> v, std::int64_t rows, std::int64_t cols) {
  return MatMap(v.data(), rows, cols);
}

// Column sums accumulated in row order. Unlike an Eigen redux, the rounding
// order never depends on buffer alignment, which keeps training runs
// bitwise reproducible.
inline void add_column_sums(const double* m, std::int64_t rows, std::int64_t cols, double* out) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = m + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) out[c] += row[c];
  }
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail

/// C = A·B for 2-D tensors.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + format_shape(a.shape()) + " and " +
                      format_shape(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  DataBuf out(static_cast<std::size_t>(m * n));
  detail::MatMap(out.data(), m, n).noalias() =
      detail::cmap(a.data(), m, k) * detail::cmap(b.data(), k, n);
  return detail::op_result("matmul", {m, n}, std::move(out), {a, b},
                           [a, b, m, k, n](detail::TensorNode* self) {
                             return [a, b, m, k, n, self]() {
                               auto dC = detail::CMatMap(self->grad.data(), m, n);
                               if (a.requires_grad()) {
                                 auto an = a.node();
                                 an->ensure_grad();
                                 detail::MatMap(an->grad.data(), m, k).noalias() +=
                                     dC * detail::cmap(b.data(), k, n).transpose();
                               }
                               if (b.requires_grad()) {
                                 auto bn = b.node();
                                 bn->ensure_grad();
                                 detail::MatMap(bn->grad.data(), k, n).noalias() +=
                                     detail::cmap(a.data(), m, k).transpose() * dC;
                               }
                             };
                           });
}

/// Batched matmul over identical leading dims: (..., r, s) x (..., s, t),
/// or (..., t, s) when transpose_b.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::require(a.rank() >= 3 && a.rank() == b.rank(),
                  "bmm: expected equal ranks >= 3, got " + format_shape(a.shape()) + " and " +
                      format_shape(b.shape()));
  std::int64_t batch = 1;
  for (std::int64_t i = 0; i + 2 < a.rank(); ++i) {
    detail::require(a.dim(i) == b.dim(i), "bmm: leading dims disagree: " + format_shape(a.shape()) +
                                              " vs " + format_shape(b.shape()));
    batch *= a.dim(i);
  }
  const auto r = a.dim(a.rank() - 2), s = a.dim(a.rank() - 1);
  const auto bs = transpose_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  const auto t = transpose_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  detail::require(bs == s, "bmm: inner dims disagree: " + format_shape(a.shape()) + " vs " +
                               format_shape(b.shape()));
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(r);
  out_shape.push_back(t);
  DataBuf out(static_cast<std::size_t>(batch * r * t));
  for (std::int64_t i = 0; i < batch; ++i) {
    auto A = detail::CMatMap(a.data().data() + i * r * s, r, s);
    auto C = detail::MatMap(out.data() + i * r * t, r, t);
    if (transpose_b) {
      auto B = detail::CMatMap(b.data().data() + i * t * s, t, s);
      C.noalias() = A * B.transpose();
    } else {
      auto B = detail::CMatMap(b.data().data() + i * s * t, s, t);
      C.noalias() = A * B;
    }
  }
  return detail::op_result(
      "bmm", std::move(out_shape), std::move(out), {a, b},
      [a, b, batch, r, s, t, transpose_b](detail::TensorNode* self) {
        return [a, b, batch, r, s, t, transpose_b, self]() {
          for (std::int64_t i = 0; i < batch; ++i) {
            auto dC = detail::CMatMap(self->grad.data() + i * r * t, r, t);
            if (a.requires_grad()) {
              auto an = a.node();
              an->ensure_grad();
              auto dA = detail::MatMap(an->grad.data() + i * r * s, r, s);
              if (transpose_b)
                dA.noalias() += dC * detail::CMatMap(b.data().data() + i * t * s, t, s);
              else
                dA.noalias() += dC * detail::CMatMap(b.data().data() + i * s * t, s, t).transpose();
            }
            if (b.requires_grad()) {
              auto bn = b.node();
              bn->ensure_grad();
              auto A = detail::CMatMap(a.data().data() + i * r * s, r, s);
              if (transpose_b) {
                auto dB = detail::MatMap(bn->grad.data() + i * t * s, t, s);
                dB.noalias() += dC.transpose() * A;
              } else {
                auto dB = detail::MatMap(bn->grad.data() + i * s * t, s, t);
                dB.noalias() += A.transpose() * dC;
              }
            }
          }
        };
      });
}

/// y = x·W + b applied to the last axis: (..., in) -> (..., out).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require(x.rank() >= 1 && w.rank() == 2 && x.dim(x.rank() - 1) == w.dim(0),
                  "linear: incompatible shapes " + format_shape(x.shape()) + " and " +
                      format_shape(w.shape()));
  detail::require(b.rank() == 1 && b.dim(0) == w.dim(1),
                  "linear: bias shape " + format_shape(b.shape()) + " does not match weight " +
                      format_shape(w.shape()));
  const auto cin = w.dim(0), cout = w.dim(1);
  const auto rows = x.size() / cin;
  Shape out_shape(x.shape());
  out_shape.back() = cout;
  DataBuf out(static_cast<std::size_t>(rows * cout));
  auto Y = detail::MatMap(out.data(), rows, cout);
  Y.noalias() = detail::cmap(x.data(), rows, cin) * detail::cmap(w.data(), cin, cout);
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), cout);
  return detail::op_result(
      "linear", std::move(out_shape), std::move(out), {x, w, b},
      [x, w, b, rows, cin, cout](detail::TensorNode* self) {
        return [x, w, b, rows, cin, cout, self]() {
          auto dY = detail::CMatMap(self->grad.data(), rows, cout);
          if (x.requires_grad()) {
            auto xn = x.node();
            xn->ensure_grad();
            detail::MatMap(xn->grad.data(), rows, cin).noalias() +=
                dY * detail::cmap(w.data(), cin, cout).transpose();
          }
          if (w.requires_grad()) {
            auto wn = w.node();
            wn->ensure_grad();
            detail::MatMap(wn->grad.data(), cin, cout).noalias() +=
                detail::cmap(x.data(), rows, cin).transpose() * dY;
          }
          if (b.requires_grad()) {
            auto bn = b.node();
            bn->ensure_grad();
            detail::add_column_sums(self->grad.data(), rows, cout, bn->grad.data());
          }
        };
      });
}

/// Elementwise sum of same-shape tensors.
inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + format_shape(a.shape()) +
                                              " vs " + format_shape(b.shape()));
  const auto n = static_cast<std::size_t>(a.size());
  DataBuf out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  return detail::op_result("add", a.shape(), std::move(out), {a, b},
                           [a, b](detail::TensorNode* self) {
                             return [a, b, self]() {
                               std::span<const double> g{self->grad.data(), self->grad.size()};
                               if (a.requires_grad()) detail::accumulate(a.node().get(), g);
                               if (b.requires_grad()) detail::accumulate(b.node().get(), g);
                             };
                           });
}

/// x + y where y's shape is a trailing suffix of x's (y is tiled over the
/// leading axes). Used for positional encodings.
inline Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  detail::require(y.rank() <= x.rank(), "add_broadcast: rank of " + format_shape(y.shape()) +
                                            " exceeds " + format_shape(x.shape()));
  const auto off = x.rank() - y.rank();
  for (std::int64_t i = 0; i < y.rank(); ++i)
    detail::require(x.dim(off + i) == y.dim(i), "add_broadcast: " + format_shape(y.shape()) +
                                                    " is not a suffix of " + format_shape(x.shape()));
  const auto inner = static_cast<std::size_t>(y.size());
  const auto n = static_cast<std::size_t>(x.size());
  DataBuf out(n);
  const double* px = x.data().data();
  const double* py = y.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = px[i] + py[i % inner];
  return detail::op_result(
      "add_broadcast", x.shape(), std::move(out), {x, y},
      [x, y, inner](detail::TensorNode* self) {
        return [x, y, inner, self]() {
          if (x.requires_grad())
            detail::accumulate(x.node().get(), {self->grad.data(), self->grad.size()});
          if (y.requires_grad()) {
            auto yn = y.node();
            yn->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i)
              yn->grad[i % inner] += self->grad[i];
          }
        };
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + format_shape(a.shape()) +
                                              " vs " + format_shape(b.shape()));
  const auto n = static_cast<std::size_t>(a.size());
  DataBuf out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
  return detail::op_result("sub", a.shape(), std::move(out), {a, b},
                           [a, b](detail::TensorNode* self) {
                             return [a, b, self]() {
                               if (a.requires_grad())
                                 detail::accumulate(a.node().get(), {self->grad.data(), self->grad.size()});
                               if (b.requires_grad()) {
                                 auto bn = b.node();
                                 bn->ensure_grad();
                                 for (std::size_t i = 0; i < self->grad.size(); ++i)
                                   bn->grad[i] -= self->grad[i];
                               }
                             };
                           });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + format_shape(a.shape()) +
                                              " vs " + format_shape(b.shape()));
  const auto n = static_cast<std::size_t>(a.size());
  DataBuf out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  return detail::op_result(
      "mul", a.shape(), std::move(out), {a, b}, [a, b](detail::TensorNode* self) {
        return [a, b, self]() {
          if (a.requires_grad()) {
            auto an = a.node();
            an->ensure_grad();
            const double* pb = b.data().data();
            for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i] * pb[i];
          }
          if (b.requires_grad()) {
            auto bn = b.node();
            bn->ensure_grad();
            const double* pa = a.data().data();
            for (std::size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] += self->grad[i] * pa[i];
          }
        };
      });
}

inline Tensor scale(const Tensor& x, double s) {
  const auto n = static_cast<std::size_t>(x.size());
  DataBuf out(n);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = px[i] * s;
  return detail::op_result("scale", x.shape(), std::move(out), {x},
                           [x, s](detail::TensorNode* self) {
                             return [x, s, self]() {
                               if (!x.requires_grad()) return;
                               auto xn = x.node();
                               xn->ensure_grad();
                               for (std::size_t i = 0; i < self->grad.size(); ++i)
                                 xn->grad[i] += self->grad[i] * s;
                             };
                           });
}

inline Tensor relu(const Tensor& x) {
  const auto n = static_cast<std::size_t>(x.size());
  DataBuf out(n);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = px[i] > 0.0 ? px[i] : 0.0;
  return detail::op_result("relu", x.shape(), std::move(out), {x},
                           [x](detail::TensorNode* self) {
                             return [x, self]() {
                               if (!x.requires_grad()) return;
                               auto xn = x.node();
                               xn->ensure_grad();
                               const double* px = x.data().data();
                               for (std::size_t i = 0; i < self->grad.size(); ++i)
                                 if (px[i] > 0.0) xn->grad[i] += self->grad[i];
                             };
                           });
}

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
  detail::require(x.rank() >= 1, "softmax: rank-0 input");
  const auto d = x.dim(x.rank() - 1);
  const auto rows = x.size() / d;
  DataBuf out(static_cast<std::size_t>(x.size()));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double* yr = out.data() + r * d;
    double mx = xr[0];
    for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::int64_t j = 0; j < d; ++j) yr[j] /= s;
  }
  return detail::op_result(
      "softmax", x.shape(), std::move(out), {x}, [x, rows, d](detail::TensorNode* self) {
        return [x, rows, d, self]() {
          if (!x.requires_grad()) return;
          auto xn = x.node();
          xn->ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self->data.data() + r * d;
            const double* dy = self->grad.data() + r * d;
            double* dx = xn->grad.data() + r * d;
            double dot = 0.0;
            for (std::int64_t j = 0; j < d; ++j) dot += dy[j] * y[j];
            for (std::int64_t j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dot);
          }
        };
      });
}

namespace detail {

inline Tensor layer_norm_impl(const Tensor& x, const Tensor* gain, const Tensor* bias, double eps) {
  require(x.rank() >= 1, "layer_norm: rank-0 input");
  const auto d = x.dim(x.rank() - 1);
  const auto rows = x.size() / d;
  if (gain) {
    require(gain->rank() == 1 && gain->dim(0) == d && bias->rank() == 1 && bias->dim(0) == d,
            "layer_norm: affine shapes " + format_shape(gain->shape()) + "/" +
                format_shape(bias->shape()) + " do not match last dim of " + format_shape(x.shape()));
  }
  DataBuf out(static_cast<std::size_t>(x.size()));
  auto xhat = std::make_shared<DataBuf>(static_cast<std::size_t>(x.size()));
  auto inv_std = std::make_shared<DataBuf>(static_cast<std::size_t>(rows));
  const double* g = gain ? gain->data().data() : nullptr;
  const double* bb = bias ? bias->data().data() : nullptr;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    double* hat = xhat->data() + r * d;
    double* yr = out.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) {
      hat[j] = (xr[j] - mu) * is;
      yr[j] = g ? hat[j] * g[j] + bb[j] : hat[j];
    }
  }
  std::vector<Tensor> parents = gain ? std::vector<Tensor>{x, *gain, *bias} : std::vector<Tensor>{x};
  Tensor gt = gain ? *gain : Tensor();
  Tensor bt = bias ? *bias : Tensor();
  bool affine = gain != nullptr;
  return op_result(
      "layer_norm", x.shape(), std::move(out), parents,
      [x, gt, bt, affine, rows, d, xhat, inv_std](TensorNode* self) {
        return [x, gt, bt, affine, rows, d, xhat, inv_std, self]() {
          const double* hat = xhat->data();
          const double* g = affine ? gt.data().data() : nullptr;
          const bool dx_wanted = x.requires_grad();
          const bool dg_wanted = affine && gt.requires_grad();
          const bool db_wanted = affine && bt.requires_grad();
          double* dxp = nullptr;
          double* dgp = nullptr;
          double* dbp = nullptr;
          if (dx_wanted) {
            auto xn = x.node();
            xn->ensure_grad();
            dxp = xn->grad.data();
          }
          if (dg_wanted) {
            auto gn = gt.node();
            gn->ensure_grad();
            dgp = gn->grad.data();
          }
          if (db_wanted) {
            auto bn = bt.node();
            bn->ensure_grad();
            dbp = bn->grad.data();
          }
          for (std::int64_t r = 0; r < rows; ++r) {
            const double* dy = self->grad.data() + r * d;
            const double is = (*inv_std)[static_cast<std::size_t>(r)];
            const double* hr = hat + r * d;
            if (dx_wanted) {
              double m1 = 0.0, m2 = 0.0;
              for (std::int64_t j = 0; j < d; ++j) {
                const double dh = g ? dy[j] * g[j] : dy[j];
                m1 += dh;
                m2 += dh * hr[j];
              }
              m1 /= static_cast<double>(d);
              m2 /= static_cast<double>(d);
              double* dx = dxp + r * d;
              for (std::int64_t j = 0; j < d; ++j) {
                const double dh = g ? dy[j] * g[j] : dy[j];
                dx[j] += is * (dh - m1 - hr[j] * m2);
              }
            }
            if (dg_wanted)
              for (std::int64_t j = 0; j < d; ++j) dgp[j] += dy[j] * hr[j];
            if (db_wanted)
              for (std::int64_t j = 0; j < d; ++j) dbp[j] += dy[j];
          }
        };
      });
}

}  // namespace detail

/// Layer normalization over the last axis (biased variance), with affine
/// gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  return detail::layer_norm_impl(x, &gain, &bias, eps);
}

/// Affine-free layer normalization.
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
  return detail::layer_norm_impl(x, nullptr, nullptr, eps);
}

/// 1-D convolution over the middle (time) axis with same padding.
/// x: (m, T, c_in), w: (k, c_in, c_out) with k odd, b: (c_out).
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require(x.rank() == 3 && w.rank() == 3 && b.rank() == 1,
                  "conv1d: expected x (m,T,Cin), w (k,Cin,Cout), b (Cout); got " +
                      format_shape(x.shape()) + ", " + format_shape(w.shape()) + ", " +
                      format_shape(b.shape()));
  const auto m = x.dim(0), T = x.dim(1), cin = x.dim(2);
  const auto k = w.dim(0), cout = w.dim(2);
  detail::require(w.dim(1) == cin, "conv1d: channel mismatch " + format_shape(x.shape()) + " vs " +
                                       format_shape(w.shape()));
  detail::require(k % 2 == 1, "conv1d: kernel size must be odd for same padding, got " +
                                  std::to_string(k));
  detail::require(b.dim(0) == cout, "conv1d: bias shape " + format_shape(b.shape()) +
                                        " does not match " + format_shape(w.shape()));
  const auto half = k / 2;
  // im2col patches: (m*T, k*cin) rows; weight is already (k*cin, cout) flat.
  auto patches = std::make_shared<DataBuf>(static_cast<std::size_t>(m * T * k * cin), 0.0);
  for (std::int64_t s = 0; s < m; ++s) {
    for (std::int64_t t = 0; t < T; ++t) {
      double* row = patches->data() + (s * T + t) * k * cin;
      for (std::int64_t dk = 0; dk < k; ++dk) {
        const std::int64_t tt = t + dk - half;
        if (tt < 0 || tt >= T) continue;
        const double* src = x.data().data() + (s * T + tt) * cin;
        std::memcpy(row + dk * cin, src, static_cast<std::size_t>(cin) * sizeof(double));
      }
    }
  }
  DataBuf out(static_cast<std::size_t>(m * T * cout));
  auto Y = detail::MatMap(out.data(), m * T, cout);
  Y.noalias() =
      detail::CMatMap(patches->data(), m * T, k * cin) * detail::cmap(w.data(), k * cin, cout);
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), cout);
  return detail::op_result(
      "conv1d", {m, T, cout}, std::move(out), {x, w, b},
      [x, w, b, patches, m, T, cin, cout, k, half](detail::TensorNode* self) {
        return [x, w, b, patches, m, T, cin, cout, k, half, self]() {
          auto dY = detail::CMatMap(self->grad.data(), m * T, cout);
          if (w.requires_grad()) {
            auto wn = w.node();
            wn->ensure_grad();
            detail::MatMap(wn->grad.data(), k * cin, cout).noalias() +=
                detail::CMatMap(patches->data(), m * T, k * cin).transpose() * dY;
          }
          if (b.requires_grad()) {
            auto bn = b.node();
            bn->ensure_grad();
            detail::add_column_sums(self->grad.data(), m * T, cout, bn->grad.data());
          }
          if (x.requires_grad()) {
            auto xn = x.node();
            xn->ensure_grad();
            // dPatches = dY·Wᵀ, then scatter back over the padded windows
            detail::EMat dP = dY * detail::cmap(w.data(), k * cin, cout).transpose();
            for (std::int64_t s = 0; s < m; ++s) {
              for (std::int64_t t = 0; t < T; ++t) {
                const double* prow = dP.data() + (s * T + t) * k * cin;
                for (std::int64_t dk = 0; dk < k; ++dk) {
                  const std::int64_t tt = t + dk - half;
                  if (tt < 0 || tt >= T) continue;
                  double* dst = xn->grad.data() + (s * T + tt) * cin;
                  const double* src = prow + dk * cin;
                  for (std::int64_t c = 0; c < cin; ++c) dst[c] += src[c];
                }
              }
            }
          }
        };
      });
}

/// Max-reduction removing the given axis; ties go to the first index.
inline Tensor max_over_axis(const Tensor& x, std::int64_t axis) {
  detail::require(axis >= 0 && axis < x.rank(), "max_over_axis: axis " + std::to_string(axis) +
                                                    " out of range for " + format_shape(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const auto span = x.dim(axis);
  detail::require(span >= 1, "max_over_axis: empty axis");
  Shape out_shape;
  for (std::int64_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  DataBuf out(static_cast<std::size_t>(outer * inner));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(outer * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      double best = x.data()[static_cast<std::size_t>((o * span) * inner + i)];
      std::int64_t bt = 0;
      for (std::int64_t t = 1; t < span; ++t) {
        double v = x.data()[static_cast<std::size_t>((o * span + t) * inner + i)];
        if (v > best) {
          best = v;
          bt = t;
        }
      }
      out[static_cast<std::size_t>(o * inner + i)] = best;
      (*argmax)[static_cast<std::size_t>(o * inner + i)] = bt;
    }
  }
  return detail::op_result(
      "max_over_axis", std::move(out_shape), std::move(out), {x},
      [x, argmax, outer, inner, span](detail::TensorNode* self) {
        return [x, argmax, outer, inner, span, self]() {
          if (!x.requires_grad()) return;
          auto xn = x.node();
          xn->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
              const auto flat = static_cast<std::size_t>(o * inner + i);
              xn->grad[static_cast<std::size_t>((o * span + (*argmax)[flat]) * inner + i)] +=
                  self->grad[flat];
            }
        };
      });
}

/// Inverted dropout; identity (same node) when train is false or rate is 0.
inline Tensor dropout(const Tensor& x, double rate, bool train, Rng* rng) {
  detail::require(rate >= 0.0 && rate < 1.0,
                  "dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!train || rate == 0.0) return x;
  if (rng == nullptr) throw ShapeError("dropout: rng required in training mode");
  const double keep_scale = 1.0 / (1.0 - rate);
  const auto n = static_cast<std::size_t>(x.size());
  auto mask = std::make_shared<DataBuf>(n);
  DataBuf out(n);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double m = rng->uniform() >= rate ? keep_scale : 0.0;
    (*mask)[i] = m;
    out[i] = px[i] * m;
  }
  return detail::op_result("dropout", x.shape(), std::move(out), {x},
                           [x, mask](detail::TensorNode* self) {
                             return [x, mask, self]() {
                               if (!x.requires_grad()) return;
                               auto xn = x.node();
                               xn->ensure_grad();
                               for (std::size_t i = 0; i < self->grad.size(); ++i)
                                 xn->grad[i] += self->grad[i] * (*mask)[i];
                             };
                           });
}

/// Mean cross-entropy of logits (m, K) against integer labels in [0, K).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  detail::require(logits.rank() == 2,
                  "cross_entropy: logits must be 2-D, got " + format_shape(logits.shape()));
  const auto m = logits.dim(0), K = logits.dim(1);
  detail::require(static_cast<std::int64_t>(labels.size()) == m,
                  "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(m) + " rows");
  for (auto y : labels)
    detail::require(y >= 0 && y < K, "cross_entropy: label " + std::to_string(y) +
                                         " outside [0, " + std::to_string(K) + ")");
  auto probs = std::make_shared<DataBuf>(static_cast<std::size_t>(m * K));
  double total = 0.0;
  for (std::int64_t r = 0; r < m; ++r) {
    const double* xr = logits.data().data() + r * K;
    double* pr = probs->data() + r * K;
    double mx = xr[0];
    for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < K; ++j) {
      pr[j] = std::exp(xr[j] - mx);
      s += pr[j];
    }
    for (std::int64_t j = 0; j < K; ++j) pr[j] /= s;
    total += mx + std::log(s) - xr[labels[static_cast<std::size_t>(r)]];
  }
  total /= static_cast<double>(m);
  auto labels_copy = std::make_shared<std::vector<std::int64_t>>(labels);
  DataBuf out(1);
  out[0] = total;
  return detail::op_result(
      "cross_entropy", {}, std::move(out), {logits},
      [logits, probs, labels_copy, m, K](detail::TensorNode* self) {
        return [logits, probs, labels_copy, m, K, self]() {
          if (!logits.requires_grad()) return;
          auto ln = logits.node();
          ln->ensure_grad();
          const double g = self->grad[0] / static_cast<double>(m);
          for (std::int64_t r = 0; r < m; ++r) {
            double* dst = ln->grad.data() + r * K;
            const double* pr = probs->data() + r * K;
            for (std::int64_t j = 0; j < K; ++j) dst[j] += g * pr[j];
            dst[(*labels_copy)[static_cast<std::size_t>(r)]] -= g;
          }
        };
      });
}

/// Sum of all entries, as a scalar.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (auto v : x.data()) s += v;
  DataBuf out(1);
  out[0] = s;
  return detail::op_result("sum", {}, std::move(out), {x}, [x](detail::TensorNode* self) {
    return [x, self]() {
      if (!x.requires_grad()) return;
      auto xn = x.node();
      xn->ensure_grad();
      const double g = self->grad[0];
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require(shape_numel(shape) == x.size(), "reshape: cannot view " + format_shape(x.shape()) +
                                                      " as " + format_shape(shape));
  DataBuf out(static_cast<std::size_t>(x.size()));
  std::memcpy(out.data(), x.data().data(), static_cast<std::size_t>(x.size()) * sizeof(double));
  return detail::op_result("reshape", std::move(shape), std::move(out), {x},
                           [x](detail::TensorNode* self) {
                             return [x, self]() {
                               if (x.requires_grad())
                                 detail::accumulate(x.node().get(), {self->grad.data(), self->grad.size()});
                             };
                           });
}

/// Axis permutation (generalized transpose).
inline Tensor permute(const Tensor& x, const std::vector<std::int64_t>& perm) {
  detail::require(static_cast<std::int64_t>(perm.size()) == x.rank(),
                  "permute: perm rank mismatch for " + format_shape(x.shape()));
  std::vector<bool> used(perm.size(), false);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    detail::require(perm[i] >= 0 && perm[i] < x.rank() && !used[static_cast<std::size_t>(perm[i])],
                    "permute: invalid permutation");
    used[static_cast<std::size_t>(perm[i])] = true;
    out_shape[i] = x.dim(perm[i]);
  }
  const auto rank = x.rank();
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(rank), 1);
  for (std::int64_t i = rank - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * x.dim(i + 1);
  auto gather_strides = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(rank));
  for (std::int64_t i = 0; i < rank; ++i)
    (*gather_strides)[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  auto out_shape_copy = std::make_shared<Shape>(out_shape);
  DataBuf out(static_cast<std::size_t>(x.size()));
  {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < x.size(); ++o) {
      out[static_cast<std::size_t>(o)] = x.data()[static_cast<std::size_t>(src)];
      for (std::int64_t a = rank - 1; a >= 0; --a) {
        auto ai = static_cast<std::size_t>(a);
        if (++idx[ai] < (*out_shape_copy)[ai]) {
          src += (*gather_strides)[ai];
          break;
        }
        src -= (*gather_strides)[ai] * ((*out_shape_copy)[ai] - 1);
        idx[ai] = 0;
      }
    }
  }
  return detail::op_result(
      "permute", std::move(out_shape), std::move(out), {x},
      [x, gather_strides, out_shape_copy, rank](detail::TensorNode* self) {
        return [x, gather_strides, out_shape_copy, rank, self]() {
          if (!x.requires_grad()) return;
          auto xn = x.node();
          xn->ensure_grad();
          std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
          std::int64_t src = 0;
          const auto n = static_cast<std::int64_t>(self->grad.size());
          for (std::int64_t o = 0; o < n; ++o) {
            xn->grad[static_cast<std::size_t>(src)] += self->grad[static_cast<std::size_t>(o)];
            for (std::int64_t a = rank - 1; a >= 0; --a) {
              auto ai = static_cast<std::size_t>(a);
              if (++idx[ai] < (*out_shape_copy)[ai]) {
                src += (*gather_strides)[ai];
                break;
              }
              src -= (*gather_strides)[ai] * ((*out_shape_copy)[ai] - 1);
              idx[ai] = 0;
            }
          }
        };
      });
}

/// (m, T, H·dh) -> (m, H, T, dh): the reshape+transpose pair attention uses
/// to split heads, fused into one chunked copy.
inline Tensor split_heads(const Tensor& x, std::int64_t heads) {
  detail::require(x.rank() == 3 && x.dim(2) % heads == 0,
                  "split_heads: cannot split " + format_shape(x.shape()) + " into " +
                      std::to_string(heads) + " heads");
  const auto m = x.dim(0), T = x.dim(1), D = x.dim(2);
  const auto dh = D / heads;
  DataBuf out(static_cast<std::size_t>(x.size()));
  const double* px = x.data().data();
  for (std::int64_t s = 0; s < m; ++s)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < T; ++t)
        std::memcpy(out.data() + (((s * heads + h) * T) + t) * dh, px + (s * T + t) * D + h * dh,
                    static_cast<std::size_t>(dh) * sizeof(double));
  return detail::op_result(
      "split_heads", {m, heads, T, dh}, std::move(out), {x},
      [x, m, T, heads, dh, D](detail::TensorNode* self) {
        return [x, m, T, heads, dh, D, self]() {
          if (!x.requires_grad()) return;
          auto xn = x.node();
          xn->ensure_grad();
          for (std::int64_t s = 0; s < m; ++s)
            for (std::int64_t h = 0; h < heads; ++h)
              for (std::int64_t t = 0; t < T; ++t) {
                const double* src = self->grad.data() + (((s * heads + h) * T) + t) * dh;
                double* dst = xn->grad.data() + (s * T + t) * D + h * dh;
                for (std::int64_t j = 0; j < dh; ++j) dst[j] += src[j];
              }
        };
      });
}

/// (m, H, T, dh) -> (m, T, H·dh): inverse of split_heads.
inline Tensor merge_heads(const Tensor& x) {
  detail::require(x.rank() == 4, "merge_heads: expected (m, H, T, dh), got " + format_shape(x.shape()));
  const auto m = x.dim(0), heads = x.dim(1), T = x.dim(2), dh = x.dim(3);
  const auto D = heads * dh;
  DataBuf out(static_cast<std::size_t>(x.size()));
  const double* px = x.data().data();
  for (std::int64_t s = 0; s < m; ++s)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < T; ++t)
        std::memcpy(out.data() + (s * T + t) * D + h * dh, px + (((s * heads + h) * T) + t) * dh,
                    static_cast<std::size_t>(dh) * sizeof(double));
  return detail::op_result(
      "merge_heads", {m, T, D}, std::move(out), {x},
      [x, m, T, heads, dh, D](detail::TensorNode* self) {
        return [x, m, T, heads, dh, D, self]() {
          if (!x.requires_grad()) return;
          auto xn = x.node();
          xn->ensure_grad();
          for (std::int64_t s = 0; s < m; ++s)
            for (std::int64_t h = 0; h < heads; ++h)
              for (std::int64_t t = 0; t < T; ++t) {
                const double* src = self->grad.data() + (s * T + t) * D + h * dh;
                double* dst = xn->grad.data() + (((s * heads + h) * T) + t) * dh;
                for (std::int64_t j = 0; j < dh; ++j) dst[j] += src[j];
              }
        };
      });
}

}  // namespace arcdog
