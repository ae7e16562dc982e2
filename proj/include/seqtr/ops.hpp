// SPDX-License-Identifier: Apache-2.0
//
// Forward kernels on plain tensors. The autograd wrappers in autograd.hpp
// call these and add the matching vector-Jacobian products.

#ifndef SEQTR_OPS_HPP
#define SEQTR_OPS_HPP

#include <cmath>
#include <limits>

#include "seqtr/tensor.hpp"

namespace seqtr {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a(i, t);
      if (av == 0.0) continue;
      const double* brow = &b.data()[t * n];
      double* crow = &c.data()[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  a.require_ndim(2);
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  x.require_ndim(2);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto out = y.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : in) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) z += (out[j] = std::exp(in[j] - mx));
    for (auto& v : out) v /= z;
  }
  return y;
}

/// Normalizes each last-dimension slice, then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: gamma/beta length must equal last dim " +
                         std::to_string(d));
  Tensor y(x.shape());
  const std::size_t slices = x.size() / d;
  for (std::size_t r = 0; r < slices; ++r) {
    const double* in = &x.data()[r * d];
    double* out = &y.data()[r * d];
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[j] = (in[j] - mean) * inv * gamma[j] + beta[j];
  }
  return y;
}

/// Corner taps of a bilinear lookup at pixel coordinates (x, y). Corners that
/// fall outside the map are flagged invalid (zero padding). On integer
/// coordinates the cell is the one whose lower-left corner is the point.
struct BilinearTaps {
  long x0, y0;
  double fx, fy;

  static BilinearTaps at(double x, double y) {
    const double fx0 = std::floor(x), fy0 = std::floor(y);
    return {static_cast<long>(fx0), static_cast<long>(fy0), x - fx0, y - fy0};
  }

  // corner k: 0=(x0,y0) 1=(x0+1,y0) 2=(x0,y0+1) 3=(x0+1,y0+1)
  long cx(int k) const { return x0 + (k & 1); }
  long cy(int k) const { return y0 + (k >> 1); }
  double weight(int k) const {
    const double wx = (k & 1) ? fx : 1.0 - fx;
    const double wy = (k >> 1) ? fy : 1.0 - fy;
    return wx * wy;
  }
  double dweight_dx(int k) const {
    const double wy = (k >> 1) ? fy : 1.0 - fy;
    return (k & 1) ? wy : -wy;
  }
  double dweight_dy(int k) const {
    const double wx = (k & 1) ? fx : 1.0 - fx;
    return (k >> 1) ? wx : -wx;
  }
  bool valid(int k, std::size_t height, std::size_t width) const {
    const long x = cx(k), y = cy(k);
    return x >= 0 && y >= 0 && x < static_cast<long>(width) && y < static_cast<long>(height);
  }
};

/// Bilinear lookup of a C×H×W map at pixel location (x, y), zero padded.
inline Tensor bilinear_sample(const Tensor& map, double x, double y) {
  map.require_ndim(3);
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
  Tensor out({c});
  if (!std::isfinite(x) || !std::isfinite(y)) return out;
  const auto taps = BilinearTaps::at(x, y);
  for (int k = 0; k < 4; ++k) {
    if (!taps.valid(k, h, w)) continue;
    const double wk = taps.weight(k);
    if (wk == 0.0) continue;
    const auto px = static_cast<std::size_t>(taps.cx(k));
    const auto py = static_cast<std::size_t>(taps.cy(k));
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] += wk * map(ch, py, px);
  }
  return out;
}

inline constexpr double kNormFloor = 1e-12;

/// v/‖v‖, or zeros when ‖v‖ ≤ 1e-12.
inline Tensor l2_normalize(const Tensor& v) {
  double n2 = 0.0;
  for (double x : v.data()) n2 += x * x;
  const double n = std::sqrt(n2);
  Tensor out(v.shape());
  if (n <= kNormFloor) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

inline Tensor l2_normalize_rows(const Tensor& x) {
  x.require_ndim(2);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double n2 = 0.0;
    for (double v : x.row(i)) n2 += v * v;
    const double n = std::sqrt(n2);
    if (n <= kNormFloor) continue;
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) / n;
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; 0 when either side is (near) zero.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na <= kNormFloor || nb <= kNormFloor) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace seqtr

#endif  // SEQTR_OPS_HPP
