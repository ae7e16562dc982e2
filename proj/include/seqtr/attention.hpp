// SPDX-License-Identifier: Apache-2.0
//
// Multi-head self-attention over the re-ID query slots and deformable
// cross-attention from those slots into one or more feature maps.

#ifndef SEQTR_ATTENTION_HPP
#define SEQTR_ATTENTION_HPP

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "seqtr/autograd.hpp"

namespace seqtr {

/// Head projections are stored stacked: column block i (width d/H) of w_q
/// is head i's query projection, likewise for w_k, w_v. w_o is (H·d_k)×d.
struct MultiHeadAttnParams {
  std::size_t heads = 1;
  Tensor w_q, w_k, w_v, w_o;

  std::size_t width() const { return w_q.rows(); }
  std::size_t head_dim() const { return width() / heads; }

  void validate() const {
    const std::size_t d = w_q.rows();
    if (heads == 0 || d % heads != 0)
      throw DimensionError("multi-head attention: " + std::to_string(heads) +
                           " heads do not divide width " + std::to_string(d));
    for (const Tensor* w : {&w_q, &w_k, &w_v, &w_o})
      if (w->shape() != Shape{d, d})
        throw DimensionError("multi-head attention: projection " + shape_str(w->shape()) +
                             " inconsistent with width " + std::to_string(d));
  }

  template <class Rng>
  static MultiHeadAttnParams init(std::size_t d, std::size_t heads, Rng& rng) {
    const double sd = std::sqrt(1.0 / static_cast<double>(d));
    MultiHeadAttnParams p{heads, Tensor::randn({d, d}, rng, sd), Tensor::randn({d, d}, rng, sd),
                          Tensor::randn({d, d}, rng, sd), Tensor::randn({d, d}, rng, sd)};
    p.validate();
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "w_q", w_q);
    f(prefix + "w_k", w_k);
    f(prefix + "w_v", w_v);
    f(prefix + "w_o", w_o);
  }
};

/// Deformable attention weights for `levels` feature maps with `points`
/// samples per head per level. Query width Dq, feature channels C.
///   offset_w [Dq × 2·H·L·S], offset_b [2·H·L·S]   (sampling offsets, pixel units)
///   weight_w [Dq × H·L·S],   weight_b [H·L·S]     (logits of A)
///   value_w  [C × Dq]   column block h is head h's value projection
///   output_w [Dq × Dq]  row block h is head h's output projection
/// Sample index within a query is ((h·L + l)·S + s); offsets store (x, y) pairs.
struct DeformAttnParams {
  std::size_t heads = 1;
  std::size_t points = 1;
  std::size_t levels = 1;
  Tensor offset_w, offset_b, weight_w, weight_b, value_w, output_w;

  std::size_t width() const { return offset_w.rows(); }
  std::size_t channels() const { return value_w.rows(); }
  std::size_t samples_per_head() const { return levels * points; }

  void validate() const {
    if (points == 0) throw DimensionError("deformable attention needs at least one sampling point");
    if (heads == 0 || levels == 0) throw DimensionError("deformable attention: heads/levels must be positive");
    const std::size_t dq = offset_w.rows();
    const std::size_t hls = heads * levels * points;
    if (dq % heads != 0)
      throw DimensionError("deformable attention: heads do not divide width " + std::to_string(dq));
    if (offset_w.shape() != Shape{dq, 2 * hls} || offset_b.size() != 2 * hls)
      throw DimensionError("deformable attention: offset head must produce 2·H·L·S = " +
                           std::to_string(2 * hls) + " values");
    if (weight_w.shape() != Shape{dq, hls} || weight_b.size() != hls)
      throw DimensionError("deformable attention: weight head must produce H·L·S = " +
                           std::to_string(hls) + " values");
    if (value_w.ndim() != 2 || value_w.cols() != dq)
      throw DimensionError("deformable attention: value projection " + shape_str(value_w.shape()));
    if (output_w.shape() != Shape{dq, dq})
      throw DimensionError("deformable attention: output projection " + shape_str(output_w.shape()));
  }

  /// Zero offset/weight heads with the offset bias on a unit-radius ring, so
  /// attention starts uniform over S evenly spaced points around the reference point.
  template <class Rng>
  static DeformAttnParams init(std::size_t width, std::size_t channels, std::size_t heads,
                               std::size_t points, std::size_t levels, Rng& rng) {
    const std::size_t hls = heads * levels * points;
    DeformAttnParams p{heads,
                       points,
                       levels,
                       Tensor({width, 2 * hls}),
                       Tensor({2 * hls}),
                       Tensor({width, hls}),
                       Tensor({hls}),
                       Tensor::randn({channels, width}, rng, std::sqrt(2.0 / double(channels + width))),
                       Tensor::randn({width, width}, rng, std::sqrt(1.0 / double(width)))};
    for (std::size_t k = 0; k < heads * levels; ++k)
      for (std::size_t s = 0; s < points; ++s) {
        const double angle = 2.0 * std::numbers::pi * double(s) / double(points);
        p.offset_b[2 * (k * points + s)] = std::cos(angle);
        p.offset_b[2 * (k * points + s) + 1] = std::sin(angle);
      }
    p.validate();
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "offset_w", offset_w);
    f(prefix + "offset_b", offset_b);
    f(prefix + "weight_w", weight_w);
    f(prefix + "weight_b", weight_b);
    f(prefix + "value_w", value_w);
    f(prefix + "output_w", output_w);
  }
};

/// Normalized location in [0,1]², clamped on construction.
struct ReferencePoint {
  double x = 0.5, y = 0.5;

  ReferencePoint() = default;
  ReferencePoint(double x_, double y_) : x(std::clamp(x_, 0.0, 1.0)), y(std::clamp(y_, 0.0, 1.0)) {}
};

inline Tensor reference_tensor(const std::vector<ReferencePoint>& refs) {
  if (refs.empty()) throw DimensionError("no reference points");
  Tensor t({refs.size(), 2});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    t(i, 0) = refs[i].x;
    t(i, 1) = refs[i].y;
  }
  return t;
}

// ---------------------------------------------------------------------------

/// softmax(q_h k_hᵀ / √d_k) v_h per head, concatenated and projected by w_o.
inline Var multi_head_self_attention(Var y, const MultiHeadAttnParams& p) {
  p.validate();
  if (y.value().ndim() != 2 || y.cols() != p.width())
    throw DimensionError("self-attention: input " + shape_str(y.shape()) + " vs width " +
                         std::to_string(p.width()));
  Tape& t = *y.tape;
  const std::size_t dk = p.head_dim();
  Var q = ad::matmul(y, t.param(p.w_q));
  Var k = ad::matmul(y, t.param(p.w_k));
  Var v = ad::matmul(y, t.param(p.w_v));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    Var qh = ad::slice_cols(q, h * dk, dk);
    Var kh = ad::slice_cols(k, h * dk, dk);
    Var vh = ad::slice_cols(v, h * dk, dk);
    Var attn = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
    heads.push_back(ad::matmul(attn, vh));
  }
  Var cat = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  return ad::matmul(cat, t.param(p.w_o));
}

/// layernorm(Y + dropout(sublayer)).
template <class Rng = std::mt19937_64>
inline Var residual_layernorm(Var y, Var sublayer_out, Var gamma, Var beta, double dropout_rate = 0.0,
                              Rng* rng = nullptr) {
  y.value().require_same_shape(sublayer_out.value(), "residual_layernorm");
  Var dropped = sublayer_out;
  if (dropout_rate > 0.0) {
    if (!rng) throw ConfigError("dropout requires a seeded generator");
    dropped = ad::dropout(sublayer_out, dropout_rate, *rng);
  }
  return ad::layer_norm(ad::add(y, dropped), gamma, beta);
}

struct DeformAttnOptions {
  /// Replace the learned sample weights by a plain average over the samples of a head.
  bool average_samples = false;
};

/// Optional view into intermediate values, for inspection and tests.
struct DeformAttnTrace {
  Tensor locations;  // [N·H·L·S × 2] pixel coordinates
  Tensor weights;    // [N·H × L·S]
};

/// Σ_h out_h · [Σ_{l,s} weight_hls · value_h · map_l(ref + offset_hls)] for every query row.
/// refs are normalized [N×2]; the base location on level l is
/// (x·(W_l−1), y·(H_l−1)) and offsets are in that level's pixels. The weights
/// are a softmax over all L·S samples of a head.
inline Var deform_attn(Var z, Var refs, const std::vector<Var>& maps, const DeformAttnParams& p,
                       const DeformAttnOptions& opt = {}, DeformAttnTrace* trace = nullptr) {
  p.validate();
  Tape& t = *z.tape;
  const std::size_t n = z.rows();
  const std::size_t dq = p.width();
  const std::size_t heads = p.heads, levels = p.levels, pts = p.points;
  const std::size_t group = levels * pts;
  const std::size_t p_count = n * heads * group;
  if (z.value().ndim() != 2 || z.cols() != dq)
    throw DimensionError("deformable attention: queries " + shape_str(z.shape()) + " vs width " +
                         std::to_string(dq));
  if (maps.size() != levels)
    throw DimensionError("deformable attention: expected " + std::to_string(levels) +
                         " feature levels, got " + std::to_string(maps.size()));
  for (const auto& m : maps) {
    if (m.value().ndim() != 3 || m.value().dim(0) != p.channels())
      throw DimensionError("deformable attention: feature map " + shape_str(m.shape()) +
                           " does not have " + std::to_string(p.channels()) + " channels");
  }
  if (refs.shape() != Shape{n, 2})
    throw DimensionError("deformable attention: reference points " + shape_str(refs.shape()) +
                         " for " + std::to_string(n) + " queries");

  Tensor expand({p_count, n});
  Tensor extent({p_count, 2});
  std::vector<std::size_t> level_of(p_count);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < levels; ++l)
        for (std::size_t s = 0; s < pts; ++s) {
          const std::size_t idx = ((q * heads + h) * levels + l) * pts + s;
          expand(idx, q) = 1.0;
          extent(idx, 0) = static_cast<double>(maps[l].value().dim(2)) - 1.0;
          extent(idx, 1) = static_cast<double>(maps[l].value().dim(1)) - 1.0;
          level_of[idx] = l;
        }
  Var base = ad::mul(ad::matmul(t.constant(std::move(expand)), refs), t.constant(std::move(extent)));
  Var offsets = ad::add_row_bias(ad::matmul(z, t.param(p.offset_w)), t.param(p.offset_b));
  Var loc = ad::add(base, ad::reshape(offsets, {p_count, 2}));

  Var weights;
  if (opt.average_samples) {
    weights = t.constant(Tensor::filled({n * heads, group}, 1.0 / static_cast<double>(group)));
  } else {
    Var logits = ad::add_row_bias(ad::matmul(z, t.param(p.weight_w)), t.param(p.weight_b));
    weights = ad::softmax_rows(ad::reshape(logits, {n * heads, group}));
  }
  if (trace) {
    trace->locations = loc.value();
    trace->weights = weights.value();
  }

  Var sampled = ad::sample_points(maps, loc, std::move(level_of));       // [P × C]
  Var pooled = ad::group_weighted_sum(sampled, weights);                 // [N·H × C]
  Var projected = ad::matmul(pooled, t.param(p.value_w));                // [N·H × Dq]
  Var per_head = ad::select_head_blocks(projected, heads);               // [N × Dq]
  return ad::matmul(per_head, t.param(p.output_w));
}

/// Three-level form used by the multi-scale schemes.
inline Var multiscale_deform_attn(Var z, Var refs, const std::vector<Var>& pyramid,
                                  const DeformAttnParams& p, const DeformAttnOptions& opt = {},
                                  DeformAttnTrace* trace = nullptr) {
  if (pyramid.size() != 3 || p.levels != 3)
    throw DimensionError("multi-scale deformable attention needs three levels");
  return deform_attn(z, refs, pyramid, p, opt, trace);
}

// Tensor-level conveniences (no gradient recording).

inline Tensor multi_head_self_attention(const Tensor& y, const MultiHeadAttnParams& p) {
  Tape t;
  t.set_grad_enabled(false);
  return multi_head_self_attention(t.constant(y), p).value();
}

inline Tensor deform_attn(const Tensor& z, const std::vector<ReferencePoint>& refs,
                          const std::vector<Tensor>& maps, const DeformAttnParams& p,
                          const DeformAttnOptions& opt = {}, DeformAttnTrace* trace = nullptr) {
  Tape t;
  t.set_grad_enabled(false);
  std::vector<Var> mv;
  for (const auto& m : maps) mv.push_back(t.constant(m));
  return deform_attn(t.constant(z), t.constant(reference_tensor(refs)), mv, p, opt, trace).value();
}

}  // namespace seqtr

#endif  // SEQTR_ATTENTION_HPP
