// SPDX-License-Identifier: Apache-2.0
//
// Re-ID transformer: M layers, each an (optional) self-attention block over
// the query slots followed by K deformable cross-attention blocks, arranged
// over a three-level feature pyramid by one of four schemes.

#ifndef SEQTR_REID_TRANSFORMER_HPP
#define SEQTR_REID_TRANSFORMER_HPP

#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "seqtr/attention.hpp"

namespace seqtr {

enum class Scheme { multi_scale_d, multi_scale_3d, parallel, shared };

inline std::string_view scheme_name(Scheme s) {
  switch (s) {
    case Scheme::multi_scale_d: return "multi_scale_d";
    case Scheme::multi_scale_3d: return "multi_scale_3d";
    case Scheme::parallel: return "parallel";
    case Scheme::shared: return "shared";
  }
  return "?";
}

inline Scheme parse_scheme(std::string_view s) {
  for (Scheme v : {Scheme::multi_scale_d, Scheme::multi_scale_3d, Scheme::parallel, Scheme::shared})
    if (scheme_name(v) == s) return v;
  throw ConfigError("unknown scheme '" + std::string(s) + "'");
}

inline constexpr std::size_t kPyramidLevels = 3;

struct ReIDConfig {
  std::size_t layers = 3;            // M
  std::size_t cross_layers = 3;      // K
  std::size_t heads = 4;             // H
  std::size_t points = 4;            // S
  std::size_t width = 32;            // d
  std::size_t queries = 8;           // N
  Scheme scheme = Scheme::shared;
  bool skip_first_self_attention = true;
  bool self_attention = true;        // false drops every self-attention block
  double dropout = 0.0;
  bool average_samples = false;
  bool reference_grad = false;       // let gradients reach the reference points

  void validate() const {
    if (layers < 1) throw ConfigError("M must be >= 1");
    if (cross_layers < 1) throw ConfigError("K must be >= 1");
    if (heads < 1 || points < 1 || width < 1 || queries < 1)
      throw ConfigError("H, S, d and N must be >= 1");
    if (width % heads != 0) throw ConfigError("H must divide d");
    if (query_width() % heads != 0) throw ConfigError("H must divide the query width");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  }

  /// Width of the re-ID queries and of every layer's activations.
  std::size_t query_width() const { return scheme == Scheme::multi_scale_3d ? 3 * width : width; }

  /// Number of independent layer stacks (3 for parallel).
  std::size_t stacks() const { return scheme == Scheme::parallel ? kPyramidLevels : 1; }

  /// Feature levels each deformable attention module samples from.
  std::size_t attn_levels() const {
    return scheme == Scheme::multi_scale_d || scheme == Scheme::multi_scale_3d ? kPyramidLevels : 1;
  }

  /// Width of the concatenated matching embedding.
  std::size_t match_width() const { return scheme == Scheme::multi_scale_d ? width : 3 * width; }

  bool has_self_attention(std::size_t layer) const {
    return self_attention && !(layer == 0 && skip_first_self_attention);
  }
};

struct SelfAttnBlock {
  MultiHeadAttnParams attn;
  Tensor ln_gamma, ln_beta;
};

struct CrossAttnBlock {
  DeformAttnParams attn;
  Tensor ln_gamma, ln_beta;
};

struct TransformerLayerParams {
  std::optional<SelfAttnBlock> self_attn;
  std::vector<CrossAttnBlock> cross;
};

struct TransformerStack {
  std::vector<TransformerLayerParams> layers;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t m = 0; m < layers.size(); ++m) {
      auto& layer = layers[m];
      const std::string lp = prefix + "layer" + std::to_string(m) + ".";
      if (layer.self_attn) {
        layer.self_attn->attn.visit(lp + "self.", f);
        f(lp + "self.ln_gamma", layer.self_attn->ln_gamma);
        f(lp + "self.ln_beta", layer.self_attn->ln_beta);
      }
      for (std::size_t k = 0; k < layer.cross.size(); ++k) {
        const std::string cp = lp + "cross" + std::to_string(k) + ".";
        layer.cross[k].attn.visit(cp, f);
        f(cp + "ln_gamma", layer.cross[k].ln_gamma);
        f(cp + "ln_beta", layer.cross[k].ln_beta);
      }
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    const_cast<TransformerStack*>(this)->visit("", [&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
  }
};

/// Learnable re-ID queries plus one (or three, for the parallel scheme) stacks.
struct ReIDParams {
  Tensor queries;
  std::vector<TransformerStack> stacks;

  template <class F>
  void visit(F&& f) {
    f(std::string("queries"), queries);
    for (std::size_t i = 0; i < stacks.size(); ++i) stacks[i].visit("stack" + std::to_string(i) + ".", f);
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }

  /// Parameters of the layer stacks only (queries excluded).
  std::size_t transformer_parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : stacks) n += s.parameter_count();
    return n;
  }

  std::size_t parameter_count() const { return queries.size() + transformer_parameter_count(); }
};

inline ReIDParams init_reid_params(const ReIDConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t qw = cfg.query_width();
  ReIDParams p;
  p.queries = Tensor::randn({cfg.queries, qw}, rng, 0.02);
  for (std::size_t st = 0; st < cfg.stacks(); ++st) {
    TransformerStack stack;
    for (std::size_t m = 0; m < cfg.layers; ++m) {
      TransformerLayerParams layer;
      if (cfg.has_self_attention(m))
        layer.self_attn = SelfAttnBlock{MultiHeadAttnParams::init(qw, cfg.heads, rng),
                                        Tensor::filled({qw}, 1.0), Tensor({qw})};
      for (std::size_t k = 0; k < cfg.cross_layers; ++k)
        layer.cross.push_back(CrossAttnBlock{
            DeformAttnParams::init(qw, cfg.width, cfg.heads, cfg.points, cfg.attn_levels(), rng),
            Tensor::filled({qw}, 1.0), Tensor({qw})});
      stack.layers.push_back(std::move(layer));
    }
    p.stacks.push_back(std::move(stack));
  }
  return p;
}

/// Checks that a parameter set has the structure `cfg` describes.
inline void check_params(const ReIDParams& p, const ReIDConfig& cfg) {
  cfg.validate();
  const std::size_t qw = cfg.query_width();
  if (p.queries.shape() != Shape{cfg.queries, qw})
    throw DimensionError("re-ID queries " + shape_str(p.queries.shape()) + " do not match N×" +
                         std::to_string(qw));
  if (p.stacks.size() != cfg.stacks())
    throw DimensionError("scheme " + std::string(scheme_name(cfg.scheme)) + " expects " +
                         std::to_string(cfg.stacks()) + " transformer stacks");
  for (const auto& s : p.stacks) {
    if (s.layers.size() != cfg.layers) throw DimensionError("layer count differs from M");
    for (std::size_t m = 0; m < s.layers.size(); ++m) {
      const auto& layer = s.layers[m];
      if (layer.self_attn.has_value() != cfg.has_self_attention(m))
        throw DimensionError("self-attention layout differs from config at layer " + std::to_string(m));
      if (layer.cross.size() != cfg.cross_layers) throw DimensionError("cross layer count differs from K");
      for (const auto& c : layer.cross) {
        c.attn.validate();
        if (c.attn.width() != qw || c.attn.levels != cfg.attn_levels() || c.attn.heads != cfg.heads ||
            c.attn.points != cfg.points || c.attn.channels() != cfg.width)
          throw DimensionError("cross-attention parameters inconsistent with config");
      }
    }
  }
}

struct ForwardContext {
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  DeformAttnOptions attn{};
};

/// One re-ID transformer layer.
inline Var reid_layer_forward(Var y, Var refs, const std::vector<Var>& maps,
                              const TransformerLayerParams& layer, const ForwardContext& ctx = {}) {
  Tape& t = *y.tape;
  if (layer.self_attn) {
    const auto& sa = *layer.self_attn;
    y = residual_layernorm(y, multi_head_self_attention(y, sa.attn), t.param(sa.ln_gamma),
                           t.param(sa.ln_beta), ctx.dropout, ctx.rng);
  }
  for (const auto& c : layer.cross)
    y = residual_layernorm(y, deform_attn(y, refs, maps, c.attn, ctx.attn), t.param(c.ln_gamma),
                           t.param(c.ln_beta), ctx.dropout, ctx.rng);
  return y;
}

inline Var run_stack(Var queries, Var refs, const std::vector<Var>& maps, const TransformerStack& stack,
                     const ForwardContext& ctx) {
  Var y = queries;
  for (const auto& layer : stack.layers) y = reid_layer_forward(y, refs, maps, layer, ctx);
  return y;
}

/// Per-scale embeddings: three [N×d] for shared/parallel, one [N×d] for
/// multi_scale_d, one [N×3d] for multi_scale_3d.
inline std::vector<Var> reid_forward(const std::vector<Var>& pyramid, Var refs, const ReIDParams& p,
                                     const ReIDConfig& cfg, std::mt19937_64* rng = nullptr) {
  check_params(p, cfg);
  if (pyramid.size() != kPyramidLevels)
    throw DimensionError("re-ID transformer expects three pyramid levels, got " +
                         std::to_string(pyramid.size()));
  for (const auto& m : pyramid)
    if (m.value().ndim() != 3 || m.value().dim(0) != cfg.width)
      throw DimensionError("pyramid level " + shape_str(m.shape()) + " does not have d = " +
                           std::to_string(cfg.width) + " channels");
  if (refs.shape() != Shape{cfg.queries, 2})
    throw DimensionError("expected " + std::to_string(cfg.queries) + " reference points, got " +
                         shape_str(refs.shape()));
  Tape& t = *refs.tape;
  const ForwardContext ctx{cfg.dropout, rng, DeformAttnOptions{cfg.average_samples}};
  Var q = t.param(p.queries);
  std::vector<Var> out;
  switch (cfg.scheme) {
    case Scheme::shared:
      for (const auto& level : pyramid) out.push_back(run_stack(q, refs, {level}, p.stacks[0], ctx));
      break;
    case Scheme::parallel:
      for (std::size_t l = 0; l < kPyramidLevels; ++l)
        out.push_back(run_stack(q, refs, {pyramid[l]}, p.stacks[l], ctx));
      break;
    case Scheme::multi_scale_d:
    case Scheme::multi_scale_3d:
      out.push_back(run_stack(q, refs, pyramid, p.stacks[0], ctx));
      break;
  }
  return out;
}

/// Forward without gradient recording on plain tensors.
inline std::vector<Tensor> reid_forward(const std::vector<Tensor>& pyramid,
                                        const std::vector<ReferencePoint>& refs, const ReIDParams& p,
                                        const ReIDConfig& cfg) {
  Tape t;
  t.set_grad_enabled(false);
  std::vector<Var> maps;
  for (const auto& m : pyramid) maps.push_back(t.constant(m));
  std::vector<Tensor> out;
  for (Var v : reid_forward(maps, t.constant(reference_tensor(refs)), p, cfg)) out.push_back(v.value());
  return out;
}

/// Row-wise concatenation of the per-scale embeddings, L2-normalized.
inline Tensor concat_inference_embeddings(const std::vector<Tensor>& per_scale) {
  if (per_scale.empty()) throw DimensionError("no embeddings to concatenate");
  const std::size_t n = per_scale.front().rows();
  std::size_t width = 0;
  for (const auto& e : per_scale) {
    if (e.rows() != n) throw DimensionError("per-scale embeddings disagree on row count");
    width += e.cols();
  }
  Tensor cat({n, width});
  std::size_t off = 0;
  for (const auto& e : per_scale) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < e.cols(); ++j) cat(i, off + j) = e(i, j);
    off += e.cols();
  }
  return l2_normalize_rows(cat);
}

}  // namespace seqtr

#endif  // SEQTR_REID_TRANSFORMER_HPP
