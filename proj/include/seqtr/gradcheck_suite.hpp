// SPDX-License-Identifier: Apache-2.0
//
// Named gradient-check blocks: tape primitives, the attention modules, the
// OIM loss and the full re-ID model on a small two-person scene.

#ifndef SEQTR_GRADCHECK_SUITE_HPP
#define SEQTR_GRADCHECK_SUITE_HPP

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "seqtr/config.hpp"
#include "seqtr/gradcheck.hpp"
#include "seqtr/training.hpp"

namespace seqtr {

struct GradcheckBlockResult {
  std::string name;
  bool primitive = false;
  double tolerance = 0.0;
  GradcheckResult result;
  bool passed() const { return result.max_rel_error < tolerance; }
};

struct GradcheckReport {
  std::vector<GradcheckBlockResult> blocks;
  bool passed() const {
    for (const auto& b : blocks)
      if (!b.passed()) return false;
    return true;
  }
  double max_error() const {
    double m = 0.0;
    for (const auto& b : blocks) m = std::max(m, b.result.max_rel_error);
    return m;
  }
};

namespace ad {

/// Identity forward; backward multiplies the incoming gradient by `factor`.
/// Only used to plant a wrong gradient for negative-control runs.
inline Var corrupt_gradient(Var x, double factor) {
  return x.tape->record(x.value(), {x}, [x, factor](Tape& t, const Tensor& g) {
    Tensor h = g;
    h *= factor;
    t.accumulate(x, h);
  });
}

}  // namespace ad

namespace detail {

/// Scalar probe: Σ w ⊙ x with fixed random w, so every output coordinate
/// contributes with a distinct weight.
inline Var probe(Var x, const Tensor& w) { return ad::sum(ad::mul(x, x.tape->constant(w))); }

struct Block {
  std::string name;
  bool primitive;
  std::vector<Tensor> owned;                        // tensors perturbed by the check
  std::function<Var(Tape&, std::vector<Var>&)> fn;  // builds the scalar from bound tensors
  std::vector<Tensor*> extra{};                     // externally owned params also perturbed
  std::vector<Tensor> fixed{};                      // bound as constants after `owned`
};

/// Unit row at cosine ≈ c/√(1+c²) to `anchor` (unit) and orthogonal to every
/// row of `span`. Keeps OIM logits at 1/τ scale away from saturation.
template <class Rng>
Tensor near_row(const Tensor& anchor, const std::vector<Tensor>& span, double c, Rng& rng) {
  std::vector<Tensor> basis;
  auto project_out = [&](Tensor& u) {
    for (const auto& b : basis) {
      const double d = dot(u.data(), b.data());
      for (std::size_t j = 0; j < u.size(); ++j) u[j] -= d * b[j];
    }
  };
  for (Tensor b : span) {
    project_out(b);
    if (norm(b.data()) > 1e-9) basis.push_back(l2_normalize(b));
  }
  Tensor a = l2_normalize(anchor);
  Tensor u = Tensor::randn(anchor.shape(), rng);
  project_out(u);
  const double d = dot(u.data(), a.data());
  for (std::size_t j = 0; j < u.size(); ++j) u[j] -= d * a[j];
  u = l2_normalize(u);
  for (std::size_t j = 0; j < u.size(); ++j) u[j] += c * a[j];
  return l2_normalize(u);
}

/// Moves parameters away from their structured init (zero offset heads,
/// unit LayerNorm gains) so every path carries gradient.
inline void randomize(ReIDParams& p, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  p.visit([&](const std::string& name, Tensor& t) {
    const bool gain = name.ends_with("ln_gamma");
    for (double& x : t.data()) x = gain ? 1.0 + n(rng) : x + n(rng);
  });
}

}  // namespace detail

/// Small model for the full-model block; finishes in about a second.
inline RunConfig default_gradcheck_config() {
  RunConfig c;
  c.model.width = 8;
  c.model.heads = 2;
  c.model.points = 2;
  c.model.queries = 3;
  c.model.layers = 2;
  c.model.cross_layers = 2;
  c.loss.identities = 4;
  c.loss.queue = 3;
  c.data.benchmark.channels = 8;
  c.data.benchmark.persons_per_scene = 2;
  c.data.benchmark.labeled_identities = 4;
  return c;
}

namespace detail {

/// Re-ID transformer and focal OIM on a two-person scene. Parameters are
/// randomized and perturbed as `extra`; maps are held fixed.
inline Block full_model_block(const RunConfig& cfg, std::mt19937_64& rng) {
  ReIDConfig mc = cfg.model;
  mc.dropout = 0.0;
  mc.validate();
  auto params = std::make_shared<ReIDParams>(init_reid_params(mc, mix_seed(cfg.optimizer.seed, 0x51)));
  std::mt19937_64 prng(rng());
  detail::randomize(*params, prng, 0.3);

  const std::size_t image = cfg.data.benchmark.image_size;
  IdentityBank bank = IdentityBank::make(2, 1, 0, mc.width, mix_seed(cfg.optimizer.seed, 0x1d), 0.0);
  const std::vector<ScenePerson> persons{{Box{0.1, 0.15, 0.45, 0.8}, 0, 0}, {Box{0.55, 0.2, 0.9, 0.85}, 1, 1}};
  const Scene scene = render_scene(bank, persons, RenderConfig{image, 0.1}, mix_seed(cfg.optimizer.seed, 0x5c), 0);
  DetectionSet det = jitter_detect(scene.boxes(), mc.queries, 0.02, mix_seed(cfg.optimizer.seed, 0xde));
  assign_targets(det, scene.boxes());
  const std::vector<IdLabel> labels = slot_labels(det, scene);

  // Bank rows sit at nearly equal cosine to the labeled slot's initial
  // embedding. Random rows would saturate the 1/τ-scaled softmax and leave
  // gradients near 1e-11, below what central differences resolve.
  const auto initial = reid_forward(scene.levels(), det.refs, *params, mc);
  std::size_t labeled_slot = 0;
  while (!labels[labeled_slot].is_labeled()) ++labeled_slot;
  auto states = std::make_shared<std::vector<OIMState>>();
  for (std::size_t i = 0; i < supervised_scales(mc); ++i) {
    const std::size_t dq = mc.query_width();
    Tensor f({dq});
    std::copy(initial[i].row(labeled_slot).begin(), initial[i].row(labeled_slot).end(), f.data().begin());
    f = l2_normalize(f);
    auto near = [&](double c) { return detail::near_row(f, {}, c, rng); };
    OIMState s(2, 3, dq);
    s.update_labeled(0, near(0.20).data());
    s.update_labeled(1, near(0.25).data());
    s.push_unlabeled(near(0.15).data());
    states->push_back(std::move(s));
  }

  std::vector<Tensor> maps(scene.pyramid.begin(), scene.pyramid.end());
  const double gamma = cfg.loss.focal_gamma;
  // Reference points are inputs, perturbed only when they carry gradient.
  std::vector<Tensor> owned;
  if (mc.reference_grad) owned.push_back(reference_tensor(det.refs));
  else maps.insert(maps.begin(), reference_tensor(det.refs));
  return Block{"full_model", false, std::move(owned),
               [params, mc, states, labels, gamma](Tape&, std::vector<Var>& v) {
                 std::vector<Var> maps(v.begin() + 1, v.end());
                 auto outs = reid_forward(maps, v[0], *params, mc);
                 std::vector<Var> terms;
                 for (std::size_t i = 0; i < outs.size(); ++i)
                   if (auto l = focal_oim_loss(ad::l2_normalize_rows(outs[i]), labels, (*states)[i], gamma))
                     terms.push_back(*l);
                 if (terms.empty()) throw ConfigError("gradcheck scene has no labeled slot");
                 return ad::linear_combination(terms, std::vector<double>(terms.size(), 1.0));
               },
               params->tensors(), std::move(maps)};
}

/// Tensors the check perturbs: owned first, then extra.
inline std::vector<Tensor*> block_params(Block& b) {
  std::vector<Tensor*> ptrs;
  for (auto& t : b.owned) ptrs.push_back(&t);
  ptrs.insert(ptrs.end(), b.extra.begin(), b.extra.end());
  return ptrs;
}

inline std::function<Var(Tape&)> block_builder(Block& b, bool corrupt = false) {
  return [&b, corrupt](Tape& t) {
    std::vector<Var> vars;
    for (auto& o : b.owned) vars.push_back(t.param(o));
    for (const auto& f : b.fixed) vars.push_back(t.constant(f));
    Var out = b.fn(t, vars);
    return corrupt ? ad::corrupt_gradient(out, 1.5) : out;
  };
}

}  // namespace detail

/// Runs every block. `cfg.model` drives the full-model block; the other
/// blocks use fixed small shapes. `cfg.gradcheck.corrupt_block` names a
/// block whose analytic gradient is deliberately scaled.
inline GradcheckReport run_gradcheck_suite(const RunConfig& cfg, std::ostream* log = nullptr) {
  using detail::Block;
  using detail::probe;
  const auto& gc = cfg.gradcheck;
  std::mt19937_64 rng(mix_seed(cfg.optimizer.seed, 0x6c));
  auto rnd = [&](Shape s, double sd = 1.0) { return Tensor::randn(std::move(s), rng, sd); };
  auto uni = [&](Shape s, double lo, double hi) { return Tensor::uniform(std::move(s), rng, lo, hi); };

  std::vector<Block> blocks;

  // --- primitives
  {
    Tensor w = rnd({3, 5});
    blocks.push_back({"matmul", true, {rnd({3, 4}), rnd({4, 5})},
                      [w](Tape&, std::vector<Var>& v) { return probe(ad::matmul(v[0], v[1]), w); }, {}});
  }
  {
    Tensor w = rnd({4, 3});
    blocks.push_back({"transpose", true, {rnd({3, 4})},
                      [w](Tape&, std::vector<Var>& v) { return probe(ad::transpose(v[0]), w); }, {}});
  }
  {
    Tensor w = rnd({3, 4});
    blocks.push_back({"add_mul_scale", true, {rnd({3, 4}), rnd({3, 4})},
                      [w](Tape&, std::vector<Var>& v) {
                        return probe(ad::scale(ad::mul(ad::add(v[0], v[1]), v[1]), 0.7), w);
                      },
                      {}});
  }
  {
    Tensor w = rnd({3, 4});
    blocks.push_back({"add_row_bias", true, {rnd({3, 4}), rnd({4})},
                      [w](Tape&, std::vector<Var>& v) { return probe(ad::add_row_bias(v[0], v[1]), w); }, {}});
  }
  {
    Tensor w = rnd({3, 5});
    blocks.push_back({"softmax_rows", true, {rnd({3, 5})},
                      [w](Tape&, std::vector<Var>& v) { return probe(ad::softmax_rows(v[0]), w); }, {}});
  }
  {
    Tensor w = rnd({3, 6});
    blocks.push_back({"layer_norm", true, {rnd({3, 6}), uni({6}, 0.5, 1.5), rnd({6})},
                      [w](Tape&, std::vector<Var>& v) { return probe(ad::layer_norm(v[0], v[1], v[2]), w); }, {}});
  }
  {
    Tensor w = rnd({3, 4});
    blocks.push_back({"l2_normalize_rows", true, {rnd({3, 4})},
                      [w](Tape&, std::vector<Var>& v) { return probe(ad::l2_normalize_rows(v[0]), w); }, {}});
  }
  {
    Tensor w = rnd({4, 5});
    blocks.push_back({"slice_concat_gather", true, {rnd({3, 4}), rnd({3, 2})},
                      [w](Tape&, std::vector<Var>& v) {
                        Var c = ad::concat_cols({ad::slice_cols(v[0], 1, 3), v[1]});
                        return probe(ad::gather_rows(c, {2, 0, 2, 1}), w);
                      },
                      {}});
  }
  {
    Tensor w = rnd({2, 6});
    blocks.push_back({"select_head_blocks", true, {rnd({4, 6})},
                      [w](Tape&, std::vector<Var>& v) { return probe(ad::select_head_blocks(v[0], 2), w); }, {}});
  }
  {
    Tensor w = rnd({2, 3});
    blocks.push_back({"group_weighted_sum", true, {rnd({6, 3}), rnd({2, 3})},
                      [w](Tape&, std::vector<Var>& v) { return probe(ad::group_weighted_sum(v[0], v[1]), w); }, {}});
  }
  {
    Tensor w = rnd({5, 3});
    // Off-grid coordinates, some outside the map to exercise zero padding.
    Tensor pts = uni({5, 2}, -0.8, 4.8);
    blocks.push_back({"sample_points", true, {rnd({3, 4, 5}), rnd({3, 2, 3}), pts},
                      [w](Tape&, std::vector<Var>& v) {
                        return probe(ad::sample_points({v[0], v[1]}, v[2], {0, 1, 0, 1, 0}), w);
                      },
                      {}});
  }
  {
    blocks.push_back({"focal_softmax_nll", true, {rnd({4, 5})},
                      [](Tape&, std::vector<Var>& v) { return ad::focal_softmax_nll(v[0], {1, 0, 4, 2}, 2.0); }, {}});
    blocks.push_back({"softmax_nll", true, {rnd({4, 5})},
                      [](Tape&, std::vector<Var>& v) { return ad::focal_softmax_nll(v[0], {3, 3, 0, 1}, 0.0); }, {}});
  }
  {
    blocks.push_back({"sum_mean_combination", true, {rnd({2, 3}), rnd({4})},
                      [](Tape&, std::vector<Var>& v) {
                        Var a = ad::sum(ad::mul(v[0], v[0]));
                        Var b = ad::mean(ad::mul(v[1], v[1]));
                        return ad::linear_combination({a, b}, {0.3, -1.7});
                      },
                      {}});
  }

  // --- attention modules
  {
    std::mt19937_64 prng(rng());
    auto mha = std::make_shared<MultiHeadAttnParams>(MultiHeadAttnParams::init(8, 2, prng));
    Tensor w = rnd({4, 8});
    Block b{"multi_head_self_attention", false, {rnd({4, 8})},
            [mha, w](Tape&, std::vector<Var>& v) { return probe(multi_head_self_attention(v[0], *mha), w); },
            {&mha->w_q, &mha->w_k, &mha->w_v, &mha->w_o}};
    blocks.push_back(std::move(b));
  }
  {
    Tensor w = rnd({4, 8});
    blocks.push_back({"residual_layernorm", false, {rnd({4, 8}), rnd({4, 8}), uni({8}, 0.5, 1.5), rnd({8})},
                      [w](Tape&, std::vector<Var>& v) { return probe(residual_layernorm(v[0], v[1], v[2], v[3]), w); },
                      {}});
  }
  auto deform_block = [&](const std::string& name, std::size_t levels, bool average) {
    std::mt19937_64 prng(rng());
    auto p = std::make_shared<DeformAttnParams>(DeformAttnParams::init(8, 6, 2, 2, levels, prng));
    for (Tensor* t : {&p->offset_w, &p->weight_w, &p->offset_b, &p->weight_b})
      for (double& x : t->data()) x += 0.3 * std::normal_distribution<double>(0.0, 1.0)(prng);
    std::vector<Tensor> owned{rnd({3, 8}), uni({3, 2}, 0.1, 0.9)}, maps;
    const std::size_t sizes[3] = {8, 4, 2};
    for (std::size_t l = 0; l < levels; ++l) maps.push_back(rnd({6, sizes[l], sizes[l] + 1}));
    Tensor w = rnd({3, 8});
    DeformAttnOptions opt{average};
    blocks.push_back({name, false, std::move(owned),
                      [p, w, levels, opt](Tape&, std::vector<Var>& v) {
                        std::vector<Var> maps(v.begin() + 2, v.begin() + 2 + long(levels));
                        return probe(deform_attn(v[0], v[1], maps, *p, opt), w);
                      },
                      {&p->offset_w, &p->offset_b, &p->weight_w, &p->weight_b, &p->value_w, &p->output_w},
                      std::move(maps)});
  };
  deform_block("deform_attn_single_scale", 1, false);
  deform_block("deform_attn_multi_scale", 3, false);
  deform_block("deform_attn_average_samples", 3, true);

  // --- OIM
  {
    const std::size_t dim = 16;
    Tensor feats = rnd({5, dim});
    std::vector<Tensor> rows;
    Tensor mean({dim});
    for (std::size_t i = 0; i < 5; ++i) {
      rows.push_back(l2_normalize(Tensor({dim}, {feats.row(i).begin(), feats.row(i).end()})));
      mean += rows.back();
    }
    auto state = std::make_shared<OIMState>(5, 4, dim);
    for (std::size_t i = 0; i < 5; ++i) state->update_labeled(i, detail::near_row(mean, rows, 0.1 + 0.05 * double(i), rng).data());
    for (std::size_t i = 0; i < 3; ++i) state->push_unlabeled(detail::near_row(mean, rows, 0.12 + 0.05 * double(i), rng).data());
    const std::vector<IdLabel> labels{IdLabel::labeled(2), IdLabel::unlabeled(), IdLabel::labeled(0),
                                      IdLabel::background(), IdLabel::labeled(4)};
    blocks.push_back({"focal_oim", false, {feats},
                      [state, labels](Tape&, std::vector<Var>& v) {
                        return *focal_oim_loss(ad::l2_normalize_rows(v[0]), labels, *state, 2.0);
                      },
                      {}});
    blocks.push_back({"oim", false, {feats},
                      [state, labels](Tape&, std::vector<Var>& v) {
                        return *oim_loss(ad::l2_normalize_rows(v[0]), labels, *state);
                      },
                      {}});
  }

  blocks.push_back(detail::full_model_block(cfg, rng));

  bool corrupt_found = gc.corrupt_block.empty();
  GradcheckReport report;
  for (auto& b : blocks) {
    const bool corrupt = b.name == gc.corrupt_block;
    corrupt_found = corrupt_found || corrupt;
    GradcheckBlockResult r{b.name, b.primitive, b.primitive ? gc.primitive_tolerance : gc.tolerance,
                           gradcheck_params(detail::block_builder(b, corrupt), detail::block_params(b), gc.step)};
    if (log) {
      *log << (r.passed() ? "ok    " : "FAIL  ") << r.name << "  max_rel_error=" << r.result.max_rel_error
           << "  tol=" << r.tolerance << "  coords=" << r.result.coordinates << '\n';
    }
    report.blocks.push_back(std::move(r));
  }
  if (!corrupt_found) throw ConfigError("gradcheck.corrupt_block names no block: '" + gc.corrupt_block + "'");
  return report;
}

}  // namespace seqtr

#endif  // SEQTR_GRADCHECK_SUITE_HPP
