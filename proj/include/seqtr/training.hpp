// SPDX-License-Identifier: Apache-2.0
//
// Training loop over synthetic scenes and the embedding / evaluation
// pipeline built on the detector stub.

#ifndef SEQTR_TRAINING_HPP
#define SEQTR_TRAINING_HPP

#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <vector>

#include "seqtr/checkpoint.hpp"

namespace seqtr {

/// Number of separately supervised embedding scales for a scheme.
inline std::size_t supervised_scales(const ReIDConfig& cfg) {
  return cfg.scheme == Scheme::shared || cfg.scheme == Scheme::parallel ? kPyramidLevels : 1;
}

/// Width of one supervised scale's embedding.
inline std::size_t scale_width(const ReIDConfig& cfg) { return cfg.query_width(); }

inline std::vector<OIMState> make_oim_states(const RunConfig& cfg) {
  std::vector<OIMState> states;
  for (std::size_t i = 0; i < supervised_scales(cfg.model); ++i)
    states.emplace_back(cfg.loss.identities, cfg.loss.queue, scale_width(cfg.model), cfg.loss.momentum,
                        cfg.loss.temperature);
  return states;
}

/// OIM labels for detection slots after target assignment.
inline std::vector<IdLabel> slot_labels(const DetectionSet& det, const Scene& scene) {
  std::vector<IdLabel> labels(det.size(), IdLabel::background());
  for (std::size_t i = 0; i < det.size(); ++i) {
    if (!det.assigned[i]) continue;
    const int l = scene.persons.at(*det.assigned[i]).label;
    labels[i] = l >= 0 ? IdLabel::labeled(static_cast<std::size_t>(l)) : IdLabel::unlabeled();
  }
  return labels;
}

class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const std::vector<Tensor*>& params) : cfg_(cfg) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  void step(const std::vector<Tensor*>& params, std::vector<Tensor>& grads) {
    ++t_;
    if (cfg_.clip_norm > 0.0) {
      double n2 = 0.0;
      for (const auto& g : grads)
        for (double x : g.data()) n2 += x * x;
      const double n = std::sqrt(n2);
      if (n > cfg_.clip_norm)
        for (auto& g : grads) g *= cfg_.clip_norm / n;
    }
    const double lr = cfg_.step_size;
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * p[i];
        switch (cfg_.kind) {
          case OptimizerKind::sgd:
            p[i] -= lr * gi;
            break;
          case OptimizerKind::momentum:
            m_[k][i] = cfg_.beta1 * m_[k][i] + gi;
            p[i] -= lr * m_[k][i];
            break;
          case OptimizerKind::adam: {
            m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
            v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mh = m_[k][i] / (1.0 - std::pow(cfg_.beta1, double(t_)));
            const double vh = v_[k][i] / (1.0 - std::pow(cfg_.beta2, double(t_)));
            p[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
            break;
          }
        }
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

struct LossRecord {
  std::size_t step = 0;
  double total = 0.0;
  double cls = 0.0;
  double iou = 0.0;
  double l1 = 0.0;
  double oim = 0.0;
};

struct SceneLoss {
  LossRecord record;
  std::optional<Var> total;                    // graph node when OIM contributes
  std::vector<Tensor> features;                // per-scale normalized embeddings
  std::vector<IdLabel> labels;
};

/// Forward pass and weighted total loss for one detected scene. The detection
/// terms come from the stub and carry no gradient.
inline SceneLoss scene_loss(Tape& tape, const RunConfig& cfg, const ReIDParams& params,
                            const std::vector<OIMState>& states, const Scene& scene, const DetectionSet& det,
                            std::mt19937_64* dropout_rng = nullptr) {
  SceneLoss out;
  std::vector<Var> maps;
  for (const auto& l : scene.pyramid) maps.push_back(tape.constant(l));
  Tensor refs_t = reference_tensor(det.refs);
  Var refs = cfg.model.reference_grad ? tape.variable(std::move(refs_t)) : tape.constant(std::move(refs_t));
  auto per_scale = reid_forward(maps, refs, params, cfg.model, dropout_rng);
  if (per_scale.size() != states.size())
    throw DimensionError("expected " + std::to_string(per_scale.size()) + " OIM states, got " +
                         std::to_string(states.size()));
  out.labels = slot_labels(det, scene);

  std::vector<Var> oim_terms;
  for (std::size_t i = 0; i < per_scale.size(); ++i) {
    Var f = ad::l2_normalize_rows(per_scale[i]);
    out.features.push_back(f.value());
    if (auto l = focal_oim_loss(f, out.labels, states[i], cfg.loss.focal_gamma)) oim_terms.push_back(*l);
  }

  const auto dl = detection_losses(det, scene.boxes(), cfg.loss.cls_gamma, cfg.loss.cls_alpha);
  const auto& w = cfg.loss.weights;
  out.record.cls = dl.cls;
  out.record.iou = dl.iou;
  out.record.l1 = dl.l1;
  if (!oim_terms.empty()) {
    Var oim = ad::linear_combination(oim_terms, std::vector<double>(oim_terms.size(), 1.0 / double(oim_terms.size())));
    out.record.oim = oim.value()[0];
    Var det_terms = tape.constant(Tensor::scalar(w.cls * dl.cls + w.iou * dl.iou + w.l1 * dl.l1));
    out.total = ad::linear_combination({det_terms, oim}, {1.0, w.oim});
  }
  out.record.total = total_loss(dl.cls, dl.iou, dl.l1, out.record.oim, w);
  return out;
}

inline DetectionSet detect_scene(const Scene& scene, std::size_t n, double noise, std::uint64_t seed) {
  DetectionSet det = jitter_detect(scene.boxes(), n, noise, mix_seed(seed, scene.id));
  assign_targets(det, scene.boxes());
  return det;
}

struct TrainResult {
  std::vector<LossRecord> curve;
};

/// Plain training loop. Writes one loss record per step plus a final
/// evaluation record after the last update (steps + 1 rows). Throws
/// NumericError naming the step on a non-finite loss.
inline TrainResult train(const RunConfig& cfg, const Benchmark& data, ReIDParams& params,
                         std::vector<OIMState>& states,
                         const std::function<void(const LossRecord&)>& on_step = {}) {
  if (data.index.train.empty()) throw ConfigError("dataset has no training scenes");
  if (states.size() != supervised_scales(cfg.model)) throw DimensionError("one OIM state per supervised scale required");
  std::vector<Tensor*> tensors = params.tensors();
  Optimizer opt(cfg.optimizer, tensors);
  std::mt19937_64 order_rng(mix_seed(cfg.optimizer.seed, 17));
  std::mt19937_64 dropout_rng(mix_seed(cfg.optimizer.seed, 19));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_scene = [&]() -> const Scene& {
    if (cursor == order.size()) {
      order = data.index.train;
      std::shuffle(order.begin(), order.end(), order_rng);
      cursor = 0;
    }
    return data.scene(order[cursor++]);
  };

  TrainResult res;
  const std::size_t per_step = cfg.optimizer.scenes_per_step;
  for (std::size_t step = 0; step <= cfg.optimizer.steps; ++step) {
    const bool update = step < cfg.optimizer.steps;
    LossRecord rec{step, 0, 0, 0, 0, 0};
    std::vector<Tensor> grads;
    for (const Tensor* p : tensors) grads.emplace_back(p->shape());
    std::vector<std::tuple<std::vector<Tensor>, std::vector<IdLabel>>> pending;
    for (std::size_t b = 0; b < per_step; ++b) {
      const Scene& scene = next_scene();
      const DetectionSet det = detect_scene(scene, cfg.model.queries, cfg.data.detector_noise,
                                            mix_seed(cfg.optimizer.seed, 1000003 * step + b));
      Tape tape;
      SceneLoss sl = scene_loss(tape, cfg, params, states, scene, det, cfg.model.dropout > 0 ? &dropout_rng : nullptr);
      if (!std::isfinite(sl.record.total))
        throw NumericError("non-finite loss at step " + std::to_string(step));
      const double inv = 1.0 / double(per_step);
      rec.total += inv * sl.record.total;
      rec.cls += inv * sl.record.cls;
      rec.iou += inv * sl.record.iou;
      rec.l1 += inv * sl.record.l1;
      rec.oim += inv * sl.record.oim;
      if (update && sl.total) {
        tape.backward(*sl.total);
        for (std::size_t k = 0; k < tensors.size(); ++k)
          if (auto g = tape.param_grad(*tensors[k])) {
            *g *= inv;
            grads[k] += *g;
          }
      }
      pending.emplace_back(std::move(sl.features), std::move(sl.labels));
    }
    res.curve.push_back(rec);
    if (on_step) on_step(rec);
    if (!update) break;
    for (const auto& g : grads)
      if (!g.all_finite()) throw NumericError("non-finite gradient at step " + std::to_string(step));
    opt.step(tensors, grads);
    for (auto& [features, labels] : pending)
      for (std::size_t i = 0; i < states.size(); ++i) oim_update(states[i], features[i], labels);
  }
  return res;
}

inline void write_loss_curve(const std::vector<LossRecord>& curve, std::ostream& os) {
  os << "step,total,cls,iou,l1,oim\n";
  os.precision(17);
  for (const auto& r : curve)
    os << r.step << ',' << r.total << ',' << r.cls << ',' << r.iou << ',' << r.l1 << ',' << r.oim << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation pipeline

/// Matching embeddings [N × D_match] for every detection slot of a scene.
inline Tensor embed_scene(const ReIDParams& params, const ReIDConfig& cfg, const Scene& scene, const DetectionSet& det) {
  return concat_inference_embeddings(reid_forward(scene.levels(), det.refs, params, cfg));
}

struct EvalSet {
  std::vector<QueryEntry> queries;
  std::vector<GalleryEntry> gallery;
  GroundTruth truth;
  std::vector<std::size_t> gallery_scenes;
};

using SceneEmbedder = std::function<Tensor(const Scene&, const DetectionSet&)>;

/// Detects and embeds every gallery scene, then picks each query's slot by
/// maximum overlap with its annotated box.
inline EvalSet build_eval_set(const RunConfig& cfg, const Benchmark& data, const SceneEmbedder& embed) {
  EvalSet es;
  es.truth = data.gallery_truth();
  es.gallery_scenes = data.index.gallery;
  std::map<std::size_t, std::pair<DetectionSet, Tensor>> detected;
  for (std::size_t sid : data.index.gallery) {
    const Scene& scene = data.scene(sid);
    DetectionSet det = detect_scene(scene, cfg.model.queries, cfg.data.detector_noise, cfg.eval.seed);
    Tensor emb = embed(scene, det);
    if (emb.rows() != det.size()) throw DimensionError("embedder must return one row per detection slot");
    for (std::size_t i = 0; i < det.size(); ++i) {
      if (det.scores[i] < cfg.eval.score_threshold) continue;
      Tensor e({emb.cols()});
      std::copy(emb.row(i).begin(), emb.row(i).end(), e.data().begin());
      es.gallery.push_back({sid, det.boxes[i], std::move(e), det.scores[i]});
    }
    detected.emplace(sid, std::make_pair(std::move(det), std::move(emb)));
  }
  for (const auto& q : data.index.queries) {
    auto it = detected.find(q.scene);
    if (it == detected.end()) throw ConfigError("query scene " + std::to_string(q.scene) + " is not a gallery scene");
    es.queries.push_back(select_query_embedding(it->second.first, it->second.second, q.box, q.scene, q.identity,
                                                q.query_id, cfg.eval.score_threshold));
  }
  return es;
}

inline EvalSet build_eval_set(const ReIDParams& params, const RunConfig& cfg, const Benchmark& data) {
  return build_eval_set(cfg, data, [&](const Scene& scene, const DetectionSet& det) {
    return embed_scene(params, cfg.model, scene, det);
  });
}

struct EvalReport {
  RankingResult main;
  std::vector<SweepPoint> curve;
};

inline EvalReport run_evaluation(const EvalSet& es, const EvalConfig& ec) {
  EvalReport rep;
  auto rank = [&](const GalleryScope* scope) {
    return ec.cbgm ? cbgm_rerank(es.queries, es.gallery, es.truth, {ec.k1, ec.k2}, ec.iou_threshold, scope)
                   : evaluate(es.queries, es.gallery, es.truth, ec.iou_threshold, scope);
  };
  rep.main = rank(nullptr);
  for (std::size_t size : ec.gallery_sizes) {
    const auto scope = gallery_scope(es.queries, es.gallery_scenes, es.truth, size, ec.seed);
    rep.curve.push_back({size, rank(&scope)});
  }
  return rep;
}

inline void write_results_csv(const RankingResult& r, std::ostream& os) {
  os << "query_id,rank,scene_id,score,correct\n";
  os.precision(17);
  for (const auto& q : r.queries)
    for (std::size_t k = 0; k < q.candidates.size(); ++k) {
      const auto& c = q.candidates[k];
      os << q.query_id << ',' << (k + 1) << ',' << c.scene << ',' << c.score << ',' << (c.correct ? 1 : 0) << '\n';
    }
}

inline json metrics_json(const RankingResult& r) {
  return json{{"mAP", r.mAP}, {"top1", r.top1}, {"top5", r.top5}, {"top10", r.top10}};
}

inline json summary_json(const EvalReport& rep, const RunConfig& cfg) {
  json curves = json::array();
  for (const auto& p : rep.curve) {
    json e = metrics_json(p.result);
    e["size"] = p.size;
    curves.push_back(e);
  }
  json s = metrics_json(rep.main);
  s["queries"] = rep.main.queries.size();
  s["cbgm"] = cfg.eval.cbgm;
  s["curves"] = curves;
  s["config"] = run_config_json(cfg);
  return s;
}

}  // namespace seqtr

#endif  // SEQTR_TRAINING_HPP
