// SPDX-License-Identifier: Apache-2.0
//
// Person-search retrieval protocol: cosine ranking of gallery detections,
// IoU-gated correctness with greedy ground-truth claiming, mAP / CMC,
// gallery-size sweeps and context bipartite graph re-ranking.

#ifndef SEQTR_EVALUATION_HPP
#define SEQTR_EVALUATION_HPP

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "seqtr/detector_stub.hpp"

namespace seqtr {

struct GroundTruthPerson {
  Box box;
  std::size_t identity = 0;
};

/// Ground-truth persons keyed by scene id.
using GroundTruth = std::map<std::size_t, std::vector<GroundTruthPerson>>;

struct GalleryEntry {
  std::size_t scene = 0;
  Box box;
  Tensor embedding;
  double score = 0.0;
};

struct QueryEntry {
  std::size_t query_id = 0;
  std::size_t scene = 0;
  Box box;
  std::size_t identity = 0;
  Tensor embedding;
  /// Embeddings of co-detections in the query scene, most confident first.
  std::vector<Tensor> context;
};

struct Candidate {
  std::size_t entry = 0;  // index into the gallery
  std::size_t scene = 0;
  double score = 0.0;
  bool correct = false;
};

struct QueryRanking {
  std::size_t query_id = 0;
  std::vector<Candidate> candidates;  // rank order
  std::size_t num_relevant = 0;
  double ap = 0.0;
};

struct RankingResult {
  std::vector<QueryRanking> queries;
  double mAP = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  double top10 = 0.0;
};

inline constexpr double kDefaultIouThreshold = 0.5;

/// Slot with maximal IoU against the annotated box; ties go to the lowest slot.
inline std::size_t select_query_slot(const std::vector<Box>& detections, const Box& annotated) {
  if (detections.empty()) throw DimensionError("query scene has no detections");
  std::size_t best = 0;
  double best_iou = iou(detections[0], annotated);
  for (std::size_t i = 1; i < detections.size(); ++i) {
    const double v = iou(detections[i], annotated);
    if (v > best_iou) {
      best_iou = v;
      best = i;
    }
  }
  return best;
}

/// Builds the query entry from a detected query scene. Context holds the
/// other slots whose score reaches `context_min_score`, by descending score.
inline QueryEntry select_query_embedding(const DetectionSet& det, const Tensor& embeddings, const Box& annotated,
                                         std::size_t scene, std::size_t identity, std::size_t query_id = 0,
                                         double context_min_score = 0.5) {
  if (embeddings.rows() != det.size()) throw DimensionError("one embedding row per detection slot required");
  const std::size_t slot = select_query_slot(det.boxes, annotated);
  QueryEntry q{query_id, scene, annotated, identity, Tensor({embeddings.cols()}), {}};
  std::copy(embeddings.row(slot).begin(), embeddings.row(slot).end(), q.embedding.data().begin());
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < det.size(); ++i)
    if (i != slot && det.scores[i] >= context_min_score) others.push_back(i);
  std::stable_sort(others.begin(), others.end(),
                   [&](std::size_t a, std::size_t b) { return det.scores[a] > det.scores[b]; });
  for (std::size_t i : others) {
    Tensor e({embeddings.cols()});
    std::copy(embeddings.row(i).begin(), embeddings.row(i).end(), e.data().begin());
    q.context.push_back(std::move(e));
  }
  return q;
}

/// (Σ over correct ranks r of precision@r) / num_relevant.
inline double ap_single_query(const std::vector<int>& ranked_correct, std::size_t num_relevant) {
  if (num_relevant == 0) throw DimensionError("average precision needs at least one relevant item");
  double hits = 0.0, acc = 0.0;
  for (std::size_t r = 0; r < ranked_correct.size(); ++r) {
    if (!ranked_correct[r]) continue;
    hits += 1.0;
    acc += hits / static_cast<double>(r + 1);
  }
  return acc / static_cast<double>(num_relevant);
}

/// Per-query set of admissible gallery scenes; empty means every scene.
using GalleryScope = std::vector<std::set<std::size_t>>;

namespace detail {

inline bool in_scope(const GalleryScope* scope, std::size_t q, std::size_t scene) {
  return !scope || scope->empty() || (*scope)[q].count(scene) > 0;
}

inline void check_dims(const std::vector<QueryEntry>& queries, const std::vector<GalleryEntry>& gallery) {
  std::size_t width = 0;
  auto check = [&](const Tensor& e) {
    if (e.ndim() != 1) throw DimensionError("embeddings must be vectors");
    if (width == 0) width = e.size();
    if (e.size() != width) throw DimensionError("embedding dimension mismatch: " + std::to_string(e.size()) +
                                                " vs " + std::to_string(width));
  };
  for (const auto& q : queries) {
    check(q.embedding);
    for (const auto& c : q.context) check(c);
  }
  for (const auto& g : gallery) check(g.embedding);
}

/// Base similarity of every admissible candidate, in gallery order.
inline std::vector<Candidate> score_candidates(const QueryEntry& q, std::size_t qi,
                                               const std::vector<GalleryEntry>& gallery,
                                               const GalleryScope* scope) {
  std::vector<Candidate> c;
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const auto& g = gallery[i];
    if (g.scene == q.scene || !in_scope(scope, qi, g.scene)) continue;
    c.push_back({i, g.scene, cosine(q.embedding.data(), g.embedding.data()), false});
  }
  return c;
}

/// Sorts, marks correctness by greedy claiming and computes AP.
inline QueryRanking finish_query(const QueryEntry& q, std::size_t qi, std::vector<Candidate> cands,
                                 const std::vector<GalleryEntry>& gallery, const GroundTruth& gt,
                                 const GalleryScope* scope, double iou_threshold) {
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  QueryRanking r{q.query_id, std::move(cands), 0, 0.0};

  for (const auto& [scene, persons] : gt) {
    if (scene == q.scene || !in_scope(scope, qi, scene)) continue;
    for (const auto& p : persons) r.num_relevant += p.identity == q.identity;
  }
  if (r.num_relevant == 0)
    throw DimensionError("query " + std::to_string(q.query_id) + " has no ground-truth match in its gallery");

  std::map<std::size_t, std::vector<char>> claimed;
  std::vector<int> flags;
  flags.reserve(r.candidates.size());
  for (auto& c : r.candidates) {
    auto it = gt.find(c.scene);
    if (it != gt.end()) {
      auto& used = claimed[c.scene];
      used.resize(it->second.size(), 0);
      const Box& box = gallery[c.entry].box;
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < it->second.size(); ++j) {
        const auto& p = it->second[j];
        if (used[j] || p.identity != q.identity) continue;
        const double v = iou(box, p.box);
        if (v >= iou_threshold && v > best) {
          best = v;
          best_j = j;
        }
      }
      if (best >= 0.0) {
        used[best_j] = 1;
        c.correct = true;
      }
    }
    flags.push_back(c.correct ? 1 : 0);
  }
  r.ap = ap_single_query(flags, r.num_relevant);
  return r;
}

inline void aggregate(RankingResult& res) {
  if (res.queries.empty()) return;
  double ap = 0.0, t1 = 0.0, t5 = 0.0, t10 = 0.0;
  for (const auto& q : res.queries) {
    ap += q.ap;
    auto hit_within = [&](std::size_t k) {
      for (std::size_t i = 0; i < std::min(k, q.candidates.size()); ++i)
        if (q.candidates[i].correct) return 1.0;
      return 0.0;
    };
    t1 += hit_within(1);
    t5 += hit_within(5);
    t10 += hit_within(10);
  }
  const double n = static_cast<double>(res.queries.size());
  res.mAP = ap / n;
  res.top1 = t1 / n;
  res.top5 = t5 / n;
  res.top10 = t10 / n;
}

}  // namespace detail

/// Ranks every gallery detection outside the query's own scene by cosine
/// similarity. A candidate is correct when it overlaps (IoU ≥ threshold) a
/// not-yet-claimed ground-truth box of the query identity in its scene.
inline RankingResult evaluate(const std::vector<QueryEntry>& queries, const std::vector<GalleryEntry>& gallery,
                              const GroundTruth& gt, double iou_threshold = kDefaultIouThreshold,
                              const GalleryScope* scope = nullptr) {
  detail::check_dims(queries, gallery);
  if (scope && !scope->empty() && scope->size() != queries.size())
    throw DimensionError("gallery scope must have one entry per query");
  RankingResult res;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    res.queries.push_back(detail::finish_query(q, qi, detail::score_candidates(q, qi, gallery, scope), gallery,
                                               gt, scope, iou_threshold));
  }
  detail::aggregate(res);
  return res;
}

/// Per-query scopes for one gallery size: scenes holding the query identity
/// plus a seeded, nested prefix of distractor scenes. Matching scenes are
/// always kept, even when they alone exceed `size`; sizes larger than the
/// scenes available to a query are clipped to what is available.
inline GalleryScope gallery_scope(const std::vector<QueryEntry>& queries, const std::vector<std::size_t>& gallery_scenes,
                                  const GroundTruth& gt, std::size_t size, std::uint64_t seed) {
  if (size > gallery_scenes.size())
    throw ConfigError("gallery size " + std::to_string(size) + " exceeds the " +
                      std::to_string(gallery_scenes.size()) + " gallery scenes");
  GalleryScope scope;
  for (const auto& q : queries) {
    std::vector<std::size_t> required, distractors;
    for (std::size_t s : gallery_scenes) {
      if (s == q.scene) continue;
      bool has = false;
      if (auto it = gt.find(s); it != gt.end())
        for (const auto& p : it->second) has = has || p.identity == q.identity;
      (has ? required : distractors).push_back(s);
    }
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (q.query_id + 1)));
    std::shuffle(distractors.begin(), distractors.end(), rng);
    const std::size_t room = size > required.size() ? size - required.size() : 0;
    const std::size_t extra = std::min(room, distractors.size());
    std::set<std::size_t> s(required.begin(), required.end());
    s.insert(distractors.begin(), distractors.begin() + static_cast<std::ptrdiff_t>(extra));
    scope.push_back(std::move(s));
  }
  return scope;
}

struct SweepPoint {
  std::size_t size = 0;
  RankingResult result;
};

inline std::vector<SweepPoint> gallery_sweep(const std::vector<QueryEntry>& queries,
                                             const std::vector<GalleryEntry>& gallery, const GroundTruth& gt,
                                             const std::vector<std::size_t>& gallery_scenes,
                                             const std::vector<std::size_t>& sizes, std::uint64_t seed,
                                             double iou_threshold = kDefaultIouThreshold) {
  std::vector<SweepPoint> out;
  for (std::size_t size : sizes) {
    const auto scope = gallery_scope(queries, gallery_scenes, gt, size, seed);
    out.push_back({size, evaluate(queries, gallery, gt, iou_threshold, &scope)});
  }
  return out;
}

struct CbgmOptions {
  std::size_t k1 = 30;  // gallery scenes re-scored per query
  std::size_t k2 = 3;   // query-scene context persons used
};

/// Context bipartite graph matching. For every candidate in the query's
/// top-k1 scenes, the query's k2 most confident co-detections are matched to
/// the candidate scene's other detections by maximum-weight assignment on
/// max(0, cosine); the matched weights are added to the candidate's score.
inline RankingResult cbgm_rerank(const std::vector<QueryEntry>& queries, const std::vector<GalleryEntry>& gallery,
                                 const GroundTruth& gt, const CbgmOptions& opt,
                                 double iou_threshold = kDefaultIouThreshold, const GalleryScope* scope = nullptr) {
  if (opt.k1 < 1) throw ConfigError("CBGM k1 must be >= 1");
  detail::check_dims(queries, gallery);
  std::map<std::size_t, std::vector<std::size_t>> by_scene;
  for (std::size_t i = 0; i < gallery.size(); ++i) by_scene[gallery[i].scene].push_back(i);

  RankingResult res;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    auto cands = detail::score_candidates(q, qi, gallery, scope);

    // scenes ordered by their best candidate, ties by first appearance
    std::vector<Candidate> order = cands;
    std::stable_sort(order.begin(), order.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    std::set<std::size_t> top_scenes;
    for (const auto& c : order) {
      if (top_scenes.size() >= opt.k1) break;
      top_scenes.insert(c.scene);
    }

    const std::size_t ctx_n = std::min(opt.k2, q.context.size());
    if (ctx_n > 0) {
      for (auto& c : cands) {
        if (!top_scenes.count(c.scene)) continue;
        std::vector<std::size_t> others;
        for (std::size_t e : by_scene[c.scene])
          if (e != c.entry) others.push_back(e);
        if (others.empty()) continue;
        Tensor w({ctx_n, others.size()});
        for (std::size_t i = 0; i < ctx_n; ++i)
          for (std::size_t j = 0; j < others.size(); ++j)
            w(i, j) = std::max(0.0, cosine(q.context[i].data(), gallery[others[j]].embedding.data()));
        Tensor neg = w;
        neg *= -1.0;
        double bonus = 0.0;
        for (auto [i, j] : hungarian_assign(neg).pairs) bonus += w(i, j);
        c.score += bonus;
      }
    }
    res.queries.push_back(detail::finish_query(q, qi, std::move(cands), gallery, gt, scope, iou_threshold));
  }
  detail::aggregate(res);
  return res;
}

}  // namespace seqtr

#endif  // SEQTR_EVALUATION_HPP
