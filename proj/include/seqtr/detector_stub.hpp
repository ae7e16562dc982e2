// SPDX-License-Identifier: Apache-2.0
//
// Detector substitute: jittered ground-truth boxes plus background slots,
// box losses, and a Hungarian solver shared with evaluation.

#ifndef SEQTR_DETECTOR_STUB_HPP
#define SEQTR_DETECTOR_STUB_HPP

#include <algorithm>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "seqtr/attention.hpp"

namespace seqtr {

/// Image-normalized corners.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid() const { return x1 <= x2 && y1 <= y2; }
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

  /// Clamps into [0,1]² and orders the corners.
  Box validated() const {
    Box b{std::clamp(x1, 0.0, 1.0), std::clamp(y1, 0.0, 1.0), std::clamp(x2, 0.0, 1.0),
          std::clamp(y2, 0.0, 1.0)};
    if (b.x1 > b.x2) std::swap(b.x1, b.x2);
    if (b.y1 > b.y2) std::swap(b.y1, b.y2);
    return b;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline ReferencePoint box_center_reference(const Box& b) {
  return {(b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0};
}

struct DetectionSet {
  std::vector<Box> boxes;
  std::vector<double> scores;
  std::vector<ReferencePoint> refs;
  std::vector<std::optional<std::size_t>> assigned;  // ground-truth index per slot

  std::size_t size() const { return boxes.size(); }
};

inline constexpr double kPersonScore = 0.9;
inline constexpr double kBackgroundScore = 0.1;

/// First slots hold the ground-truth boxes with Gaussian corner noise (score
/// 0.9), the rest are uniform random background boxes (score 0.1).
inline DetectionSet jitter_detect(const std::vector<Box>& truth, std::size_t n, double noise_sigma,
                                  std::uint64_t seed) {
  if (n < truth.size())
    throw ConfigError("detector stub: N = " + std::to_string(n) + " is smaller than the " +
                      std::to_string(truth.size()) + " persons in the scene");
  if (noise_sigma < 0.0) throw ConfigError("detector stub: noise sigma must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  DetectionSet det;
  for (const auto& b : truth) {
    Box j = b;
    if (noise_sigma > 0.0) {
      j.x1 += noise_sigma * noise(rng);
      j.y1 += noise_sigma * noise(rng);
      j.x2 += noise_sigma * noise(rng);
      j.y2 += noise_sigma * noise(rng);
      j = j.validated();
    }
    det.boxes.push_back(j);
    det.scores.push_back(kPersonScore);
  }
  while (det.boxes.size() < n) {
    const double w = 0.05 + 0.2 * unit(rng), h = 0.1 + 0.3 * unit(rng);
    const double x = unit(rng) * (1.0 - w), y = unit(rng) * (1.0 - h);
    det.boxes.push_back({x, y, x + w, y + h});
    det.scores.push_back(kBackgroundScore);
  }
  for (const auto& b : det.boxes) det.refs.push_back(box_center_reference(b));
  det.assigned.assign(n, std::nullopt);
  return det;
}

/// Mean over coordinates of the Huber-style smooth L1 (β = 1).
inline double smooth_l1(const Tensor& pred, const Tensor& target) {
  pred.require_same_shape(target, "smooth_l1");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double x = std::abs(pred[i] - target[i]);
    s += x < 1.0 ? 0.5 * x * x : x - 0.5;
  }
  return s / static_cast<double>(pred.size());
}

/// Mean of −α (1 − p_t)^γ log p_t over binary labels.
inline double focal_cls_loss(std::span<const double> scores, std::span<const int> labels,
                             double gamma = 2.0, double alpha = 0.25) {
  if (scores.size() != labels.size() || scores.empty())
    throw DimensionError("focal_cls_loss: need one label per score");
  constexpr double eps = 1e-12;
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0))
      throw NumericError("focal_cls_loss: score " + std::to_string(scores[i]) + " outside [0,1]");
    const double p = std::clamp(scores[i], eps, 1.0 - eps);
    const double pt = labels[i] ? p : 1.0 - p;
    s += -alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
  }
  return s / static_cast<double>(scores.size());
}

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col), sorted by row
  double cost = 0.0;
};

/// Minimum-cost one-to-one assignment of min(n, m) pairs (Jonker-Volgenant
/// style shortest augmenting paths with potentials, O(n²m)).
inline Assignment hungarian_assign(const Tensor& cost) {
  Assignment out;
  if (cost.empty()) return out;
  cost.require_ndim(2);
  if (!cost.all_finite()) throw NumericError("hungarian_assign: non-finite cost");
  const bool flip = cost.rows() > cost.cols();
  const Tensor c = flip ? transpose(cost) : cost;
  const std::size_t n = c.rows(), m = c.cols();
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; p[j] is the row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  for (std::size_t j = 1; j <= m; ++j) {
    if (!p[j]) continue;
    const std::size_t r = p[j] - 1, col = j - 1;
    out.pairs.emplace_back(flip ? col : r, flip ? r : col);
    out.cost += c(r, col);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

/// Slot ↔ ground truth by Hungarian matching on −IoU. A vanishing bias on the
/// slot index breaks ties toward lower slots; pairs with zero overlap stay
/// unassigned.
inline void assign_targets(DetectionSet& det, const std::vector<Box>& truth) {
  det.assigned.assign(det.size(), std::nullopt);
  if (truth.empty() || det.size() == 0) return;
  Tensor cost({det.size(), truth.size()});
  for (std::size_t i = 0; i < det.size(); ++i)
    for (std::size_t j = 0; j < truth.size(); ++j)
      cost(i, j) = -iou(det.boxes[i], truth[j]) + 1e-9 * static_cast<double>(i);
  for (auto [slot, gt] : hungarian_assign(cost).pairs)
    if (iou(det.boxes[slot], truth[gt]) > 0.0) det.assigned[slot] = gt;
}

struct DetectionLosses {
  double cls = 0.0;
  double iou = 0.0;
  double l1 = 0.0;
};

/// L_cls over every slot, L_iou = mean(1 − IoU) and L_l1 over assigned slots.
inline DetectionLosses detection_losses(const DetectionSet& det, const std::vector<Box>& truth,
                                        double gamma = 2.0, double alpha = 0.25) {
  DetectionLosses l;
  std::vector<int> labels(det.size(), 0);
  std::size_t assigned = 0;
  std::vector<double> pred, target;
  for (std::size_t i = 0; i < det.size(); ++i) {
    if (!det.assigned[i]) continue;
    labels[i] = 1;
    ++assigned;
    const Box& b = det.boxes[i];
    const Box& g = truth.at(*det.assigned[i]);
    l.iou += 1.0 - iou(b, g);
    pred.insert(pred.end(), {b.x1, b.y1, b.x2, b.y2});
    target.insert(target.end(), {g.x1, g.y1, g.x2, g.y2});
  }
  if (det.size() > 0) l.cls = focal_cls_loss(det.scores, labels, gamma, alpha);
  if (assigned > 0) {
    l.iou /= static_cast<double>(assigned);
    l.l1 = smooth_l1(Tensor({pred.size()}, pred), Tensor({target.size()}, target));
  }
  return l;
}

}  // namespace seqtr

#endif  // SEQTR_DETECTOR_STUB_HPP
