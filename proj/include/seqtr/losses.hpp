// SPDX-License-Identifier: Apache-2.0
//
// Online instance matching (plain and focal) and the weighted loss combiner.

#ifndef SEQTR_LOSSES_HPP
#define SEQTR_LOSSES_HPP

#include <optional>
#include <vector>

#include "seqtr/autograd.hpp"

namespace seqtr {

/// Identity supervision for one feature row.
struct IdLabel {
  enum class Kind { labeled, unlabeled, background };
  Kind kind = Kind::background;
  std::size_t id = 0;

  static IdLabel labeled(std::size_t id) { return {Kind::labeled, id}; }
  static IdLabel unlabeled() { return {Kind::unlabeled, 0}; }
  static IdLabel background() { return {Kind::background, 0}; }

  bool is_labeled() const { return kind == Kind::labeled; }
  bool is_unlabeled() const { return kind == Kind::unlabeled; }

  friend bool operator==(const IdLabel&, const IdLabel&) = default;
};

/// Lookup table of labeled-identity prototypes plus a circular queue of
/// unlabeled-person features.
class OIMState {
 public:
  OIMState() = default;
  OIMState(std::size_t identities, std::size_t queue_capacity, std::size_t dim, double momentum = 0.5,
           double temperature = 1.0 / 30.0)
      : lut_({identities, dim}),
        queue_capacity_(queue_capacity),
        dim_(dim),
        momentum_(momentum),
        temperature_(temperature) {
    if (momentum < 0.0 || momentum > 1.0) throw ConfigError("OIM momentum must lie in [0,1]");
    if (!(temperature > 0.0)) throw ConfigError("OIM temperature must be positive");
  }

  const Tensor& lut() const { return lut_; }
  Tensor& lut() { return lut_; }
  std::size_t identities() const { return lut_.rows(); }
  std::size_t dim() const { return dim_; }
  std::size_t queue_capacity() const { return queue_capacity_; }
  std::size_t queue_size() const { return queue_.size(); }
  double momentum() const { return momentum_; }
  double temperature() const { return temperature_; }

  /// Queue rows ordered oldest first.
  std::vector<std::vector<double>> queue_rows() const {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < queue_.size(); ++i) rows.push_back(queue_[(head_ + i) % queue_.size()]);
    return rows;
  }

  /// [L + |queue|] × D, lookup table rows first.
  Tensor bank() const {
    Tensor b({lut_.rows() + queue_.size(), dim_});
    std::copy(lut_.data().begin(), lut_.data().end(), b.data().begin());
    std::size_t r = lut_.rows();
    for (const auto& row : queue_rows()) std::copy(row.begin(), row.end(), b.row(r++).begin());
    return b;
  }

  void push_unlabeled(std::span<const double> x) {
    if (queue_capacity_ == 0) return;
    std::vector<double> row(x.begin(), x.end());
    if (queue_.size() < queue_capacity_) {
      queue_.push_back(std::move(row));
    } else {
      queue_[head_] = std::move(row);
      head_ = (head_ + 1) % queue_capacity_;
    }
  }

  /// lut[id] ← normalize(momentum · lut[id] + (1 − momentum) · x)
  void update_labeled(std::size_t id, std::span<const double> x) {
    auto row = lut_.row(id);
    for (std::size_t j = 0; j < dim_; ++j) row[j] = momentum_ * row[j] + (1.0 - momentum_) * x[j];
    const double n = norm(row);
    if (n > kNormFloor)
      for (auto& v : row) v /= n;
  }

  /// Restores a queue snapshot (oldest first).
  void set_queue(const std::vector<std::vector<double>>& rows) {
    if (rows.size() > queue_capacity_) throw DimensionError("OIM queue snapshot exceeds capacity");
    queue_ = rows;
    head_ = 0;
  }

 private:
  Tensor lut_;
  std::vector<std::vector<double>> queue_;
  std::size_t head_ = 0;  // oldest entry once the queue is full
  std::size_t queue_capacity_ = 0;
  std::size_t dim_ = 0;
  double momentum_ = 0.5;
  double temperature_ = 1.0 / 30.0;
};

inline void check_oim_inputs(const Tensor& features, const std::vector<IdLabel>& labels,
                             const OIMState& state) {
  features.require_ndim(2);
  if (features.rows() != labels.size()) throw DimensionError("OIM: one label per feature row required");
  if (features.cols() != state.dim())
    throw DimensionError("OIM: feature width " + std::to_string(features.cols()) + " vs state width " +
                         std::to_string(state.dim()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].is_labeled() && labels[i].id >= state.identities())
      throw DimensionError("OIM: identity " + std::to_string(labels[i].id) + " out of range (L = " +
                           std::to_string(state.identities()) + ")");
    if (labels[i].kind == IdLabel::Kind::background) continue;
    const double n = norm(features.row(i));
    if (std::abs(n - 1.0) > 1e-6)
      throw NumericError("OIM: feature row " + std::to_string(i) + " is not unit norm (" + std::to_string(n) + ")");
  }
}

/// Focal OIM on the tape: logits = [lut; queue]·xᵀ / τ over labeled rows,
/// each row weighted by (1 − p_t)^γ. Returns nullopt when no row is labeled.
/// State is read, not modified.
inline std::optional<Var> focal_oim_loss(Var features, const std::vector<IdLabel>& labels,
                                         const OIMState& state, double gamma) {
  check_oim_inputs(features.value(), labels, state);
  std::vector<std::size_t> rows, targets;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].is_labeled()) {
      rows.push_back(i);
      targets.push_back(labels[i].id);
    }
  if (rows.empty()) return std::nullopt;
  Tape& t = *features.tape;
  Tensor bank_t = transpose(state.bank());
  bank_t *= 1.0 / state.temperature();
  Var logits = ad::matmul(ad::gather_rows(features, rows), t.constant(std::move(bank_t)));
  return ad::focal_softmax_nll(logits, std::move(targets), gamma);
}

/// Applies the post-step state update: momentum update of labeled rows and
/// queue insertion of unlabeled ones. Background rows are ignored.
inline void oim_update(OIMState& state, const Tensor& features, const std::vector<IdLabel>& labels) {
  check_oim_inputs(features, labels, state);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].is_labeled()) state.update_labeled(labels[i].id, features.row(i));
    else if (labels[i].is_unlabeled()) state.push_unlabeled(features.row(i));
  }
}

/// Loss value with the state update applied afterwards. 0 when no labeled rows.
inline double focal_oim_loss(const Tensor& features, const std::vector<IdLabel>& labels, OIMState& state,
                             double gamma = 2.0) {
  double value = 0.0;
  {
    Tape t;
    t.set_grad_enabled(false);
    if (auto l = focal_oim_loss(t.constant(features), labels, state, gamma)) value = l->value()[0];
  }
  oim_update(state, features, labels);
  return value;
}

inline double oim_loss(const Tensor& features, const std::vector<IdLabel>& labels, OIMState& state) {
  return focal_oim_loss(features, labels, state, 0.0);
}

inline std::optional<Var> oim_loss(Var features, const std::vector<IdLabel>& labels, const OIMState& state) {
  return focal_oim_loss(features, labels, state, 0.0);
}

struct LossWeights {
  double cls = 2.0;
  double iou = 5.0;
  double l1 = 2.0;
  double oim = 0.5;

  void validate() const {
    if (cls < 0 || iou < 0 || l1 < 0 || oim < 0) throw ConfigError("loss weights must be non-negative");
  }
};

inline double total_loss(double l_cls, double l_iou, double l_l1, double l_oim, const LossWeights& w) {
  return w.cls * l_cls + w.iou * l_iou + w.l1 * l_l1 + w.oim * l_oim;
}

}  // namespace seqtr

#endif  // SEQTR_LOSSES_HPP
