// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode tape. Each primitive records its output value together with a
// closure that maps the output gradient onto its parents. Nodes that do not
// depend on any gradient-requiring leaf are recorded without a closure.

#ifndef SEQTR_AUTOGRAD_HPP
#define SEQTR_AUTOGRAD_HPP

#include <functional>
#include <optional>
#include <random>
#include <unordered_map>
#include <utility>
#include <vector>

#include "seqtr/ops.hpp"

namespace seqtr {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(std::move(t), false, {}); }
  Var variable(Tensor t) { return push(std::move(t), true, {}); }

  /// Leaf bound to an externally owned parameter tensor. Binding the same
  /// tensor twice yields the same node, so shared weights accumulate.
  Var param(const Tensor& t) {
    if (auto it = params_.find(&t); it != params_.end()) return {this, it->second};
    Var v = push(t, grad_enabled_, {});
    params_.emplace(&t, v.id);
    return v;
  }

  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : Backward{});
  }

  Var record(Tensor value, const std::vector<Var>& parents, Backward fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : Backward{});
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() root with respect to v (zeros if none reached it).
  Tensor grad(Var v) const {
    const auto& n = nodes_[v.id];
    return n.grad ? *n.grad : Tensor(n.value.shape());
  }

  std::optional<Tensor> param_grad(const Tensor& t) const {
    auto it = params_.find(&t);
    if (it == params_.end()) return std::nullopt;
    return grad(Var{const_cast<Tape*>(this), it->second});
  }

  void accumulate(Var v, const Tensor& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.grad) n.grad = Tensor(n.value.shape());
    *n.grad += g;
  }

  /// Gradient buffer for in-place accumulation, or nullptr when v needs none.
  Tensor* grad_buffer(Var v) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (!n.grad) n.grad = Tensor(n.value.shape());
    return &*n.grad;
  }

  void backward(Var root) {
    if (value(root).size() != 1) throw DimensionError("backward: root must be a scalar");
    for (auto& n : nodes_) n.grad.reset();
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = Tensor::filled(nodes_[root.id].value.shape(), 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && n.grad) n.backward(*this, *n.grad);
    }
  }

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    Backward backward;
    std::optional<Tensor> grad;
  };

  Var push(Tensor value, bool rg, Backward fn) {
    nodes_.push_back({std::move(value), rg, std::move(fn), std::nullopt});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace ad {

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.record(seqtr::matmul(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, const Tensor& g) {
                    if (t.requires_grad(a)) t.accumulate(a, seqtr::matmul(g, transpose(b.value())));
                    if (t.requires_grad(b)) t.accumulate(b, seqtr::matmul(transpose(a.value()), g));
                  });
}

inline Var transpose(Var a) {
  return a.tape->record(seqtr::transpose(a.value()), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, seqtr::transpose(g));
  });
}

inline Var add(Var a, Var b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  out *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    Tensor ga = g;
    ga *= s;
    t.accumulate(a, ga);
  });
}

/// a[m×n] + bias[n] broadcast over rows.
inline Var add_row_bias(Var a, Var bias) {
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.value().size() != n)
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs rows of " +
                         shape_str(a.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bias.value()[j];
  return a.tape->record(std::move(out), {a, bias}, [a, bias, m, n](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (auto* gb = t.grad_buffer(bias))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g(i, j);
  });
}

inline Var reshape(Var a, Shape s) {
  const Shape original = a.shape();
  return a.tape->record(a.value().reshaped(std::move(s)), {a},
                        [a, original](Tape& t, const Tensor& g) {
                          t.accumulate(a, g.reshaped(original));
                        });
}

inline Var softmax_rows(Var x) {
  Tensor y = seqtr::softmax_rows(x.value());
  return x.tape->record(y, {x}, [x, y](Tape& t, const Tensor& g) {
    Tensor gx(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      const double s = dot(g.row(i), y.row(i));
      for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) = y(i, j) * (g(i, j) - s);
    }
    t.accumulate(x, gx);
  });
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.shape().back();
  const std::size_t slices = xv.size() / d;
  Tensor y = seqtr::layer_norm(xv, gamma.value(), beta.value(), eps);
  return x.tape->record(std::move(y), {x, gamma, beta},
                        [x, gamma, beta, eps, d, slices](Tape& t, const Tensor& g) {
                          const Tensor& xv = x.value();
                          const Tensor& gm = gamma.value();
                          Tensor* gx = t.grad_buffer(x);
                          Tensor* gg = t.grad_buffer(gamma);
                          Tensor* gb = t.grad_buffer(beta);
                          std::vector<double> xhat(d), dxhat(d);
                          for (std::size_t r = 0; r < slices; ++r) {
                            const double* in = &xv.data()[r * d];
                            const double* go = &g.data()[r * d];
                            double mean = 0.0;
                            for (std::size_t j = 0; j < d; ++j) mean += in[j];
                            mean /= static_cast<double>(d);
                            double var = 0.0;
                            for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
                            var /= static_cast<double>(d);
                            const double inv = 1.0 / std::sqrt(var + eps);
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                              xhat[j] = (in[j] - mean) * inv;
                              dxhat[j] = go[j] * gm[j];
                              m1 += dxhat[j];
                              m2 += dxhat[j] * xhat[j];
                              if (gg) (*gg)[j] += go[j] * xhat[j];
                              if (gb) (*gb)[j] += go[j];
                            }
                            if (!gx) continue;
                            m1 /= static_cast<double>(d);
                            m2 /= static_cast<double>(d);
                            double* out = &gx->data()[r * d];
                            for (std::size_t j = 0; j < d; ++j)
                              out[j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                          }
                        });
}

inline Var l2_normalize_rows(Var x) {
  Tensor y = seqtr::l2_normalize_rows(x.value());
  return x.tape->record(y, {x}, [x, y](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      const double n = norm(xv.row(i));
      if (n <= kNormFloor) continue;
      const double yg = dot(y.row(i), g.row(i));
      for (std::size_t j = 0; j < xv.cols(); ++j) gx(i, j) = (g(i, j) - y(i, j) * yg) / n;
    }
    t.accumulate(x, gx);
  });
}

inline Var slice_cols(Var x, std::size_t start, std::size_t len) {
  const std::size_t m = x.rows(), n = x.cols();
  if (start + len > n || len == 0)
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(len) +
                         ") out of " + shape_str(x.shape()));
  Tensor out({m, len});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) out(i, j) = x.value()(i, start + j);
  return x.tape->record(std::move(out), {x}, [x, start, len, m](Tape& t, const Tensor& g) {
    if (auto* gx = t.grad_buffer(x))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) (*gx)(i, start + j) += g(i, j);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
    n += p.cols();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
  }
  return parts.front().tape->record(std::move(out), parts, [parts, m](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t w = p.cols();
      if (auto* gp = t.grad_buffer(p))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) (*gp)(i, j) += g(i, off + j);
      off += w;
    }
  });
}

inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
  const std::size_t n = x.cols();
  Tensor out({idx.size(), n});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.rows()) throw DimensionError("gather_rows: row index out of range");
    for (std::size_t j = 0; j < n; ++j) out(r, j) = x.value()(idx[r], j);
  }
  return x.tape->record(std::move(out), {x}, [x, idx, n](Tape& t, const Tensor& g) {
    if (auto* gx = t.grad_buffer(x))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) (*gx)(idx[r], j) += g(r, j);
  });
}

/// x is [N·H × D] where row n·H+h holds head h's projection of query n.
/// Returns [N × D] taking head h's own column block (width D/H) from each row.
inline Var select_head_blocks(Var x, std::size_t heads) {
  const std::size_t rows = x.rows(), width = x.cols();
  if (heads == 0 || rows % heads != 0 || width % heads != 0)
    throw DimensionError("select_head_blocks: " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(heads) + " heads");
  const std::size_t n = rows / heads, block = width / heads;
  Tensor out({n, width});
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < block; ++j)
        out(q, h * block + j) = x.value()(q * heads + h, h * block + j);
  return x.tape->record(std::move(out), {x}, [x, n, heads, block](Tape& t, const Tensor& g) {
    if (auto* gx = t.grad_buffer(x))
      for (std::size_t q = 0; q < n; ++q)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < block; ++j)
            (*gx)(q * heads + h, h * block + j) += g(q, h * block + j);
  });
}

/// values [R·G × C], weights [R × G] → out[r] = Σ_g weights[r,g] · values[r·G+g].
inline Var group_weighted_sum(Var values, Var weights) {
  const std::size_t r_count = weights.rows(), group = weights.cols(), c = values.cols();
  if (values.rows() != r_count * group)
    throw DimensionError("group_weighted_sum: values " + shape_str(values.shape()) +
                         " vs weights " + shape_str(weights.shape()));
  Tensor out({r_count, c});
  const Tensor& v = values.value();
  const Tensor& w = weights.value();
  for (std::size_t r = 0; r < r_count; ++r)
    for (std::size_t g = 0; g < group; ++g) {
      const double wg = w(r, g);
      for (std::size_t j = 0; j < c; ++j) out(r, j) += wg * v(r * group + g, j);
    }
  return values.tape->record(
      std::move(out), {values, weights}, [values, weights, r_count, group, c](Tape& t, const Tensor& go) {
        const Tensor& v = values.value();
        const Tensor& w = weights.value();
        Tensor* gv = t.grad_buffer(values);
        Tensor* gw = t.grad_buffer(weights);
        for (std::size_t r = 0; r < r_count; ++r)
          for (std::size_t g = 0; g < group; ++g) {
            const std::size_t row = r * group + g;
            if (gv)
              for (std::size_t j = 0; j < c; ++j) (*gv)(row, j) += w(r, g) * go(r, j);
            if (gw) (*gw)(r, g) += dot(v.row(row), go.row(r));
          }
      });
}

/// Bilinear lookups of points [P×2] (pixel x, y) into maps[levels[p]] (each
/// C×H×W). Returns [P×C]; gradients reach the maps and the coordinates.
inline Var sample_points(const std::vector<Var>& maps, Var points, std::vector<std::size_t> levels) {
  if (maps.empty()) throw DimensionError("sample_points: no feature maps");
  const std::size_t p_count = points.rows();
  if (points.cols() != 2 || levels.size() != p_count)
    throw DimensionError("sample_points: points must be [P×2] with one level per point");
  const std::size_t c = maps.front().value().dim(0);
  for (const auto& m : maps) {
    m.value().require_ndim(3);
    if (m.value().dim(0) != c) throw DimensionError("sample_points: channel count differs across levels");
  }
  Tensor out({p_count, c});
  const Tensor& pts = points.value();
  for (std::size_t p = 0; p < p_count; ++p) {
    if (levels[p] >= maps.size()) throw DimensionError("sample_points: level out of range");
    const Tensor s = bilinear_sample(maps[levels[p]].value(), pts(p, 0), pts(p, 1));
    for (std::size_t j = 0; j < c; ++j) out(p, j) = s[j];
  }
  std::vector<Var> parents = maps;
  parents.push_back(points);
  return points.tape->record(std::move(out), parents, [maps, points, levels, c](Tape& t, const Tensor& g) {
    const Tensor& pts = points.value();
    Tensor* gp = t.grad_buffer(points);
    for (std::size_t p = 0; p < levels.size(); ++p) {
      const Tensor& map = maps[levels[p]].value();
      const std::size_t h = map.dim(1), w = map.dim(2);
      if (!std::isfinite(pts(p, 0)) || !std::isfinite(pts(p, 1))) continue;
      const auto taps = BilinearTaps::at(pts(p, 0), pts(p, 1));
      Tensor* gm = t.grad_buffer(maps[levels[p]]);
      for (int k = 0; k < 4; ++k) {
        if (!taps.valid(k, h, w)) continue;
        const auto px = static_cast<std::size_t>(taps.cx(k));
        const auto py = static_cast<std::size_t>(taps.cy(k));
        const double wk = taps.weight(k);
        double vg = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          vg += map(ch, py, px) * g(p, ch);
          if (gm) (*gm)(ch, py, px) += wk * g(p, ch);
        }
        if (gp) {
          (*gp)(p, 0) += taps.dweight_dx(k) * vg;
          (*gp)(p, 1) += taps.dweight_dy(k) * vg;
        }
      }
    }
  });
}

inline Var sum(Var x) {
  return x.tape->record(Tensor::scalar(x.value().sum()), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, Tensor::filled(x.shape(), g[0]));
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Σ_i weights[i] · scalars[i] over 1-element inputs.
inline Var linear_combination(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.empty() || scalars.size() != weights.size())
    throw DimensionError("linear_combination: need one weight per scalar");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].value().size() != 1) throw DimensionError("linear_combination: non-scalar input");
    s += weights[i] * scalars[i].value()[0];
  }
  return scalars.front().tape->record(Tensor::scalar(s), scalars, [scalars, weights](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < scalars.size(); ++i)
      t.accumulate(scalars[i], Tensor::scalar(weights[i] * g[0]));
  });
}

/// Mean over rows of (1 − p_t)^γ · (−log p_t), p_t = softmax(logits[i])[target[i]].
/// γ = 0 is plain cross-entropy.
inline Var focal_softmax_nll(Var logits, std::vector<std::size_t> targets, double gamma) {
  const std::size_t b = logits.rows(), c = logits.cols();
  if (targets.size() != b) throw DimensionError("focal_softmax_nll: one target per row required");
  const Tensor& z = logits.value();
  Tensor probs = seqtr::softmax_rows(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] >= c) throw DimensionError("focal_softmax_nll: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z.row(i)) mx = std::max(mx, v);
    double lse = 0.0;
    for (double v : z.row(i)) lse += std::exp(v - mx);
    const double logp = z(i, targets[i]) - mx - std::log(lse);
    const double p = probs(i, targets[i]);
    loss += (gamma == 0.0 ? 1.0 : std::pow(1.0 - p, gamma)) * -logp;
  }
  loss /= static_cast<double>(b);
  return logits.tape->record(
      Tensor::scalar(loss), {logits}, [logits, targets, gamma, probs, b, c](Tape& t, const Tensor& g) {
        Tensor gz({b, c});
        for (std::size_t i = 0; i < b; ++i) {
          const std::size_t ti = targets[i];
          const double p = probs(i, ti);
          const double logp = std::log(std::max(p, std::numeric_limits<double>::min()));
          // dL/dz_j = dL/dp · p · (δ_tj − s_j)
          double dl_dp_times_p;
          if (gamma == 0.0) {
            dl_dp_times_p = -1.0;
          } else {
            const double one_m = 1.0 - p;
            const double mod = std::pow(one_m, gamma);
            const double dmod = one_m > 0.0 ? gamma * std::pow(one_m, gamma - 1.0) : 0.0;
            dl_dp_times_p = (dmod * logp) * p - mod;
          }
          for (std::size_t j = 0; j < c; ++j)
            gz(i, j) = g[0] / static_cast<double>(b) * dl_dp_times_p *
                       ((j == ti ? 1.0 : 0.0) - probs(i, j));
        }
        t.accumulate(logits, gz);
      });
}

/// Inverted dropout; identity when rate is 0.
template <class Rng>
inline Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(x, x.tape->constant(std::move(mask)));
}

}  // namespace ad
}  // namespace seqtr

#endif  // SEQTR_AUTOGRAD_HPP
