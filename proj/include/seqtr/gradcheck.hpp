// SPDX-License-Identifier: Apache-2.0

#ifndef SEQTR_GRADCHECK_HPP
#define SEQTR_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "seqtr/autograd.hpp"

namespace seqtr {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// |a − n| / (|a| + |n| + 1e-12)
inline double gradcheck_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

/// Compares the tape gradient of a scalar graph against central differences
/// for every coordinate of every tensor in `params`. `build` must bind each
/// of them through Tape::param so that perturbations are seen.
inline GradcheckResult gradcheck_params(const std::function<Var(Tape&)>& build,
                                        const std::vector<Tensor*>& params, double h = 1e-6) {
  if (h <= 0.0) throw NumericError("gradcheck step must be positive");
  auto eval = [&] {
    Tape t;
    t.set_grad_enabled(false);
    const double v = build(t).value()[0];
    if (!std::isfinite(v)) throw NumericError("gradcheck: non-finite function value");
    return v;
  };

  std::vector<Tensor> analytic;
  {
    Tape t;
    Var out = build(t);
    if (!std::isfinite(out.value()[0])) throw NumericError("gradcheck: non-finite function value");
    t.backward(out);
    for (const Tensor* p : params) {
      auto g = t.param_grad(*p);
      analytic.push_back(g ? *g : Tensor(p->shape()));
    }
  }

  GradcheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + h;
      const double fp = eval();
      p[i] = orig - h;
      const double fm = eval();
      p[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = gradcheck_rel_error(analytic[k][i], numeric);
      ++res.coordinates;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_tensor = k;
        res.worst_index = i;
        res.worst_analytic = analytic[k][i];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

/// Directional form: for each of `trials` random unit directions v over all
/// of `params`, compares ∇f·v with (f(θ+hv) − f(θ−hv)) / 2h. Returns the
/// largest relative error. Less exposed to roundoff than the per-coordinate
/// check when individual partials are tiny.
inline double gradcheck_directional(const std::function<Var(Tape&)>& build, const std::vector<Tensor*>& params,
                                    double h, std::size_t trials, std::uint64_t seed) {
  if (h <= 0.0) throw NumericError("gradcheck step must be positive");
  auto eval = [&] {
    Tape t;
    t.set_grad_enabled(false);
    const double v = build(t).value()[0];
    if (!std::isfinite(v)) throw NumericError("gradcheck: non-finite function value");
    return v;
  };
  std::vector<Tensor> analytic;
  {
    Tape t;
    Var out = build(t);
    t.backward(out);
    for (const Tensor* p : params) {
      auto g = t.param_grad(*p);
      analytic.push_back(g ? *g : Tensor(p->shape()));
    }
  }
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::vector<Tensor> dir;
    double n2 = 0.0;
    for (const Tensor* p : params) {
      dir.push_back(Tensor::randn(p->shape(), rng));
      for (double x : dir.back().data()) n2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(n2);
    double directional = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
      dir[k] *= inv;
      for (std::size_t i = 0; i < dir[k].size(); ++i) directional += analytic[k][i] * dir[k][i];
    }
    auto shift = [&](double s) {
      for (std::size_t k = 0; k < params.size(); ++k)
        for (std::size_t i = 0; i < dir[k].size(); ++i) (*params[k])[i] += s * dir[k][i];
    };
    const std::vector<Tensor> saved = [&] {
      std::vector<Tensor> s;
      for (const Tensor* p : params) s.push_back(*p);
      return s;
    }();
    shift(h);
    const double fp = eval();
    for (std::size_t k = 0; k < params.size(); ++k) *params[k] = saved[k];
    shift(-h);
    const double fm = eval();
    for (std::size_t k = 0; k < params.size(); ++k) *params[k] = saved[k];
    worst = std::max(worst, gradcheck_rel_error(directional, (fp - fm) / (2.0 * h)));
  }
  return worst;
}

/// Single-input form: f maps a bound input to a scalar node.
inline double central_diff_gradcheck(const std::function<Var(Tape&, Var)>& f, Tensor x,
                                     double h = 1e-6) {
  return gradcheck_params([&](Tape& t) { return f(t, t.param(x)); }, {&x}, h).max_rel_error;
}

}  // namespace seqtr

#endif  // SEQTR_GRADCHECK_HPP
