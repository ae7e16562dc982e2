// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: JSON with strict key checking. Missing keys keep their
// defaults; unknown keys are an error.

#ifndef SEQTR_CONFIG_HPP
#define SEQTR_CONFIG_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "seqtr/losses.hpp"
#include "seqtr/reid_transformer.hpp"
#include "seqtr/synth_data.hpp"

namespace seqtr {

struct LossConfig {
  LossWeights weights;
  double temperature = 1.0 / 30.0;
  double momentum = 0.5;
  double focal_gamma = 2.0;    // Focal OIM γ
  std::size_t identities = 16; // L
  std::size_t queue = 32;      // U
  double cls_gamma = 2.0;
  double cls_alpha = 0.25;
};

enum class OptimizerKind { sgd, momentum, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double step_size = 0.05;
  std::size_t steps = 1000;
  std::uint64_t seed = 7;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 0.0;  // 0 disables clipping
  std::size_t scenes_per_step = 1;
};

struct DataConfig {
  std::string path;  // dataset directory; --data overrides
  BenchmarkConfig benchmark;
  std::uint64_t seed = 1;
  double detector_noise = 0.02;
};

struct EvalConfig {
  double iou_threshold = kDefaultIouThreshold;
  std::vector<std::size_t> gallery_sizes;
  bool cbgm = false;
  std::size_t k1 = 30;
  std::size_t k2 = 3;
  double score_threshold = 0.5;  // detections below this are not gallery entries
  std::uint64_t seed = 11;
};

struct GradcheckConfig {
  double step = 1e-6;
  double tolerance = 1e-4;
  double primitive_tolerance = 1e-6;
  std::string corrupt_block;  // test hook: scales that block's analytic gradient
};

struct RunConfig {
  ReIDConfig model;
  LossConfig loss;
  OptimizerConfig optimizer;
  DataConfig data;
  EvalConfig eval;
  GradcheckConfig gradcheck;

  void validate() const {
    model.validate();
    loss.weights.validate();
    if (!(loss.temperature > 0)) throw ConfigError("loss.tau must be positive");
    if (loss.momentum < 0 || loss.momentum > 1) throw ConfigError("loss.momentum must lie in [0,1]");
    if (loss.focal_gamma < 0 || loss.cls_gamma < 0) throw ConfigError("focal gammas must be non-negative");
    if (loss.identities < 1) throw ConfigError("loss.L must be >= 1");
    if (!(optimizer.step_size > 0)) throw ConfigError("optimizer.step_size must be positive");
    if (optimizer.weight_decay < 0) throw ConfigError("optimizer.weight_decay must be non-negative");
    if (optimizer.scenes_per_step < 1) throw ConfigError("optimizer.scenes_per_step must be >= 1");
    data.benchmark.validate();
    if (data.detector_noise < 0) throw ConfigError("data.detector_noise must be non-negative");
    if (data.benchmark.channels != model.width)
      throw ConfigError("data.benchmark.channels must equal model.d");
    if (data.benchmark.persons_per_scene > model.queries)
      throw ConfigError("model.N must be at least data.benchmark.persons_per_scene");
    if (loss.identities < data.benchmark.labeled_identities)
      throw ConfigError("loss.L must cover the benchmark's labeled identities");
    if (eval.iou_threshold <= 0 || eval.iou_threshold > 1) throw ConfigError("eval.iou_threshold must lie in (0,1]");
    if (eval.k1 < 1) throw ConfigError("eval.k1 must be >= 1");
    if (!(gradcheck.step > 0)) throw ConfigError("gradcheck.h must be positive");
  }
};

namespace detail {

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

template <class F>
void for_keys(const json& section, const std::string& name, F&& f) {
  if (!section.is_object()) throw ConfigError("config section '" + name + "' must be an object");
  for (const auto& [k, v] : section.items())
    if (!f(k, v)) throw ConfigError("unknown config key '" + name + "." + k + "'");
}

inline std::string optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::momentum: return "momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

}  // namespace detail

inline void parse_model_section(const json& v, ReIDConfig& m) {
  using detail::get_as;
  detail::for_keys(v, "model", [&](const std::string& k, const json& x) {
    const std::string key = "model." + k;
    if (k == "d") m.width = get_as<std::size_t>(x, key);
    else if (k == "H") m.heads = get_as<std::size_t>(x, key);
    else if (k == "S") m.points = get_as<std::size_t>(x, key);
    else if (k == "M") m.layers = get_as<std::size_t>(x, key);
    else if (k == "K") m.cross_layers = get_as<std::size_t>(x, key);
    else if (k == "N") m.queries = get_as<std::size_t>(x, key);
    else if (k == "scheme") m.scheme = parse_scheme(get_as<std::string>(x, key));
    else if (k == "skip_first_self_attention") m.skip_first_self_attention = get_as<bool>(x, key);
    else if (k == "self_attention") m.self_attention = get_as<bool>(x, key);
    else if (k == "dropout") m.dropout = get_as<double>(x, key);
    else if (k == "average_samples") m.average_samples = get_as<bool>(x, key);
    else if (k == "reference_grad") m.reference_grad = get_as<bool>(x, key);
    else return false;
    return true;
  });
}

inline RunConfig run_config_from_json(const json& j) {
  using detail::get_as;
  RunConfig c;
  detail::for_keys(j, "<root>", [&](const std::string& sec, const json& v) {
    if (sec == "model") {
      parse_model_section(v, c.model);
    } else if (sec == "loss") {
      detail::for_keys(v, sec, [&](const std::string& k, const json& x) {
        const std::string key = sec + "." + k;
        auto& l = c.loss;
        if (k == "lambda") {
          const auto w = get_as<std::vector<double>>(x, key);
          if (w.size() != 4) throw ConfigError("loss.lambda must have four entries");
          l.weights = {w[0], w[1], w[2], w[3]};
        } else if (k == "tau") l.temperature = get_as<double>(x, key);
        else if (k == "momentum") l.momentum = get_as<double>(x, key);
        else if (k == "gamma") l.focal_gamma = get_as<double>(x, key);
        else if (k == "L") l.identities = get_as<std::size_t>(x, key);
        else if (k == "U") l.queue = get_as<std::size_t>(x, key);
        else if (k == "cls_gamma") l.cls_gamma = get_as<double>(x, key);
        else if (k == "cls_alpha") l.cls_alpha = get_as<double>(x, key);
        else return false;
        return true;
      });
    } else if (sec == "optimizer") {
      detail::for_keys(v, sec, [&](const std::string& k, const json& x) {
        const std::string key = sec + "." + k;
        auto& o = c.optimizer;
        if (k == "type") {
          const auto s = get_as<std::string>(x, key);
          if (s == "sgd") o.kind = OptimizerKind::sgd;
          else if (s == "momentum") o.kind = OptimizerKind::momentum;
          else if (s == "adam") o.kind = OptimizerKind::adam;
          else throw ConfigError("optimizer.type must be sgd, momentum or adam");
        } else if (k == "step_size") o.step_size = get_as<double>(x, key);
        else if (k == "steps") o.steps = get_as<std::size_t>(x, key);
        else if (k == "seed") o.seed = get_as<std::uint64_t>(x, key);
        else if (k == "weight_decay") o.weight_decay = get_as<double>(x, key);
        else if (k == "beta1") o.beta1 = get_as<double>(x, key);
        else if (k == "beta2") o.beta2 = get_as<double>(x, key);
        else if (k == "clip_norm") o.clip_norm = get_as<double>(x, key);
        else if (k == "scenes_per_step") o.scenes_per_step = get_as<std::size_t>(x, key);
        else return false;
        return true;
      });
    } else if (sec == "data") {
      detail::for_keys(v, sec, [&](const std::string& k, const json& x) {
        const std::string key = sec + "." + k;
        auto& d = c.data;
        if (k == "path") d.path = get_as<std::string>(x, key);
        else if (k == "benchmark") d.benchmark = benchmark_config_from_json(x);
        else if (k == "seed") d.seed = get_as<std::uint64_t>(x, key);
        else if (k == "detector_noise") d.detector_noise = get_as<double>(x, key);
        else return false;
        return true;
      });
    } else if (sec == "eval") {
      detail::for_keys(v, sec, [&](const std::string& k, const json& x) {
        const std::string key = sec + "." + k;
        auto& e = c.eval;
        if (k == "iou_threshold") e.iou_threshold = get_as<double>(x, key);
        else if (k == "gallery_sizes") e.gallery_sizes = get_as<std::vector<std::size_t>>(x, key);
        else if (k == "cbgm") e.cbgm = get_as<bool>(x, key);
        else if (k == "k1") e.k1 = get_as<std::size_t>(x, key);
        else if (k == "k2") e.k2 = get_as<std::size_t>(x, key);
        else if (k == "score_threshold") e.score_threshold = get_as<double>(x, key);
        else if (k == "seed") e.seed = get_as<std::uint64_t>(x, key);
        else return false;
        return true;
      });
    } else if (sec == "gradcheck") {
      detail::for_keys(v, sec, [&](const std::string& k, const json& x) {
        const std::string key = sec + "." + k;
        auto& g = c.gradcheck;
        if (k == "h") g.step = get_as<double>(x, key);
        else if (k == "tolerance") g.tolerance = get_as<double>(x, key);
        else if (k == "primitive_tolerance") g.primitive_tolerance = get_as<double>(x, key);
        else if (k == "corrupt_block") g.corrupt_block = get_as<std::string>(x, key);
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  c.validate();
  return c;
}

inline json model_config_json(const ReIDConfig& m) {
  return json{{"d", m.width},
              {"H", m.heads},
              {"S", m.points},
              {"M", m.layers},
              {"K", m.cross_layers},
              {"N", m.queries},
              {"scheme", std::string(scheme_name(m.scheme))},
              {"skip_first_self_attention", m.skip_first_self_attention},
              {"self_attention", m.self_attention},
              {"dropout", m.dropout},
              {"average_samples", m.average_samples},
              {"reference_grad", m.reference_grad}};
}

inline ReIDConfig model_config_from_json(const json& j) {
  ReIDConfig m;
  parse_model_section(j, m);
  m.validate();
  return m;
}

inline json run_config_json(const RunConfig& c) {
  const auto& l = c.loss;
  const auto& o = c.optimizer;
  return json{
      {"model", model_config_json(c.model)},
      {"loss",
       {{"lambda", {l.weights.cls, l.weights.iou, l.weights.l1, l.weights.oim}},
        {"tau", l.temperature},
        {"momentum", l.momentum},
        {"gamma", l.focal_gamma},
        {"L", l.identities},
        {"U", l.queue},
        {"cls_gamma", l.cls_gamma},
        {"cls_alpha", l.cls_alpha}}},
      {"optimizer",
       {{"type", detail::optimizer_name(o.kind)},
        {"step_size", o.step_size},
        {"steps", o.steps},
        {"seed", o.seed},
        {"weight_decay", o.weight_decay},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"clip_norm", o.clip_norm},
        {"scenes_per_step", o.scenes_per_step}}},
      {"data",
       {{"path", c.data.path},
        {"benchmark", benchmark_config_json(c.data.benchmark)},
        {"seed", c.data.seed},
        {"detector_noise", c.data.detector_noise}}},
      {"eval",
       {{"iou_threshold", c.eval.iou_threshold},
        {"gallery_sizes", c.eval.gallery_sizes},
        {"cbgm", c.eval.cbgm},
        {"k1", c.eval.k1},
        {"k2", c.eval.k2},
        {"score_threshold", c.eval.score_threshold},
        {"seed", c.eval.seed}}},
      {"gradcheck",
       {{"h", c.gradcheck.step},
        {"tolerance", c.gradcheck.tolerance},
        {"primitive_tolerance", c.gradcheck.primitive_tolerance},
        {"corrupt_block", c.gradcheck.corrupt_block}}}};
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace seqtr

#endif  // SEQTR_CONFIG_HPP
