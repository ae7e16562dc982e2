// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the seqtr executable. Every command returns
// a process exit code: 0 ok, 1 config/dimension, 2 I/O, 3 numeric,
// 4 gradient check failure.

#ifndef SEQTR_COMMANDS_HPP
#define SEQTR_COMMANDS_HPP

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "seqtr/gradcheck_suite.hpp"
#include "seqtr/training.hpp"

namespace seqtr {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitIo = 2, kExitNumeric = 3, kExitGradcheck = 4 };

struct CommandOptions {
  std::string config;      // --config
  std::string data;        // --data
  std::string out;         // --out
  std::string checkpoint;  // --checkpoint
  std::optional<std::uint64_t> seed;
  bool cbgm = false;
  std::optional<std::vector<std::size_t>> gallery_sizes;
  std::optional<std::size_t> k1, k2;
};

struct CommandIo {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

/// Parses "10,50,100".
inline std::vector<std::size_t> parse_size_list(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("gallery sizes must be a comma-separated list of positive integers, got '" + csv + "'");
    out.push_back(std::stoull(item));
    if (out.back() == 0) throw ConfigError("gallery sizes must be positive");
  }
  if (out.empty()) throw ConfigError("empty gallery size list");
  return out;
}

/// Maps library exceptions onto exit codes.
template <class F>
int guarded(CommandIo io, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    io.err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DimensionError& e) {
    io.err << "dimension error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    io.err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    io.err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const json::exception& e) {
    io.err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
}

namespace detail {

inline RunConfig resolve_config(const CommandOptions& o, const RunConfig& fallback = {}) {
  RunConfig cfg = o.config.empty() ? fallback : load_run_config(o.config);
  if (!o.data.empty()) cfg.data.path = o.data;
  return cfg;
}

inline std::filesystem::path require_dir(const std::string& value, const std::string& what) {
  if (value.empty()) throw ConfigError(what + " is required");
  return value;
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

/// The dataset must have been generated for this model's channel count.
inline void check_data_matches(const Benchmark& b, const RunConfig& cfg) {
  if (b.config.channels != cfg.model.width)
    throw DimensionError("dataset has " + std::to_string(b.config.channels) + " channels but the model expects d=" +
                         std::to_string(cfg.model.width));
  if (b.config.persons_per_scene > cfg.model.queries)
    throw DimensionError("dataset scenes hold more persons than the model has queries");
  if (b.config.labeled_identities > cfg.loss.identities)
    throw DimensionError("dataset has more labeled identities than the OIM lookup table");
}

}  // namespace detail

/// gen-data: generates the synthetic benchmark into --out.
inline int cmd_gen_data(const CommandOptions& o, CommandIo io = {}) {
  return guarded(io, [&] {
    RunConfig cfg = detail::resolve_config(o);
    if (o.seed) cfg.data.seed = *o.seed;
    cfg.data.benchmark.validate();
    const auto out = detail::require_dir(o.out, "--out");
    const Benchmark b = make_benchmark(cfg.data.benchmark, cfg.data.seed);
    save_benchmark(b, out);
    io.out << "wrote " << b.scenes.size() << " scenes (" << b.index.train.size() << " train, "
           << b.index.gallery.size() << " gallery, " << b.index.queries.size() << " queries) to " << out.string()
           << '\n';
    return int(kExitOk);
  });
}

/// train: fits the re-ID branch on the training split and writes
/// <out>/checkpoint plus <out>/loss_curve.csv.
inline int cmd_train(const CommandOptions& o, CommandIo io = {}) {
  return guarded(io, [&] {
    RunConfig cfg = detail::resolve_config(o);
    if (o.seed) cfg.optimizer.seed = *o.seed;
    cfg.validate();
    const auto out = detail::require_dir(o.out, "--out");
    const Benchmark data = load_benchmark(detail::require_dir(cfg.data.path, "--data (or data.path)"));
    detail::check_data_matches(data, cfg);
    detail::ensure_dir(out);

    Checkpoint ck{cfg, init_reid_params(cfg.model, cfg.optimizer.seed), make_oim_states(cfg), 0};
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult res = train(cfg, data, ck.params, ck.oim);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ck.step = cfg.optimizer.steps;

    std::ostringstream curve;
    write_loss_curve(res.curve, curve);
    write_text(out / "loss_curve.csv", curve.str());
    save_checkpoint(ck, out / "checkpoint");
    io.out << "trained " << cfg.optimizer.steps << " steps in " << secs << " s; loss " << res.curve.front().total
           << " -> " << res.curve.back().total << '\n';
    return int(kExitOk);
  });
}

/// eval / sweep: ranks the gallery for every query with a stored checkpoint
/// and writes <out>/results.csv and <out>/summary.json.
inline int cmd_eval(const CommandOptions& o, bool sweep = false, CommandIo io = {}) {
  return guarded(io, [&] {
    const auto out = detail::require_dir(o.out, "--out");
    Checkpoint ck = load_checkpoint(detail::require_dir(o.checkpoint, "--checkpoint"));
    RunConfig cfg = ck.config;
    if (!o.config.empty()) {
      const RunConfig override_cfg = load_run_config(o.config);
      if (model_config_json(override_cfg.model) != model_config_json(cfg.model))
        throw DimensionError("--config model section disagrees with the checkpoint (scheme or shape mismatch)");
      cfg.eval = override_cfg.eval;
      cfg.data = override_cfg.data;
    }
    if (!o.data.empty()) cfg.data.path = o.data;
    if (o.seed) cfg.eval.seed = *o.seed;
    if (o.cbgm) cfg.eval.cbgm = true;
    if (o.gallery_sizes) cfg.eval.gallery_sizes = *o.gallery_sizes;
    if (o.k1) cfg.eval.k1 = *o.k1;
    if (o.k2) cfg.eval.k2 = *o.k2;
    if (sweep && cfg.eval.gallery_sizes.empty()) throw ConfigError("sweep needs --gallery-sizes");
    cfg.validate();

    const Benchmark data = load_benchmark(detail::require_dir(cfg.data.path, "--data (or data.path)"));
    detail::check_data_matches(data, cfg);
    detail::ensure_dir(out);

    const EvalSet es = build_eval_set(ck.params, cfg, data);
    const EvalReport rep = run_evaluation(es, cfg.eval);
    std::ostringstream csv;
    write_results_csv(rep.main, csv);
    write_text(out / "results.csv", csv.str());
    write_text(out / "summary.json", summary_json(rep, cfg).dump(2) + "\n");
    io.out << "mAP " << rep.main.mAP << "  top-1 " << rep.main.top1 << "  top-5 " << rep.main.top5 << "  top-10 "
           << rep.main.top10 << "  (" << rep.main.queries.size() << " queries" << (cfg.eval.cbgm ? ", CBGM" : "")
           << ")\n";
    for (const auto& p : rep.curve) io.out << "  gallery " << p.size << ": mAP " << p.result.mAP << "  top-1 " << p.result.top1 << '\n';
    return int(kExitOk);
  });
}

/// gradcheck: analytic against central-difference gradients, block by block.
inline int cmd_gradcheck(const CommandOptions& o, CommandIo io = {}) {
  return guarded(io, [&] {
    RunConfig cfg = detail::resolve_config(o, default_gradcheck_config());
    if (o.seed) cfg.optimizer.seed = *o.seed;
    cfg.model.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const GradcheckReport rep = run_gradcheck_suite(cfg, &io.out);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io.out << "max relative error " << rep.max_error() << " over " << rep.blocks.size() << " blocks in " << secs
           << " s\n";
    if (rep.passed()) return int(kExitOk);
    for (const auto& b : rep.blocks)
      if (!b.passed())
        io.err << "gradcheck failed: block '" << b.name << "' max relative error " << b.result.max_rel_error
               << " >= " << b.tolerance << '\n';
    return int(kExitGradcheck);
  });
}

struct BenchRow {
  Scheme scheme;
  std::size_t transformer_parameters = 0;
  std::size_t total_parameters = 0;
  double ms_per_scene = 0.0;
};

/// Forward-pass timing per scheme on freshly rendered scenes.
inline std::vector<BenchRow> run_bench(const RunConfig& base, std::size_t scenes = 8, std::size_t repeats = 3) {
  BenchmarkConfig bc = base.data.benchmark;
  bc.channels = base.model.width;
  const IdentityBank bank = IdentityBank::make(bc.labeled_identities, 0, 0, bc.channels, mix_seed(base.data.seed, 3));
  std::mt19937_64 rng(mix_seed(base.data.seed, 5));
  std::vector<Scene> rendered;
  for (std::size_t s = 0; s < scenes; ++s) {
    const auto boxes = detail::layout_boxes(std::min(bc.persons_per_scene, base.model.queries), 0.0, rng);
    std::vector<ScenePerson> persons;
    for (std::size_t i = 0; i < boxes.size(); ++i) persons.push_back({boxes[i], i % bank.labeled, int(i % bank.labeled)});
    rendered.push_back(render_scene(bank, persons, {bc.image_size, bc.sigma_bg}, mix_seed(base.data.seed, 100 + s), s));
  }
  std::vector<BenchRow> rows;
  for (Scheme scheme : {Scheme::shared, Scheme::parallel, Scheme::multi_scale_3d}) {
    ReIDConfig mc = base.model;
    mc.scheme = scheme;
    mc.dropout = 0.0;
    const ReIDParams p = init_reid_params(mc, base.optimizer.seed);
    std::vector<DetectionSet> dets;
    for (const auto& sc : rendered) dets.push_back(jitter_detect(sc.boxes(), mc.queries, 0.02, mix_seed(base.data.seed, sc.id)));
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t s = 0; s < rendered.size(); ++s) (void)embed_scene(p, mc, rendered[s], dets[s]);
      best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    rows.push_back({scheme, p.transformer_parameter_count(), p.parameter_count(), best / double(rendered.size())});
  }
  return rows;
}

inline void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& os) {
  os << "scheme,transformer_params,total_params,ms_per_scene,time_ratio_to_shared\n";
  for (const auto& r : rows)
    os << scheme_name(r.scheme) << ',' << r.transformer_parameters << ',' << r.total_parameters << ','
       << r.ms_per_scene << ',' << r.ms_per_scene / rows.front().ms_per_scene << '\n';
}

/// bench: prints the timing table; also writes <out>/bench.csv when --out is given.
inline int cmd_bench(const CommandOptions& o, CommandIo io = {}) {
  return guarded(io, [&] {
    RunConfig cfg = detail::resolve_config(o);
    if (o.seed) cfg.data.seed = *o.seed;
    cfg.model.validate();
    std::ostringstream csv;
    write_bench_csv(run_bench(cfg), csv);
    io.out << csv.str();
    if (!o.out.empty()) {
      detail::ensure_dir(o.out);
      write_text(std::filesystem::path(o.out) / "bench.csv", csv.str());
    }
    return int(kExitOk);
  });
}

}  // namespace seqtr

#endif  // SEQTR_COMMANDS_HPP
