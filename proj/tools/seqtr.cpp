// SPDX-License-Identifier: Apache-2.0
//
// seqtr command-line entry point.

#include <CLI11.hpp>

#include "seqtr/commands.hpp"

int main(int argc, char** argv) {
  using namespace seqtr;
  CLI::App app{"Sequential re-ID transformer on synthetic person-search scenes"};
  app.require_subcommand(1);

  CommandOptions opt;
  std::string sizes;
  std::uint64_t seed = 0;
  std::size_t k1 = 0, k2 = 0;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", opt.config, "JSON run configuration");
    c->add_option("--seed", seed, "override the command's seed");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  common(gen);
  gen->add_option("--out", opt.out, "dataset directory")->required();

  auto* train = app.add_subcommand("train", "train the re-ID branch");
  common(train);
  train->add_option("--data", opt.data, "dataset directory");
  train->add_option("--out", opt.out, "run directory (checkpoint/ and loss_curve.csv)")->required();

  auto add_eval = [&](CLI::App* c) {
    common(c);
    c->add_option("--checkpoint", opt.checkpoint, "checkpoint directory")->required();
    c->add_option("--data", opt.data, "dataset directory");
    c->add_option("--out", opt.out, "output directory (results.csv, summary.json)")->required();
    c->add_flag("--cbgm", opt.cbgm, "re-rank with context bipartite graph matching");
    c->add_option("--gallery-sizes", sizes, "comma-separated gallery sizes");
    c->add_option("--k1", k1, "CBGM: candidate scenes kept per query");
    c->add_option("--k2", k2, "CBGM: context persons matched per scene");
  };
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_eval(eval);
  auto* sweep = app.add_subcommand("sweep", "evaluate over gallery sizes");
  add_eval(sweep);

  auto* grad = app.add_subcommand("gradcheck", "compare analytic and numeric gradients");
  common(grad);

  auto* bench = app.add_subcommand("bench", "time forward passes per scheme");
  common(bench);
  bench->add_option("--out", opt.out, "directory for bench.csv");

  CLI11_PARSE(app, argc, argv);

  for (CLI::App* c : app.get_subcommands()) {
    if (c->count("--seed")) opt.seed = seed;
    if (c->get_option_no_throw("--k1") && c->count("--k1")) opt.k1 = k1;
    if (c->get_option_no_throw("--k2") && c->count("--k2")) opt.k2 = k2;
    if (c->get_option_no_throw("--gallery-sizes") && c->count("--gallery-sizes")) {
      const int rc = guarded({}, [&] {
        opt.gallery_sizes = parse_size_list(sizes);
        return 0;
      });
      if (rc != 0) return rc;
    }
  }

  if (*gen) return cmd_gen_data(opt);
  if (*train) return cmd_train(opt);
  if (*eval) return cmd_eval(opt, false);
  if (*sweep) return cmd_eval(opt, true);
  if (*grad) return cmd_gradcheck(opt);
  if (*bench) return cmd_bench(opt);
  return kExitConfig;
}
