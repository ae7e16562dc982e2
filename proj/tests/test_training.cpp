#include <gtest/gtest.h>

#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "seqtr/checkpoint.hpp"
#include "seqtr/training.hpp"

using namespace seqtr;
namespace fs = std::filesystem;

namespace {

RunConfig toy_config() {
  RunConfig c;
  c.model.width = 8;
  c.model.heads = 2;
  c.model.points = 2;
  c.model.queries = 4;
  c.model.layers = 1;
  c.model.cross_layers = 2;
  c.loss.identities = 6;
  c.loss.queue = 4;
  auto& b = c.data.benchmark;
  b.num_train = 30;
  b.num_gallery = 12;
  b.num_queries = 6;
  b.labeled_identities = 6;
  b.unlabeled_identities = 2;
  b.test_identities = 6;
  b.persons_per_scene = 2;
  b.channels = 8;
  b.image_size = 128;
  c.optimizer.steps = 200;
  c.validate();
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("seqtr_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

std::string curve_text(const TrainResult& r) {
  std::ostringstream os;
  write_loss_curve(r.curve, os);
  return os.str();
}

}  // namespace

TEST(Optimizer, SgdStep) {
  OptimizerConfig oc;
  oc.step_size = 0.5;
  Tensor p = Tensor::vector({1, 2});
  std::vector<Tensor> g{Tensor::vector({2, -2})};
  Optimizer opt(oc, {&p});
  opt.step({&p}, g);
  EXPECT_EQ(p[0], 0.0);
  EXPECT_EQ(p[1], 3.0);
}

TEST(Optimizer, ClipNormScalesGradient) {
  OptimizerConfig oc;
  oc.step_size = 1.0;
  oc.clip_norm = 1.0;
  Tensor p = Tensor::vector({0, 0});
  std::vector<Tensor> g{Tensor::vector({3, 4})};
  Optimizer opt(oc, {&p});
  opt.step({&p}, g);
  EXPECT_NEAR(p[0], -0.6, 1e-15);
  EXPECT_NEAR(p[1], -0.8, 1e-15);
}

TEST(Optimizer, AdamMinimizesQuadratic) {
  OptimizerConfig oc;
  oc.kind = OptimizerKind::adam;
  oc.step_size = 0.05;
  Tensor p = Tensor::vector({3, -2});
  Optimizer opt(oc, {&p});
  for (int i = 0; i < 500; ++i) {
    std::vector<Tensor> g{Tensor::vector({2 * p[0], 2 * p[1]})};
    opt.step({&p}, g);
  }
  EXPECT_LT(std::abs(p[0]) + std::abs(p[1]), 0.05);
}

TEST(SlotLabels, FollowAssignment) {
  const IdentityBank bank = IdentityBank::make(3, 1, 0, 4, 1);
  const std::vector<ScenePerson> persons{{{0.1, 0.1, 0.3, 0.5}, 2, 2}, {{0.6, 0.1, 0.8, 0.5}, 3, -1}};
  const Scene scene = render_scene(bank, persons, RenderConfig{64, 0.0}, 2);
  const DetectionSet det = detect_scene(scene, 4, 0.0, 3);
  const auto labels = slot_labels(det, scene);
  EXPECT_EQ(labels[0], IdLabel::labeled(2));
  EXPECT_EQ(labels[1], IdLabel::unlabeled());
  EXPECT_EQ(labels[2], IdLabel::background());
  EXPECT_EQ(labels[3], IdLabel::background());
}

TEST(Train, ZeroStepsRecordsInitialLossOnly) {
  RunConfig cfg = toy_config();
  cfg.optimizer.steps = 0;
  const Benchmark data = make_benchmark(cfg.data.benchmark, cfg.data.seed);
  ReIDParams params = init_reid_params(cfg.model, cfg.optimizer.seed);
  const ReIDParams initial = params;
  auto states = make_oim_states(cfg);
  const auto res = train(cfg, data, params, states);
  ASSERT_EQ(res.curve.size(), 1u);
  EXPECT_EQ(res.curve[0].step, 0u);
  EXPECT_GT(res.curve[0].total, 0.0);
  EXPECT_EQ(params.queries.values(), initial.queries.values());
  const std::string text = curve_text(res);
  EXPECT_EQ(text.substr(0, text.find('\n')), "step,total,cls,iou,l1,oim");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
}

TEST(Train, LossDecreasesOnToyBenchmark) {
  RunConfig cfg = toy_config();
  const Benchmark data = make_benchmark(cfg.data.benchmark, cfg.data.seed);
  ReIDParams params = init_reid_params(cfg.model, cfg.optimizer.seed);
  auto states = make_oim_states(cfg);
  const auto res = train(cfg, data, params, states);
  ASSERT_EQ(res.curve.size(), cfg.optimizer.steps + 1);
  auto window_mean = [&](std::size_t from, std::size_t n) {
    double s = 0;
    for (std::size_t i = from; i < from + n; ++i) s += res.curve[i].total;
    return s / double(n);
  };
  EXPECT_LT(window_mean(res.curve.size() - 30, 30), window_mean(0, 30));
  EXPECT_LT(res.curve.back().total, res.curve.front().total);
  // detection terms are constants of the stub, so only the identity term moves
  for (const auto& r : res.curve) EXPECT_NEAR(r.total, 2 * r.cls + 5 * r.iou + 2 * r.l1 + 0.5 * r.oim, 1e-12);
}

TEST(Train, SameSeedSameCurve) {
  RunConfig cfg = toy_config();
  cfg.optimizer.steps = 25;
  const Benchmark data = make_benchmark(cfg.data.benchmark, cfg.data.seed);
  auto run = [&] {
    ReIDParams params = init_reid_params(cfg.model, cfg.optimizer.seed);
    auto states = make_oim_states(cfg);
    return curve_text(train(cfg, data, params, states));
  };
  const std::string a = run();
  EXPECT_EQ(a, run());
  cfg.optimizer.seed += 1;
  EXPECT_NE(a, run());
}

TEST(Train, EverySchemeAndAblationTrains) {
  for (Scheme s : {Scheme::shared, Scheme::parallel, Scheme::multi_scale_d, Scheme::multi_scale_3d})
    for (bool self_attn : {true, false}) {
      RunConfig cfg = toy_config();
      cfg.model.scheme = s;
      cfg.model.layers = 2;
      cfg.model.self_attention = self_attn;
      cfg.optimizer.steps = 5;
      const Benchmark data = make_benchmark(cfg.data.benchmark, cfg.data.seed);
      ReIDParams params = init_reid_params(cfg.model, cfg.optimizer.seed);
      auto states = make_oim_states(cfg);
      const auto res = train(cfg, data, params, states);
      EXPECT_EQ(res.curve.size(), 6u);
      for (const auto& r : res.curve) EXPECT_TRUE(std::isfinite(r.total));
    }
}

TEST(Train, DivergenceIsNumericError) {
  RunConfig cfg = toy_config();
  cfg.optimizer.step_size = 1e200;
  cfg.optimizer.steps = 20;
  const Benchmark data = make_benchmark(cfg.data.benchmark, cfg.data.seed);
  ReIDParams params = init_reid_params(cfg.model, cfg.optimizer.seed);
  auto states = make_oim_states(cfg);
  EXPECT_THROW(train(cfg, data, params, states), NumericError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  RunConfig cfg = toy_config();
  cfg.model.scheme = Scheme::parallel;
  cfg.optimizer.steps = 10;
  const Benchmark data = make_benchmark(cfg.data.benchmark, cfg.data.seed);
  Checkpoint ck{cfg, init_reid_params(cfg.model, 3), make_oim_states(cfg), 10};
  train(cfg, data, ck.params, ck.oim);
  ASSERT_GT(ck.oim[0].queue_size(), 0u);
  const fs::path dir = temp_dir("ck");
  save_checkpoint(ck, dir);
  const Checkpoint back = load_checkpoint(dir);
  EXPECT_EQ(back.step, ck.step);
  EXPECT_EQ(run_config_json(back.config), run_config_json(ck.config));
  ReIDParams a = ck.params, b = back.params;
  const auto ta = a.tensors(), tb = b.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(same_bits(*ta[i], *tb[i]));
  ASSERT_EQ(back.oim.size(), ck.oim.size());
  for (std::size_t i = 0; i < ck.oim.size(); ++i) {
    EXPECT_TRUE(same_bits(back.oim[i].bank(), ck.oim[i].bank()));
    EXPECT_EQ(back.oim[i].queue_capacity(), ck.oim[i].queue_capacity());
  }
  // saving the loaded checkpoint reproduces every file byte for byte
  const fs::path again = temp_dir("ck2");
  save_checkpoint(back, again);
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) {
      EXPECT_EQ(read_text(e.path()), read_text(again / fs::relative(e.path(), dir)));
    }
  }
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST(Checkpoint, MissingDirectoryIsIoError) { EXPECT_THROW(load_checkpoint(temp_dir("none")), IoError); }

TEST(Evaluation, UntrainedAndTrainedPipelineRuns) {
  RunConfig cfg = toy_config();
  cfg.eval.gallery_sizes = {4, 8};
  const Benchmark data = make_benchmark(cfg.data.benchmark, cfg.data.seed);
  const ReIDParams params = init_reid_params(cfg.model, cfg.optimizer.seed);
  const EvalSet es = build_eval_set(params, cfg, data);
  EXPECT_EQ(es.queries.size(), cfg.data.benchmark.num_queries);
  for (const auto& g : es.gallery) EXPECT_GE(g.score, cfg.eval.score_threshold);
  const EvalReport rep = run_evaluation(es, cfg.eval);
  EXPECT_EQ(rep.curve.size(), 2u);
  const json s = summary_json(rep, cfg);
  EXPECT_EQ(s.at("curves").size(), 2u);
  EXPECT_TRUE(s.contains("mAP"));
  EXPECT_GE(rep.main.mAP, 0.0);
  EXPECT_LE(rep.main.mAP, 1.0);
}
