#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "seqtr/gradcheck.hpp"
#include "seqtr/gradcheck_suite.hpp"
#include "seqtr/reid_transformer.hpp"

using namespace seqtr;

namespace {

std::vector<Tensor> random_pyramid(std::size_t channels, std::mt19937_64& rng) {
  return {Tensor::randn({channels, 32, 32}, rng), Tensor::randn({channels, 16, 16}, rng),
          Tensor::randn({channels, 8, 8}, rng)};
}

std::vector<ReferencePoint> random_refs(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<ReferencePoint> r;
  for (std::size_t i = 0; i < n; ++i) r.emplace_back(u(rng), u(rng));
  return r;
}

ReIDConfig small(Scheme s, std::size_t m = 2, std::size_t k = 2) {
  ReIDConfig c;
  c.scheme = s;
  c.layers = m;
  c.cross_layers = k;
  c.width = 8;
  c.heads = 2;
  c.points = 2;
  c.queries = 4;
  return c;
}

const Scheme kSchemes[] = {Scheme::shared, Scheme::parallel, Scheme::multi_scale_d, Scheme::multi_scale_3d};

}  // namespace

TEST(ReIDParams, ParallelHasThreeTimesSharedParameters) {
  for (std::size_t m = 1; m <= 3; ++m)
    for (std::size_t k = 1; k <= 3; ++k) {
      ReIDConfig c;
      c.layers = m;
      c.cross_layers = k;
      c.scheme = Scheme::shared;
      const auto shared = init_reid_params(c, 1);
      c.scheme = Scheme::parallel;
      const auto parallel = init_reid_params(c, 1);
      EXPECT_EQ(parallel.transformer_parameter_count(), 3 * shared.transformer_parameter_count());
      EXPECT_GT(shared.transformer_parameter_count(), 0u);
    }
}

TEST(ReIDParams, MultiScale3dUsesTripleWidth) {
  ReIDConfig c;
  c.scheme = Scheme::multi_scale_3d;
  const auto p = init_reid_params(c, 2);
  EXPECT_EQ(p.queries.shape(), (Shape{c.queries, 3 * c.width}));
  std::mt19937_64 rng(3);
  const auto out = reid_forward(random_pyramid(c.width, rng), random_refs(c.queries, rng), p, c);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].shape(), (Shape{c.queries, 96}));
  EXPECT_EQ(c.match_width(), 96u);
}

TEST(ReIDParams, QueryInitIsSmallGaussian) {
  ReIDConfig c;
  c.queries = 64;
  const auto p = init_reid_params(c, 4);
  double s2 = 0.0;
  for (double v : p.queries.data()) s2 += v * v;
  EXPECT_NEAR(std::sqrt(s2 / double(p.queries.size())), 0.02, 0.002);
}

TEST(ReIDParams, FirstLayerSelfAttentionSkippedByDefault) {
  ReIDConfig c;
  c.layers = 3;
  const auto p = init_reid_params(c, 5);
  EXPECT_FALSE(p.stacks[0].layers[0].self_attn.has_value());
  EXPECT_TRUE(p.stacks[0].layers[1].self_attn.has_value());
  c.skip_first_self_attention = false;
  EXPECT_TRUE(init_reid_params(c, 5).stacks[0].layers[0].self_attn.has_value());
  c.self_attention = false;
  const auto none = init_reid_params(c, 5);
  for (const auto& l : none.stacks[0].layers) EXPECT_FALSE(l.self_attn.has_value());
}

TEST(ReIDParams, MismatchedStructureIsRejected) {
  const auto p = init_reid_params(small(Scheme::shared), 6);
  EXPECT_THROW(check_params(p, small(Scheme::parallel)), DimensionError);
  EXPECT_THROW(check_params(p, small(Scheme::shared, 3, 2)), DimensionError);
  ReIDConfig bad = small(Scheme::shared);
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small(Scheme::shared, 0, 1);
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ReIDForward, AllNineDepthsRunForEveryScheme) {
  std::mt19937_64 rng(7);
  for (Scheme s : kSchemes)
    for (std::size_t m = 1; m <= 3; ++m)
      for (std::size_t k = 1; k <= 3; ++k) {
        const ReIDConfig c = small(s, m, k);
        const auto p = init_reid_params(c, 8);
        const auto out = reid_forward(random_pyramid(c.width, rng), random_refs(c.queries, rng), p, c);
        const std::size_t expected = (s == Scheme::shared || s == Scheme::parallel) ? 3 : 1;
        ASSERT_EQ(out.size(), expected);
        std::size_t width = 0;
        for (const auto& e : out) {
          EXPECT_EQ(e.rows(), c.queries);
          EXPECT_TRUE(e.all_finite());
          width += e.cols();
        }
        EXPECT_EQ(width, c.match_width()) << scheme_name(s) << " M=" << m << " K=" << k;
      }
}

TEST(ReIDForward, SingleLayerEqualsOneCrossAttentionStep) {
  std::mt19937_64 rng(9);
  ReIDConfig c = small(Scheme::shared, 1, 1);
  c.heads = 1;
  c.points = 1;
  auto p = init_reid_params(c, 10);
  auto& cross = p.stacks[0].layers[0].cross[0];
  cross.attn.weight_w = Tensor::randn(cross.attn.weight_w.shape(), rng);
  cross.attn.offset_w = Tensor::randn(cross.attn.offset_w.shape(), rng);
  cross.ln_gamma = Tensor::randn(cross.ln_gamma.shape(), rng);
  cross.ln_beta = Tensor::randn(cross.ln_beta.shape(), rng);
  const auto pyr = random_pyramid(c.width, rng);
  const auto refs = random_refs(c.queries, rng);
  const auto out = reid_forward(pyr, refs, p, c);
  for (std::size_t l = 0; l < 3; ++l) {
    const Tensor att = deform_attn(p.queries, refs, {pyr[l]}, cross.attn);
    Tensor sum = p.queries;
    sum += att;
    EXPECT_EQ(out[l].values(), layer_norm(sum, cross.ln_gamma, cross.ln_beta).values());
  }
}

TEST(ReIDForward, ZeroValueProjectionsLeaveLayerNormCascade) {
  std::mt19937_64 rng(11);
  ReIDConfig c = small(Scheme::shared, 2, 2);
  c.self_attention = false;
  auto p = init_reid_params(c, 12);
  for (auto& layer : p.stacks[0].layers)
    for (auto& cross : layer.cross) {
      cross.attn.value_w = Tensor(cross.attn.value_w.shape());
      cross.ln_gamma = Tensor::randn(cross.ln_gamma.shape(), rng);
      cross.ln_beta = Tensor::randn(cross.ln_beta.shape(), rng);
    }
  const auto out = reid_forward(random_pyramid(c.width, rng), random_refs(c.queries, rng), p, c);
  Tensor y = p.queries;
  for (const auto& layer : p.stacks[0].layers)
    for (const auto& cross : layer.cross) y = layer_norm(y, cross.ln_gamma, cross.ln_beta);
  for (const auto& e : out) EXPECT_LE(max_abs_diff(e, y), 1e-14);
}

TEST(ReIDForward, SharedSchemeOnIdenticalLevelsGivesIdenticalEmbeddings) {
  std::mt19937_64 rng(13);
  const ReIDConfig c = small(Scheme::shared);
  const auto p = init_reid_params(c, 14);
  const Tensor level = Tensor::randn({c.width, 16, 16}, rng);
  const auto out = reid_forward({level, level, level}, random_refs(c.queries, rng), p, c);
  EXPECT_EQ(out[0].values(), out[1].values());
  EXPECT_EQ(out[1].values(), out[2].values());
}

TEST(ReIDForward, WrongInputsThrow) {
  std::mt19937_64 rng(15);
  const ReIDConfig c = small(Scheme::shared);
  const auto p = init_reid_params(c, 16);
  auto pyr = random_pyramid(c.width, rng);
  EXPECT_THROW(reid_forward(pyr, random_refs(c.queries + 1, rng), p, c), DimensionError);
  pyr.pop_back();
  EXPECT_THROW(reid_forward(pyr, random_refs(c.queries, rng), p, c), DimensionError);
  EXPECT_THROW(reid_forward(random_pyramid(c.width + 1, rng), random_refs(c.queries, rng), p, c), DimensionError);
}

TEST(ReIDForward, DropoutNeedsGenerator) {
  std::mt19937_64 rng(17);
  ReIDConfig c = small(Scheme::shared);
  const auto p = init_reid_params(c, 18);
  c.dropout = 0.1;
  Tape t;
  std::vector<Var> maps;
  for (const auto& m : random_pyramid(c.width, rng)) maps.push_back(t.constant(m));
  Var refs = t.constant(reference_tensor(random_refs(c.queries, rng)));
  EXPECT_THROW(reid_forward(maps, refs, p, c), ConfigError);
  std::mt19937_64 a(1), b(1);
  const auto x = reid_forward(maps, refs, p, c, &a);
  const auto y = reid_forward(maps, refs, p, c, &b);
  EXPECT_EQ(x[0].value().values(), y[0].value().values());
}

TEST(ConcatEmbeddings, EqualUnitVectorsScaleByInverseRootThree) {
  const Tensor u = Tensor::matrix({{0.6, 0.8}});
  const Tensor cat = concat_inference_embeddings({u, u, u});
  ASSERT_EQ(cat.shape(), (Shape{1, 6}));
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(cat[j], u[j % 2] / std::sqrt(3.0), 1e-15);
}

TEST(ConcatEmbeddings, ZeroRowsStayZero) {
  const Tensor z({2, 3});
  const Tensor cat = concat_inference_embeddings({z, z, z});
  for (double v : cat.data()) EXPECT_EQ(v, 0.0);
}

TEST(ConcatEmbeddings, MatchWidthForDefaultShared) {
  ReIDConfig c;
  EXPECT_EQ(c.match_width(), 96u);
  std::mt19937_64 rng(19);
  const auto out = reid_forward(random_pyramid(c.width, rng), random_refs(c.queries, rng), init_reid_params(c, 20), c);
  EXPECT_EQ(concat_inference_embeddings(out).cols(), 96u);
}

// Directional checks on the full model. Per-coordinate differences at
// h = 1e-6 lose digits on partials near 1e-8, so random directions are used.
class FullModelGradient : public ::testing::TestWithParam<std::tuple<Scheme, bool>> {};

TEST_P(FullModelGradient, DirectionalDerivativesMatch) {
  const auto [scheme, ref_grad] = GetParam();
  for (std::size_t mk : {1u, 2u}) {
    RunConfig cfg = default_gradcheck_config();
    cfg.model.scheme = scheme;
    cfg.model.layers = mk;
    cfg.model.cross_layers = mk;
    cfg.model.reference_grad = ref_grad;
    std::mt19937_64 rng(21 + mk);
    auto block = detail::full_model_block(cfg, rng);
    const double err =
        gradcheck_directional(detail::block_builder(block), detail::block_params(block), 1e-5, 8, 23);
    EXPECT_LT(err, 1e-4) << scheme_name(scheme) << " M=K=" << mk;
    const double corrupted =
        gradcheck_directional(detail::block_builder(block, true), detail::block_params(block), 1e-5, 2, 23);
    EXPECT_GT(corrupted, 0.1);
  }
}

INSTANTIATE_TEST_SUITE_P(Schemes, FullModelGradient,
                         ::testing::Combine(::testing::ValuesIn(kSchemes), ::testing::Bool()),
                         [](const auto& info) {
                           return std::string(scheme_name(std::get<0>(info.param))) +
                                  (std::get<1>(info.param) ? "_refgrad" : "");
                         });
