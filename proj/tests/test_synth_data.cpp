#include <gtest/gtest.h>

#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "seqtr/synth_data.hpp"

using namespace seqtr;
namespace fs = std::filesystem;

namespace {

BenchmarkConfig small_config() {
  BenchmarkConfig c;
  c.num_train = 12;
  c.num_gallery = 16;
  c.num_queries = 10;
  c.labeled_identities = 6;
  c.unlabeled_identities = 3;
  c.test_identities = 8;
  c.persons_per_scene = 2;
  c.channels = 8;
  c.image_size = 64;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("seqtr_synth_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(RenderScene, PyramidLevelSizes) {
  const IdentityBank bank = IdentityBank::make(2, 0, 0, 4, 1);
  const Scene s = render_scene(bank, {}, RenderConfig{256, 0.1}, 2);
  EXPECT_EQ(s.pyramid[0].shape(), (Shape{4, 32, 32}));
  EXPECT_EQ(s.pyramid[1].shape(), (Shape{4, 16, 16}));
  EXPECT_EQ(s.pyramid[2].shape(), (Shape{4, 8, 8}));
}

TEST(RenderScene, CleanSinglePersonCentreCarriesIdentity) {
  const IdentityBank bank = IdentityBank::make(3, 0, 0, 16, 3);
  for (std::size_t id = 0; id < 3; ++id) {
    const Box box{0.3, 0.2, 0.55, 0.7};
    const Scene s = render_scene(bank, {{box, id, int(id)}}, RenderConfig{256, 0.0}, 4);
    for (const auto& level : s.pyramid) {
      const double cx = 0.425 * double(level.dim(2) - 1), cy = 0.45 * double(level.dim(1) - 1);
      const Tensor v = bilinear_sample(level, cx, cy);
      EXPECT_GT(cosine(v.data(), bank.vector(id)), 0.99);
    }
  }
}

TEST(RenderScene, EmptyCleanSceneIsZero) {
  const IdentityBank bank = IdentityBank::make(2, 0, 0, 4, 5);
  const Scene s = render_scene(bank, {}, RenderConfig{128, 0.0}, 6);
  for (const auto& l : s.pyramid)
    for (double v : l.data()) EXPECT_EQ(v, 0.0);
}

TEST(RenderScene, SameSeedIsBitIdentical) {
  const IdentityBank bank = IdentityBank::make(2, 0, 0, 4, 7);
  const std::vector<ScenePerson> persons{{{0.1, 0.1, 0.3, 0.6}, 1, 1}};
  const Scene a = render_scene(bank, persons, RenderConfig{}, 8), b = render_scene(bank, persons, RenderConfig{}, 8);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_TRUE(same_bits(a.pyramid[l], b.pyramid[l]));
}

TEST(RenderScene, InvalidPersonsThrow) {
  const IdentityBank bank = IdentityBank::make(2, 0, 0, 4, 9);
  EXPECT_THROW(render_scene(bank, {{{0.1, 0.1, 0.3, 0.6}, 5, -1}}, RenderConfig{}, 1), ConfigError);
  EXPECT_THROW(render_scene(bank, {{{0.5, 0.1, 0.3, 0.6}, 0, 0}}, RenderConfig{}, 1), ConfigError);
}

TEST(Benchmark, QueriesHaveMatchesInOtherScenes) {
  const Benchmark b = make_benchmark(small_config(), 11);
  ASSERT_EQ(b.index.queries.size(), 10u);
  const auto gt = b.gallery_truth();
  for (const auto& q : b.index.queries) {
    std::size_t matches = 0;
    for (const auto& [s, persons] : gt)
      if (s != q.scene)
        for (const auto& p : persons) matches += p.identity == q.identity;
    EXPECT_GE(matches, 1u);
  }
}

TEST(Benchmark, SplitsUseDisjointIdentities) {
  const Benchmark b = make_benchmark(small_config(), 12);
  EXPECT_EQ(b.index.train.size(), 12u);
  EXPECT_EQ(b.index.gallery.size(), 16u);
  for (std::size_t id : b.index.train)
    for (const auto& p : b.scene(id).persons) {
      EXPECT_LT(p.identity, b.bank.first_test());
      EXPECT_EQ(p.label >= 0, p.identity < b.bank.first_unlabeled());
    }
  for (std::size_t id : b.index.gallery)
    for (const auto& p : b.scene(id).persons) EXPECT_GE(p.identity, b.bank.first_test());
}

TEST(Benchmark, CoTravellersAlwaysAppearTogether) {
  BenchmarkConfig c = small_config();
  c.co_travellers = true;
  const Benchmark b = make_benchmark(c, 13);
  for (std::size_t id : b.index.gallery) {
    std::set<std::size_t> ids;
    for (const auto& p : b.scene(id).persons) ids.insert(p.identity - b.bank.first_test());
    for (std::size_t i : ids) EXPECT_TRUE(ids.count(i ^ 1u));
  }
}

TEST(Benchmark, SinglePersonScenesHaveNoContext) {
  BenchmarkConfig c = small_config();
  c.persons_per_scene = 1;
  const Benchmark b = make_benchmark(c, 14);
  for (const auto& [id, s] : b.scenes) EXPECT_EQ(s.persons.size(), 1u);
}

TEST(Benchmark, InfeasibleConfigsThrow) {
  BenchmarkConfig c = small_config();
  c.num_queries = 1000;
  EXPECT_THROW(make_benchmark(c, 1), ConfigError);
  c = small_config();
  c.persons_per_scene = 9;
  EXPECT_THROW(make_benchmark(c, 1), ConfigError);
  c = small_config();
  c.co_travellers = true;
  c.persons_per_scene = 3;
  EXPECT_THROW(make_benchmark(c, 1), ConfigError);
  c = small_config();
  c.sigma_bg = -1;
  EXPECT_THROW(make_benchmark(c, 1), ConfigError);
}

TEST(Benchmark, SameSeedGivesByteIdenticalFiles) {
  const fs::path a = temp_dir("a"), b = temp_dir("b");
  save_benchmark(make_benchmark(small_config(), 15), a);
  save_benchmark(make_benchmark(small_config(), 15), b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    EXPECT_EQ(read_text(e.path()), read_text(b / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 3u * 28u);
  const fs::path c = temp_dir("c");
  save_benchmark(make_benchmark(small_config(), 16), c);
  EXPECT_NE(read_text(a / "manifest.json"), read_text(c / "manifest.json"));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST(Benchmark, SaveLoadRoundTrip) {
  const fs::path dir = temp_dir("rt");
  const Benchmark orig = make_benchmark(small_config(), 17);
  save_benchmark(orig, dir);
  const Benchmark back = load_benchmark(dir);
  EXPECT_EQ(back.seed, orig.seed);
  EXPECT_EQ(back.index.train, orig.index.train);
  EXPECT_EQ(back.index.gallery, orig.index.gallery);
  ASSERT_EQ(back.index.queries.size(), orig.index.queries.size());
  for (std::size_t i = 0; i < orig.index.queries.size(); ++i) {
    EXPECT_EQ(back.index.queries[i].box, orig.index.queries[i].box);
    EXPECT_EQ(back.index.queries[i].identity, orig.index.queries[i].identity);
  }
  EXPECT_TRUE(same_bits(back.bank.vectors, orig.bank.vectors));
  for (const auto& [id, s] : orig.scenes) {
    const Scene& t = back.scene(id);
    EXPECT_EQ(t.boxes(), s.boxes());
    for (std::size_t l = 0; l < 3; ++l) EXPECT_TRUE(same_bits(t.pyramid[l], s.pyramid[l]));
  }
  fs::remove_all(dir);
}

TEST(Benchmark, MissingDirectoryIsIoError) {
  EXPECT_THROW(load_benchmark(temp_dir("missing")), IoError);
}
