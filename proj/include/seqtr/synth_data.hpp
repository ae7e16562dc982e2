// SPDX-License-Identifier: Apache-2.0
//
// Synthetic person-search benchmark. Each scene is a three-level feature
// pyramid (1/8, 1/16, 1/32 of a nominal image) of Gaussian background noise
// with identity signature vectors planted under Gaussian bumps at the person
// boxes.

#ifndef SEQTR_SYNTH_DATA_HPP
#define SEQTR_SYNTH_DATA_HPP

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <vector>

#include <json.hpp>

#include "seqtr/evaluation.hpp"
#include "seqtr/reid_transformer.hpp"

namespace seqtr {

using json = nlohmann::ordered_json;

inline constexpr int kDatasetFormatVersion = 1;

/// Derived per-item seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed ^ (salt * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Unit-norm signatures: [0, L) labeled training identities, [L, L+U)
/// unlabeled training identities, [L+U, L+U+T) test identities.
struct IdentityBank {
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  std::size_t test = 0;
  Tensor vectors;  // [(L+U+T) × C]

  std::size_t size() const { return labeled + unlabeled + test; }
  std::size_t dim() const { return vectors.cols(); }
  std::size_t first_unlabeled() const { return labeled; }
  std::size_t first_test() const { return labeled + unlabeled; }
  std::span<const double> vector(std::size_t id) const { return vectors.row(id); }

  /// With twin_noise > 0, test identities come in blocks of four where the
  /// third is a noisy copy of the first.
  static IdentityBank make(std::size_t labeled, std::size_t unlabeled, std::size_t test, std::size_t dim,
                           std::uint64_t seed, double twin_noise = 0.0) {
    IdentityBank b{labeled, unlabeled, test, Tensor({labeled + unlabeled + test, dim})};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t i = 0; i < b.size(); ++i) {
      for (auto& v : b.vectors.row(i)) v = g(rng);
      if (twin_noise > 0.0 && i >= b.first_test() && (i - b.first_test()) % 4 == 2) {
        auto src = b.vectors.row(i - 2);
        auto dst = b.vectors.row(i);
        for (std::size_t j = 0; j < dim; ++j) dst[j] = src[j] + twin_noise * dst[j];
      }
      auto row = b.vectors.row(i);
      const double n = norm(row);
      for (auto& v : row) v /= n;
    }
    return b;
  }
};

struct ScenePerson {
  Box box;
  std::size_t identity = 0;  // index into the identity bank
  int label = -1;            // OIM label: labeled id, or -1 for unlabeled
};

struct Scene {
  std::size_t id = 0;
  std::array<Tensor, kPyramidLevels> pyramid;
  std::vector<ScenePerson> persons;
  double sigma_bg = 0.0;

  std::vector<Box> boxes() const {
    std::vector<Box> b;
    for (const auto& p : persons) b.push_back(p.box);
    return b;
  }
  std::vector<Tensor> levels() const { return {pyramid.begin(), pyramid.end()}; }
};

struct RenderConfig {
  std::size_t image_size = 256;
  double sigma_bg = 0.1;
};

/// Side length of pyramid level l ∈ {1,2,3}: image / 2^(l+2).
inline std::size_t level_size(std::size_t image_size, std::size_t level) {
  return std::max<std::size_t>(1, image_size >> (level + 2));
}

inline Scene render_scene(const IdentityBank& bank, const std::vector<ScenePerson>& persons, const RenderConfig& cfg,
                          std::uint64_t seed, std::size_t scene_id = 0) {
  for (const auto& p : persons) {
    if (p.identity >= bank.size())
      throw ConfigError("render_scene: unknown identity " + std::to_string(p.identity));
    if (!p.box.valid() || p.box.x1 < 0 || p.box.y1 < 0 || p.box.x2 > 1 || p.box.y2 > 1)
      throw ConfigError("render_scene: invalid person box");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Scene s;
  s.id = scene_id;
  s.persons = persons;
  s.sigma_bg = cfg.sigma_bg;
  const std::size_t c = bank.dim();
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t side = level_size(cfg.image_size, l + 1);
    Tensor map({c, side, side});
    if (cfg.sigma_bg > 0.0)
      for (auto& v : map.data()) v = cfg.sigma_bg * noise(rng);
    const double extent = static_cast<double>(side) - 1.0;
    for (const auto& p : persons) {
      const double cx = (p.box.x1 + p.box.x2) / 2.0 * extent;
      const double cy = (p.box.y1 + p.box.y2) / 2.0 * extent;
      const double bw = p.box.width() * extent, bh = p.box.height() * extent;
      const double sigma = std::max(0.5, (bw + bh) / 2.0 / 4.0);
      const double rx = std::max(bw / 2.0, 1.0), ry = std::max(bh / 2.0, 1.0);
      const auto sig = bank.vector(p.identity);
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const double dx = double(x) - cx, dy = double(y) - cy;
          if (std::abs(dx) > rx || std::abs(dy) > ry) continue;
          const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
          for (std::size_t ch = 0; ch < c; ++ch) map(ch, y, x) += w * sig[ch];
        }
    }
    s.pyramid[l] = std::move(map);
  }
  return s;
}

struct BenchmarkConfig {
  std::size_t num_train = 200;
  std::size_t num_gallery = 60;
  std::size_t num_queries = 40;
  std::size_t labeled_identities = 16;   // L
  std::size_t unlabeled_identities = 8;
  std::size_t test_identities = 16;
  std::size_t persons_per_scene = 3;
  double occlusion_rate = 0.0;
  double unlabeled_rate = 0.2;
  double sigma_bg = 0.1;
  std::size_t image_size = 256;
  std::size_t channels = 32;
  bool co_travellers = false;  // test identities (2k, 2k+1) always appear together
  double twin_noise = 0.0;

  void validate() const {
    if (num_train == 0 || num_gallery == 0 || num_queries == 0 || persons_per_scene == 0 || channels == 0)
      throw ConfigError("benchmark counts must be positive");
    if (labeled_identities < 2) throw ConfigError("at least two labeled identities are required");
    if (test_identities < 2) throw ConfigError("at least two test identities are required");
    if (persons_per_scene > test_identities || persons_per_scene > labeled_identities + unlabeled_identities)
      throw ConfigError("persons_per_scene exceeds the identities available to fill a scene");
    if (persons_per_scene > 4) throw ConfigError("persons_per_scene above 4 does not fit the scene layout");
    if (co_travellers && (persons_per_scene % 2 != 0 || test_identities % 2 != 0))
      throw ConfigError("co_travellers needs an even persons_per_scene and test identity count");
    if (occlusion_rate < 0 || occlusion_rate > 1 || unlabeled_rate < 0 || unlabeled_rate > 1)
      throw ConfigError("rates must lie in [0,1]");
    if (unlabeled_rate > 0 && unlabeled_identities == 0)
      throw ConfigError("unlabeled_rate > 0 needs unlabeled identities");
    if (sigma_bg < 0) throw ConfigError("sigma_bg must be non-negative");
    if (image_size < 32) throw ConfigError("image_size must be at least 32");
  }
};

struct BenchmarkQuery {
  std::size_t query_id = 0;
  std::size_t scene = 0;
  Box box;
  std::size_t identity = 0;
};

struct BenchmarkIndex {
  std::vector<std::size_t> train;
  std::vector<std::size_t> gallery;
  std::vector<BenchmarkQuery> queries;
};

struct Benchmark {
  BenchmarkConfig config;
  std::uint64_t seed = 0;
  IdentityBank bank;
  BenchmarkIndex index;
  std::map<std::size_t, Scene> scenes;

  const Scene& scene(std::size_t id) const { return scenes.at(id); }

  GroundTruth gallery_truth() const {
    GroundTruth gt;
    for (std::size_t id : index.gallery) {
      auto& v = gt[id];
      for (const auto& p : scenes.at(id).persons) v.push_back({p.box, p.identity});
    }
    return gt;
  }
};

namespace detail {

/// Random person layout with a margin between boxes; with probability
/// `occlusion` a person is instead placed overlapping an earlier one by at
/// least 30% of the smaller box.
inline std::vector<Box> layout_boxes(std::size_t count, double occlusion, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr double margin = 0.05;
  std::vector<Box> boxes;
  for (std::size_t k = 0; k < count; ++k) {
    const double w = 0.10 + 0.08 * u(rng), h = 0.20 + 0.15 * u(rng);
    if (!boxes.empty() && u(rng) < occlusion) {
      const Box& o = boxes[static_cast<std::size_t>(u(rng) * double(boxes.size())) % boxes.size()];
      const double shift = (u(rng) < 0.5 ? -0.4 : 0.4) * std::min(w, o.width());
      double x = (o.x1 + o.x2) / 2.0 + shift - w / 2.0;
      double y = (o.y1 + o.y2) / 2.0 - h / 2.0 + 0.1 * h * (u(rng) - 0.5);
      x = std::clamp(x, 0.0, 1.0 - w);
      y = std::clamp(y, 0.0, 1.0 - h);
      boxes.push_back({x, y, x + w, y + h});
      continue;
    }
    bool placed = false;
    for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
      const double x = u(rng) * (1.0 - w), y = u(rng) * (1.0 - h);
      const Box cand{x, y, x + w, y + h};
      const Box grown{x - margin, y - margin, x + w + margin, y + h + margin};
      placed = std::none_of(boxes.begin(), boxes.end(), [&](const Box& b) { return iou(grown, b) > 0.0; });
      if (placed) boxes.push_back(cand);
    }
    if (!placed) throw ConfigError("could not lay out " + std::to_string(count) + " persons in a scene");
  }
  return boxes;
}

/// Endless shuffled deck over [0, n) without repeats inside one draw set.
class Deck {
 public:
  Deck(std::size_t n, std::mt19937_64& rng) : n_(n), rng_(rng) { refill(); }

  std::vector<std::size_t> draw(std::size_t k) {
    std::vector<std::size_t> out;
    std::vector<std::size_t> skipped;
    while (out.size() < k) {
      if (cards_.empty()) refill();
      const std::size_t c = cards_.back();
      cards_.pop_back();
      if (std::find(out.begin(), out.end(), c) != out.end()) {
        skipped.push_back(c);
        continue;
      }
      out.push_back(c);
    }
    cards_.insert(cards_.end(), skipped.begin(), skipped.end());
    return out;
  }

 private:
  void refill() {
    std::vector<std::size_t> fresh(n_);
    std::iota(fresh.begin(), fresh.end(), 0);
    std::shuffle(fresh.begin(), fresh.end(), rng_);
    cards_.insert(cards_.begin(), fresh.begin(), fresh.end());
  }

  std::size_t n_;
  std::mt19937_64& rng_;
  std::vector<std::size_t> cards_;
};

}  // namespace detail

inline Benchmark make_benchmark(const BenchmarkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Benchmark b;
  b.config = cfg;
  b.seed = seed;
  b.bank = IdentityBank::make(cfg.labeled_identities, cfg.unlabeled_identities, cfg.test_identities, cfg.channels,
                              mix_seed(seed, 1), cfg.twin_noise);
  const RenderConfig rc{cfg.image_size, cfg.sigma_bg};
  std::mt19937_64 rng(mix_seed(seed, 2));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  detail::Deck train_labeled(cfg.labeled_identities, rng);
  std::optional<detail::Deck> train_unlabeled;
  if (cfg.unlabeled_identities > 0) train_unlabeled.emplace(cfg.unlabeled_identities, rng);
  const std::size_t test_units = cfg.co_travellers ? cfg.test_identities / 2 : cfg.test_identities;
  detail::Deck test_deck(test_units, rng);

  std::size_t next_id = 0;
  auto emit = [&](std::vector<ScenePerson> persons, const char* split) {
    const std::size_t id = next_id++;
    auto layout_rng = std::mt19937_64(mix_seed(seed, 1000 + 2 * id));
    const auto boxes = detail::layout_boxes(persons.size(), cfg.occlusion_rate, layout_rng);
    for (std::size_t i = 0; i < persons.size(); ++i) persons[i].box = boxes[i];
    b.scenes.emplace(id, render_scene(b.bank, persons, rc, mix_seed(seed, 1001 + 2 * id), id));
    (std::string(split) == "train" ? b.index.train : b.index.gallery).push_back(id);
  };

  for (std::size_t s = 0; s < cfg.num_train; ++s) {
    std::vector<ScenePerson> persons;
    std::size_t n_unl = 0;
    for (std::size_t k = 0; k < cfg.persons_per_scene; ++k)
      if (train_unlabeled && u(rng) < cfg.unlabeled_rate) ++n_unl;
    n_unl = std::min(n_unl, cfg.unlabeled_identities);
    const std::size_t n_lab = std::min(cfg.persons_per_scene - n_unl, cfg.labeled_identities);
    n_unl = cfg.persons_per_scene - n_lab;
    for (std::size_t id : train_labeled.draw(n_lab)) persons.push_back({{}, id, static_cast<int>(id)});
    if (n_unl > 0)
      for (std::size_t id : train_unlabeled->draw(n_unl)) persons.push_back({{}, b.bank.first_unlabeled() + id, -1});
    emit(std::move(persons), "train");
  }

  for (std::size_t s = 0; s < cfg.num_gallery; ++s) {
    std::vector<ScenePerson> persons;
    if (cfg.co_travellers) {
      for (std::size_t pair : test_deck.draw(cfg.persons_per_scene / 2)) {
        persons.push_back({{}, b.bank.first_test() + 2 * pair, -1});
        persons.push_back({{}, b.bank.first_test() + 2 * pair + 1, -1});
      }
    } else {
      for (std::size_t id : test_deck.draw(cfg.persons_per_scene))
        persons.push_back({{}, b.bank.first_test() + id, -1});
    }
    emit(std::move(persons), "gallery");
  }

  std::map<std::size_t, std::set<std::size_t>> scenes_of;
  for (std::size_t sid : b.index.gallery)
    for (const auto& p : b.scenes.at(sid).persons) scenes_of[p.identity].insert(sid);
  std::vector<std::pair<std::size_t, std::size_t>> eligible;  // (scene, person)
  for (std::size_t sid : b.index.gallery) {
    const auto& persons = b.scenes.at(sid).persons;
    for (std::size_t k = 0; k < persons.size(); ++k)
      if (scenes_of[persons[k].identity].size() >= 2) eligible.emplace_back(sid, k);
  }
  if (cfg.num_queries > eligible.size())
    throw ConfigError("num_queries = " + std::to_string(cfg.num_queries) + " is infeasible: only " +
                      std::to_string(eligible.size()) + " gallery persons have a match in another scene");
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(cfg.num_queries);
  std::sort(eligible.begin(), eligible.end());
  for (std::size_t q = 0; q < eligible.size(); ++q) {
    const auto& p = b.scenes.at(eligible[q].first).persons[eligible[q].second];
    b.index.queries.push_back({q, eligible[q].first, p.box, p.identity});
  }
  return b;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json, identities.sqtr, scenes/scene_XXXXX_l{1,2,3}.sqtr

inline json box_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

inline Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ConfigError("box must be an array of four numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline json benchmark_config_json(const BenchmarkConfig& c) {
  return json{{"num_train", c.num_train},
              {"num_gallery", c.num_gallery},
              {"num_queries", c.num_queries},
              {"labeled_identities", c.labeled_identities},
              {"unlabeled_identities", c.unlabeled_identities},
              {"test_identities", c.test_identities},
              {"persons_per_scene", c.persons_per_scene},
              {"occlusion_rate", c.occlusion_rate},
              {"unlabeled_rate", c.unlabeled_rate},
              {"sigma_bg", c.sigma_bg},
              {"image_size", c.image_size},
              {"channels", c.channels},
              {"co_travellers", c.co_travellers},
              {"twin_noise", c.twin_noise}};
}

/// Strict parse: unknown keys are rejected, missing keys keep defaults.
inline BenchmarkConfig benchmark_config_from_json(const json& j) {
  BenchmarkConfig c;
  if (!j.is_object()) throw ConfigError("benchmark config must be an object");
  for (const auto& [k, v] : j.items()) {
    try {
      if (k == "num_train") c.num_train = v.get<std::size_t>();
      else if (k == "num_gallery") c.num_gallery = v.get<std::size_t>();
      else if (k == "num_queries") c.num_queries = v.get<std::size_t>();
      else if (k == "labeled_identities") c.labeled_identities = v.get<std::size_t>();
      else if (k == "unlabeled_identities") c.unlabeled_identities = v.get<std::size_t>();
      else if (k == "test_identities") c.test_identities = v.get<std::size_t>();
      else if (k == "persons_per_scene") c.persons_per_scene = v.get<std::size_t>();
      else if (k == "occlusion_rate") c.occlusion_rate = v.get<double>();
      else if (k == "unlabeled_rate") c.unlabeled_rate = v.get<double>();
      else if (k == "sigma_bg") c.sigma_bg = v.get<double>();
      else if (k == "image_size") c.image_size = v.get<std::size_t>();
      else if (k == "channels") c.channels = v.get<std::size_t>();
      else if (k == "co_travellers") c.co_travellers = v.get<bool>();
      else if (k == "twin_noise") c.twin_noise = v.get<double>();
      else throw ConfigError("unknown benchmark key '" + k + "'");
    } catch (const json::exception& e) {
      throw ConfigError("benchmark key '" + k + "': " + e.what());
    }
  }
  return c;
}

inline std::string level_file(std::size_t scene, std::size_t level) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "scenes/scene_%05zu_l%zu.sqtr", scene, level);
  return buf;
}

inline json benchmark_manifest(const Benchmark& b) {
  json scenes = json::array();
  for (const auto& [id, s] : b.scenes) {
    json persons = json::array();
    for (const auto& p : s.persons)
      persons.push_back({{"box", box_json(p.box)}, {"identity", p.identity}, {"label", p.label}});
    const bool train = std::find(b.index.train.begin(), b.index.train.end(), id) != b.index.train.end();
    json levels = json::array();
    for (std::size_t l = 1; l <= kPyramidLevels; ++l) levels.push_back(level_file(id, l));
    scenes.push_back({{"id", id}, {"split", train ? "train" : "gallery"}, {"sigma_bg", s.sigma_bg},
                      {"levels", levels}, {"persons", persons}});
  }
  json queries = json::array();
  for (const auto& q : b.index.queries)
    queries.push_back({{"query_id", q.query_id}, {"scene", q.scene}, {"box", box_json(q.box)}, {"identity", q.identity}});
  return json{{"format_version", kDatasetFormatVersion},
              {"seed", b.seed},
              {"config", benchmark_config_json(b.config)},
              {"identities", {{"file", "identities.sqtr"}, {"labeled", b.bank.labeled},
                              {"unlabeled", b.bank.unlabeled}, {"test", b.bank.test}}},
              {"train", b.index.train},
              {"gallery", b.index.gallery},
              {"queries", queries},
              {"scenes", scenes}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save_benchmark(const Benchmark& b, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "scenes", ec);
  if (ec) throw IoError("cannot create " + (dir / "scenes").string() + ": " + ec.message());
  save_blob(dir / "identities.sqtr", b.bank.vectors);
  for (const auto& [id, s] : b.scenes)
    for (std::size_t l = 0; l < kPyramidLevels; ++l) save_blob(dir / level_file(id, l + 1), s.pyramid[l]);
  write_text(dir / "manifest.json", benchmark_manifest(b).dump(2) + "\n");
}

inline Benchmark load_benchmark(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest: " + std::string(e.what()));
  }
  if (m.value("format_version", 0) != kDatasetFormatVersion) throw IoError("unsupported dataset format version");
  Benchmark b;
  b.config = benchmark_config_from_json(m.at("config"));
  b.seed = m.at("seed").get<std::uint64_t>();
  const auto& ids = m.at("identities");
  b.bank.labeled = ids.at("labeled").get<std::size_t>();
  b.bank.unlabeled = ids.at("unlabeled").get<std::size_t>();
  b.bank.test = ids.at("test").get<std::size_t>();
  b.bank.vectors = load_blob(dir / ids.at("file").get<std::string>());
  b.index.train = m.at("train").get<std::vector<std::size_t>>();
  b.index.gallery = m.at("gallery").get<std::vector<std::size_t>>();
  for (const auto& q : m.at("queries"))
    b.index.queries.push_back({q.at("query_id").get<std::size_t>(), q.at("scene").get<std::size_t>(),
                               box_from_json(q.at("box")), q.at("identity").get<std::size_t>()});
  for (const auto& sj : m.at("scenes")) {
    Scene s;
    s.id = sj.at("id").get<std::size_t>();
    s.sigma_bg = sj.at("sigma_bg").get<double>();
    const auto levels = sj.at("levels");
    if (levels.size() != kPyramidLevels) throw IoError("scene must list three pyramid levels");
    for (std::size_t l = 0; l < kPyramidLevels; ++l) s.pyramid[l] = load_blob(dir / levels[l].get<std::string>());
    for (const auto& pj : sj.at("persons"))
      s.persons.push_back({box_from_json(pj.at("box")), pj.at("identity").get<std::size_t>(), pj.at("label").get<int>()});
    b.scenes.emplace(s.id, std::move(s));
  }
  return b;
}

}  // namespace seqtr

#endif  // SEQTR_SYNTH_DATA_HPP
