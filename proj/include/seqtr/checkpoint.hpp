// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory: manifest.json naming every parameter blob plus the
// per-scale OIM states.

#ifndef SEQTR_CHECKPOINT_HPP
#define SEQTR_CHECKPOINT_HPP

#include <filesystem>
#include <map>
#include <vector>

#include "seqtr/config.hpp"

namespace seqtr {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  RunConfig config;
  ReIDParams params;
  std::vector<OIMState> oim;  // one per supervised scale
  std::size_t step = 0;
};

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  std::filesystem::create_directories(dir / "oim", ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  json params = json::array();
  auto& mutable_params = const_cast<ReIDParams&>(ck.params);
  mutable_params.visit([&](const std::string& name, Tensor& t) {
    const std::string file = "params/" + name + ".sqtr";
    save_blob(dir / file, t);
    params.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  });

  json oim = json::array();
  for (std::size_t i = 0; i < ck.oim.size(); ++i) {
    const auto& s = ck.oim[i];
    const std::string lut = "oim/scale" + std::to_string(i) + "_lut.sqtr";
    save_blob(dir / lut, s.lut());
    json entry{{"lut", lut}, {"queue_capacity", s.queue_capacity()}, {"queue_size", s.queue_size()},
               {"momentum", s.momentum()}, {"temperature", s.temperature()}, {"queue", nullptr}};
    if (s.queue_size() > 0) {
      const auto rows = s.queue_rows();
      Tensor q({rows.size(), s.dim()});
      for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), q.row(r).begin());
      const std::string qf = "oim/scale" + std::to_string(i) + "_queue.sqtr";
      save_blob(dir / qf, q);
      entry["queue"] = qf;
    }
    oim.push_back(entry);
  }

  const json manifest{{"format_version", kCheckpointFormatVersion},
                      {"scheme", std::string(scheme_name(ck.config.model.scheme))},
                      {"step", ck.step},
                      {"config", run_config_json(ck.config)},
                      {"parameters", params},
                      {"oim", oim}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (m.value("format_version", 0) != kCheckpointFormatVersion) throw IoError("unsupported checkpoint format version");
  Checkpoint ck;
  ck.config = run_config_from_json(m.at("config"));
  if (m.at("scheme").get<std::string>() != scheme_name(ck.config.model.scheme))
    throw ConfigError("checkpoint scheme disagrees with its config");
  ck.step = m.value("step", std::size_t{0});
  ck.params = init_reid_params(ck.config.model, 0);

  std::map<std::string, std::string> files;
  for (const auto& p : m.at("parameters")) files[p.at("name").get<std::string>()] = p.at("file").get<std::string>();
  ck.params.visit([&](const std::string& name, Tensor& t) {
    auto it = files.find(name);
    if (it == files.end()) throw ConfigError("checkpoint is missing parameter '" + name + "'");
    Tensor loaded = load_blob(dir / it->second);
    if (loaded.shape() != t.shape())
      throw DimensionError("checkpoint parameter '" + name + "' has shape " + shape_str(loaded.shape()) +
                           ", expected " + shape_str(t.shape()));
    t = std::move(loaded);
    files.erase(it);
  });
  if (!files.empty()) throw ConfigError("checkpoint has unexpected parameter '" + files.begin()->first + "'");

  for (const auto& o : m.at("oim")) {
    Tensor lut = load_blob(dir / o.at("lut").get<std::string>());
    OIMState s(lut.rows(), o.at("queue_capacity").get<std::size_t>(), lut.cols(), o.at("momentum").get<double>(),
               o.at("temperature").get<double>());
    s.lut() = std::move(lut);
    if (!o.at("queue").is_null()) {
      const Tensor q = load_blob(dir / o.at("queue").get<std::string>());
      std::vector<std::vector<double>> rows;
      for (std::size_t r = 0; r < q.rows(); ++r) rows.emplace_back(q.row(r).begin(), q.row(r).end());
      s.set_queue(rows);
    }
    ck.oim.push_back(std::move(s));
  }
  return ck;
}

}  // namespace seqtr

#endif  // SEQTR_CHECKPOINT_HPP
