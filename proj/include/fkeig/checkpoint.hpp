#pragma once
// Versioned JSON checkpoints of a training state. Doubles are written in
// shortest round-trip form, so save followed by load restores every bit.

#include "fkeig/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

namespace fkeig {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string problem;  // ProblemSpec::name()
  std::size_t dim = 0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  CheckpointMeta meta;
  TrainState state;
};

namespace detail {

using nlohmann::json;

// JSON has no NaN or infinity; those are stored as strings.
inline json number_to_json(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double number_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw std::runtime_error("checkpoint: bad number '" + s + "'");
  }
  return j.get<double>();
}

inline json tensor_to_json(const Tensor& t) {
  return json{{"rows", t.rows()}, {"cols", t.cols()}, {"data", t.storage()}};
}

inline Tensor tensor_from_json(const json& j) {
  Tensor t(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
           j.at("data").get<std::vector<double>>());
  return t;
}

inline json head_to_json(const MlpHead& h) {
  json layers = json::array();
  for (const auto& l : h.layers) {
    layers.push_back({{"weight", tensor_to_json(l.weight)}, {"bias", tensor_to_json(l.bias)}});
  }
  return layers;
}

inline MlpHead head_from_json(const json& j) {
  MlpHead h;
  for (const auto& l : j) {
    h.layers.push_back({tensor_from_json(l.at("weight")), tensor_from_json(l.at("bias"))});
  }
  return h;
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  using nlohmann::json;
  const auto& s = c.state;
  json j;
  j["format"] = "fkeig-checkpoint";
  j["version"] = kCheckpointVersion;
  j["problem"] = c.meta.problem;
  j["dim"] = c.meta.dim;
  j["seed"] = c.meta.seed;
  j["step"] = s.step;
  j["network"] = {{"dim", s.params.features.dim},
                  {"order", s.params.features.order},
                  {"psi", detail::head_to_json(s.params.psi)},
                  {"grad", detail::head_to_json(s.params.grad)},
                  {"lambda", s.params.lambda}};
  j["normalization"] = {{"z", s.norm.z}, {"initialized", s.norm.initialized}};
  json blocks = json::array();
  for (const auto& b : s.adam.blocks) blocks.push_back({{"t", b.t}, {"m", b.m}, {"v", b.v}});
  j["adam"] = blocks;
  json hist = json::array();
  for (const auto& r : s.history) {
    hist.push_back({{"step", r.step},
                    {"loss", detail::number_to_json(r.loss)},
                    {"lambda", detail::number_to_json(r.lambda)},
                    {"z", detail::number_to_json(r.z)},
                    {"has_reference", r.has_reference},
                    {"err_lambda", detail::number_to_json(r.err_lambda)},
                    {"err_psi_l2", detail::number_to_json(r.err_psi_l2)},
                    {"err_psi_inf", detail::number_to_json(r.err_psi_inf)},
                    {"err_grad", detail::number_to_json(r.err_grad)}});
  }
  j["history"] = hist;
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "fkeig-checkpoint") {
    throw std::runtime_error("not an fkeig checkpoint");
  }
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.meta.problem = j.at("problem").get<std::string>();
  c.meta.dim = j.at("dim").get<std::size_t>();
  c.meta.seed = j.at("seed").get<std::uint64_t>();
  auto& s = c.state;
  s.step = j.at("step").get<std::size_t>();
  const auto& n = j.at("network");
  s.params.features = FeatureMap{n.at("dim").get<std::size_t>(), n.at("order").get<std::size_t>()};
  s.params.psi = detail::head_from_json(n.at("psi"));
  s.params.grad = detail::head_from_json(n.at("grad"));
  s.params.lambda = n.at("lambda").get<double>();
  s.params.validate();
  s.norm.z = j.at("normalization").at("z").get<double>();
  s.norm.initialized = j.at("normalization").at("initialized").get<bool>();
  for (const auto& b : j.at("adam")) {
    s.adam.blocks.push_back({b.at("m").get<std::vector<double>>(),
                             b.at("v").get<std::vector<double>>(), b.at("t").get<std::size_t>()});
  }
  auto blocks = parameter_blocks(s.params);
  if (s.adam.blocks.size() != blocks.size()) {
    throw std::runtime_error("checkpoint optimizer state does not match the network");
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (s.adam.blocks[i].m.size() != blocks[i].size() ||
        s.adam.blocks[i].v.size() != blocks[i].size()) {
      throw std::runtime_error("checkpoint optimizer block " + std::to_string(i) +
                               " has the wrong size");
    }
  }
  for (const auto& r : j.at("history")) {
    TrainRecord t;
    t.step = r.at("step").get<std::size_t>();
    t.loss = detail::number_from_json(r.at("loss"));
    t.lambda = detail::number_from_json(r.at("lambda"));
    t.z = detail::number_from_json(r.at("z"));
    t.has_reference = r.at("has_reference").get<bool>();
    t.err_lambda = detail::number_from_json(r.at("err_lambda"));
    t.err_psi_l2 = detail::number_from_json(r.at("err_psi_l2"));
    t.err_psi_inf = detail::number_from_json(r.at("err_psi_inf"));
    t.err_grad = detail::number_from_json(r.at("err_grad"));
    s.history.push_back(t);
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << checkpoint_to_json(c).dump(1) << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  try {
    return checkpoint_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + path + " is malformed: " + e.what());
  }
}

}  // namespace fkeig
