#include "qme/nn/checkpoint.hpp"

#include <fstream>

namespace qme::nn {

using nlohmann::json;

namespace {

json vector_to_json(const Vector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Vector vector_from_json(const json& arr) {
  Vector v(static_cast<Eigen::Index>(arr.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v(i) = arr[static_cast<std::size_t>(i)].get<double>();
  return v;
}

}  // namespace

json dense_to_json(const DenseNet& net) {
  json layers = json::array();
  for (const auto& layer : net.layers()) {
    json weights = json::array();
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c)
        weights.push_back(layer.weights(r, c));
    layers.push_back({{"shape", {layer.weights.rows(), layer.weights.cols()}},
                      {"weights", std::move(weights)},
                      {"bias", vector_to_json(layer.bias)},
                      {"activation", to_string(layer.activation)}});
  }
  return json{{"layers", std::move(layers)}};
}

DenseNet dense_from_json(const json& j) {
  std::vector<DenseLayer> layers;
  for (const auto& lj : j.at("layers")) {
    DenseLayer layer;
    const auto rows = lj.at("shape").at(0).get<Eigen::Index>();
    const auto cols = lj.at("shape").at(1).get<Eigen::Index>();
    const auto& w = lj.at("weights");
    require(static_cast<Eigen::Index>(w.size()) == rows * cols, "ParseError",
            "weight count vs shape");
    layer.weights.resize(rows, cols);
    std::size_t pos = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) layer.weights(r, c) = w[pos++].get<double>();
    layer.bias = vector_from_json(lj.at("bias"));
    layer.activation = activation_from_string(lj.at("activation").get<std::string>());
    layers.push_back(std::move(layer));
  }
  DenseNet net;
  net.set_layers(std::move(layers));
  return net;
}

json batchnorm_to_json(const BatchNorm& bn) {
  return json{{"mean", vector_to_json(bn.running_mean())},
              {"var", vector_to_json(bn.running_var())},
              {"scale", vector_to_json(bn.scale())},
              {"shift", vector_to_json(bn.shift())},
              {"momentum", bn.momentum()},
              {"epsilon", bn.epsilon()}};
}

BatchNorm batchnorm_from_json(const json& j) {
  Vector mean = vector_from_json(j.at("mean"));
  BatchNorm bn(mean.size(), j.value("momentum", 0.1), j.value("epsilon", 1e-5));
  bn.set_stats(std::move(mean), vector_from_json(j.at("var")));
  bn.set_affine(vector_from_json(j.at("scale")), vector_from_json(j.at("shift")));
  return bn;
}

void save_checkpoint(const json& payload, const std::string& config_hash,
                     const std::filesystem::path& path) {
  json j = payload;
  j["format_version"] = kCheckpointFormatVersion;
  j["config_hash"] = config_hash;
  std::ofstream out(path);
  require(out.good(), "IoError", "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json load_checkpoint(const std::filesystem::path& path,
                     const std::string& expected_config_hash) {
  std::ifstream in(path);
  require(in.good(), "IoError", "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("ParseError", path.string() + ": " + e.what());
  }
  require(j.value("format_version", -1) == kCheckpointFormatVersion, "FormatVersionMismatch",
          path.string());
  if (!expected_config_hash.empty()) {
    require(j.value("config_hash", "") == expected_config_hash, "ConfigDrift",
            path.string());
  }
  return j;
}

}  // namespace qme::nn
