#ifndef QME_NN_CHECKPOINT_HPP
#define QME_NN_CHECKPOINT_HPP

#include <filesystem>

#include "json.hpp"
#include "qme/nn/batchnorm.hpp"
#include "qme/nn/dense.hpp"

namespace qme::nn {

inline constexpr int kCheckpointFormatVersion = 1;

// {"layers":[{"shape":[rows,cols],"weights":[row-major],"bias":[...],
//   "activation":"relu"}]}
nlohmann::json dense_to_json(const DenseNet& net);
DenseNet dense_from_json(const nlohmann::json& j);

// {"mean":[...],"var":[...],"scale":[...],"shift":[...],
//  "momentum":..,"epsilon":..}
nlohmann::json batchnorm_to_json(const BatchNorm& bn);
BatchNorm batchnorm_from_json(const nlohmann::json& j);

// Wraps a payload with format_version and config_hash, writes/reads it.
// Loading verifies the version and, when expected_config_hash is nonempty,
// the hash (ConfigDrift on mismatch).
void save_checkpoint(const nlohmann::json& payload, const std::string& config_hash,
                     const std::filesystem::path& path);
nlohmann::json load_checkpoint(const std::filesystem::path& path,
                               const std::string& expected_config_hash = "");

}  // namespace qme::nn

#endif  // QME_NN_CHECKPOINT_HPP
