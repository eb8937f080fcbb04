#ifndef QME_FUSION_MODEL_HPP
#define QME_FUSION_MODEL_HPP

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qme/core/types.hpp"
#include "qme/fusion/losses.hpp"
#include "qme/nn/batchnorm.hpp"
#include "qme/nn/checkpoint.hpp"
#include "qme/nn/optim.hpp"
#include "qme/quality/quality.hpp"

namespace qme::fusion {

enum class GatingMode { kQuality, kUniform };
enum class LossKind { kScoreTriplet, kTriplet };

// Expert-assignment weights for the fixed router rules. Z=1 -> (1);
// Z=2 -> (w, 1-w). Larger Z requires the learned router of FusionModel.
Vector route(double quality_weight, int experts);

// Learnable score-fusion model: input batch norm over the N score columns,
// Z experts (shared N->1 nets applied to each template row), and a router
// rule mapping the quality weight to expert-assignment weights.
struct FusionModel {
  nn::BatchNorm norm;
  std::vector<nn::DenseNet> experts;
  std::optional<nn::DenseNet> router;  // 1 -> Z affine + softmax, only for Z > 2
  std::vector<std::string> modality_order;
  std::string gating_modality;
  GatingMode gating = GatingMode::kQuality;
  double margin = 3.0;

  int expert_count() const { return static_cast<int>(experts.size()); }
  // Expert-assignment simplex for one query.
  Vector gate(double quality_weight) const;

  nlohmann::json to_json() const;
  static FusionModel from_json(const nlohmann::json& j);
};

struct FusedScores {
  Vector fused;       // T
  Matrix per_expert;  // T x Z
  Vector gate;        // Z
  bool quality_fallback = false;  // gating features missing, w = 0.5 used
};

// Eval-mode fusion of one query's T x N block. Masked entries are imputed as
// zero in normalized score space.
FusedScores fuse(const FusionModel& model, const core::ConcatScores& scores,
                 double quality_weight);

// Full inference pipeline: QE weight (or 0.5 fallback when the gating
// features are unavailable) -> route -> fuse.
FusedScores infer(const FusionModel& model, const quality::QualityEstimator* qe,
                  const core::ConcatScores& scores, const Matrix* gating_reduced);

struct FusionTrainExample {
  core::ConcatScores scores;
  ScoreLabels labels;
  double quality_weight = 0.5;
};

struct FusionTrainConfig {
  int experts = 2;
  std::vector<Eigen::Index> expert_hidden = {16, 16};
  GatingMode gating = GatingMode::kQuality;
  LossKind loss = LossKind::kScoreTriplet;
  double margin = 3.0;
  int epochs = 40;
  int batch_queries = 32;
  double peak_lr = 5e-5;
  double floor_lr = 0.0;
  double warmup_fraction = 0.1;
  nn::AdamConfig adam{0.9, 0.999, 1e-8, 1e-2};
  // Probability of dropping one present score column per query during
  // training, teaching experts to cope with missing modalities.
  double column_dropout = 0.1;
  std::uint64_t seed = 0;
};

struct FusionTrainResult {
  FusionModel model;
  std::vector<double> epoch_losses;
};

FusionTrainResult train_fusion(const std::vector<FusionTrainExample>& data,
                               const std::vector<std::string>& modality_order,
                               const std::string& gating_modality,
                               const FusionTrainConfig& config);

}  // namespace qme::fusion

#endif  // QME_FUSION_MODEL_HPP
