#ifndef QME_CLI_CLI_HPP
#define QME_CLI_CLI_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qme/baselines/baselines.hpp"
#include "qme/fusion/model.hpp"
#include "qme/metrics/metrics.hpp"
#include "qme/quality/quality.hpp"
#include "qme/synth/synth.hpp"

namespace qme::cli {

// One experiment's full configuration: dataset recipe, modality wiring and
// hyperparameters. The config hash binds artifacts produced by different
// stages together.
struct RunConfig {
  synth::SynthConfig synth;
  std::string dataset_dir = "dataset";
  std::string out_dir = "out";
  std::vector<std::string> modality_order;  // default: synth modality order
  std::string gating_modality;              // default: first modality
  int experts = 2;                          // Z
  double delta = 3.0;
  double margin = 3.0;
  fusion::GatingMode gating = fusion::GatingMode::kQuality;
  fusion::LossKind loss = fusion::LossKind::kScoreTriplet;

  std::vector<Eigen::Index> expert_hidden = {16, 16};
  int qe_epochs = 60;
  int fusion_epochs = 40;
  int batch_queries = 32;
  double qe_peak_lr = 5e-5;
  double fusion_peak_lr = 5e-5;
  double warmup_fraction = 0.1;
  double weight_decay = 1e-2;
  double column_dropout = 0.1;

  std::uint64_t seed = 0;
  std::vector<double> far_targets = {0.01, 0.001};
  double fpir = 0.01;
  std::vector<int> cmc_ranks = {1, 5, 10};
  int open_set_subsets = 10;
  double non_mated_fraction = 0.20;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  // FNV-1a over the canonical config JSON with output paths excluded, so
  // relocating artifacts does not count as drift.
  std::string config_hash() const;
};

// Trained/fitted state shared by evaluation methods.
struct Artifacts {
  baselines::NormalizationStats stats;
  Vector weighted_sum_weights;  // over modality_order, simplex
  std::optional<quality::QualityEstimator> qe;
  std::optional<fusion::FusionModel> fusion_model;
};

// Fits normalization statistics and weighted-sum weights on the train split.
Artifacts fit_baseline_artifacts(const RunConfig& config, const synth::SynthDataset& dataset);

// Trains the quality estimator for the gating modality on the train split.
quality::QualityEstimator train_qe_for(const RunConfig& config,
                                       const synth::SynthDataset& dataset,
                                       std::uint64_t seed);

struct FusionVariant {
  int experts = 2;
  fusion::GatingMode gating = fusion::GatingMode::kQuality;
  fusion::LossKind loss = fusion::LossKind::kScoreTriplet;
};

// Trains one fusion model (qe may be null only for uniform gating).
fusion::FusionModel train_fusion_for(const RunConfig& config,
                                     const synth::SynthDataset& dataset,
                                     const quality::QualityEstimator* qe,
                                     const FusionVariant& variant, std::uint64_t seed);

// "single_<modality>", "min", "max", "mean", "zscore", "minmax", "rhe",
// "weighted_sum", "qme".
std::vector<std::string> registered_methods(const RunConfig& config);

struct MethodOutput {
  Matrix scores;   // Q x T fused scores on the test split
  BoolArray mask;  // false where the method has no defined score
};

MethodOutput score_method(const std::string& method, const RunConfig& config,
                          const synth::SynthSplit& split, const Artifacts& artifacts);

// Full metric sweep of one method on the test split.
metrics::EvalReport evaluate_method(const std::string& method, const RunConfig& config,
                                    const synth::SynthDataset& dataset,
                                    const Artifacts& artifacts);

// Command front end; returns the process exit code
// (0 ok, 2 config error, 3 stage-order error, 4 numerical failure).
int run(int argc, const char* const* argv);

}  // namespace qme::cli

#endif  // QME_CLI_CLI_HPP
