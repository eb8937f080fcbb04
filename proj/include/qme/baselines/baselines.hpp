#ifndef QME_BASELINES_BASELINES_HPP
#define QME_BASELINES_BASELINES_HPP

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "qme/fusion/losses.hpp"

namespace qme::baselines {

using BoolVec = Eigen::Array<bool, Eigen::Dynamic, 1>;

struct ModalityStats {
  double mean = 0.0;
  double stddev = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
  std::vector<double> reference;  // sorted non-match pool for RHE
};

// Per-modality normalization statistics, fitted on a training score pool.
struct NormalizationStats {
  std::map<std::string, ModalityStats> per_modality;

  // pool: all unmasked training scores per modality; rhe_reference: the
  // non-match subset used as the empirical-CDF reference.
  static NormalizationStats fit(const std::map<std::string, std::vector<double>>& pool,
                                const std::map<std::string, std::vector<double>>& rhe_reference);

  const ModalityStats& at(const std::string& modality) const;

  nlohmann::json to_json() const;
  static NormalizationStats from_json(const nlohmann::json& j);
};

// Fixed-rule fusion over the unmasked entries of one score row. All throw
// AllModalitiesMissing when every entry is masked.
double min_fusion(const Vector& row, const BoolVec& mask);
double max_fusion(const Vector& row, const BoolVec& mask);
double mean_fusion(const Vector& row, const BoolVec& mask);

// (score - mean) / std with population std; a constant pool (std ~ 0) maps
// every score to 0.
double zscore_normalize(const NormalizationStats& stats, const std::string& modality,
                        double score);
double minmax_normalize(const NormalizationStats& stats, const std::string& modality,
                        double score);
// Empirical CDF against the reference pool: (#reference <= score) / |reference|.
double rhe_normalize(const NormalizationStats& stats, const std::string& modality,
                     double score);

// Weighted sum over unmasked entries, weights renormalized over the present
// modalities. weights must be a simplex vector.
double weighted_sum_fusion(const Vector& weights, const Vector& row, const BoolVec& mask);

struct WeightedSumTrainExample {
  Matrix scores;   // T x N
  BoolArray mask;  // T x N
  fusion::ScoreLabels labels;
};

struct WeightedSumConfig {
  double margin = 3.0;
  double learning_rate = 0.05;
  int epochs = 200;
  std::uint64_t seed = 0;
};

// Fits softmax-parameterized weights with the score triplet loss.
Vector fit_weighted_sum(const std::vector<WeightedSumTrainExample>& data,
                        const WeightedSumConfig& config);

}  // namespace qme::baselines

#endif  // QME_BASELINES_BASELINES_HPP
