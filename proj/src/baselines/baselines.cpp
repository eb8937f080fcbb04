#include "qme/baselines/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qme/nn/optim.hpp"

namespace qme::baselines {

NormalizationStats NormalizationStats::fit(
    const std::map<std::string, std::vector<double>>& pool,
    const std::map<std::string, std::vector<double>>& rhe_reference) {
  NormalizationStats out;
  for (const auto& [modality, scores] : pool) {
    require(!scores.empty(), "EmptyTrainingSet", "score pool for " + modality);
    ModalityStats s;
    const double n = static_cast<double>(scores.size());
    s.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
    double sq = 0.0;
    for (double v : scores) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / n);
    auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
    s.min = *mn;
    s.max = *mx;
    auto ref_it = rhe_reference.find(modality);
    require(ref_it != rhe_reference.end() && !ref_it->second.empty(), "EmptyTrainingSet",
            "RHE reference for " + modality);
    s.reference = ref_it->second;
    std::sort(s.reference.begin(), s.reference.end());
    out.per_modality.emplace(modality, std::move(s));
  }
  return out;
}

const ModalityStats& NormalizationStats::at(const std::string& modality) const {
  auto it = per_modality.find(modality);
  require(it != per_modality.end(), "UnknownModality", modality);
  return it->second;
}

nlohmann::json NormalizationStats::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [modality, s] : per_modality) {
    j[modality] = {{"mean", s.mean},   {"std", s.stddev},        {"min", s.min},
                   {"max", s.max},     {"reference", s.reference}};
  }
  return j;
}

NormalizationStats NormalizationStats::from_json(const nlohmann::json& j) {
  NormalizationStats out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    ModalityStats s;
    s.mean = it.value().at("mean").get<double>();
    s.stddev = it.value().at("std").get<double>();
    s.min = it.value().at("min").get<double>();
    s.max = it.value().at("max").get<double>();
    s.reference = it.value().at("reference").get<std::vector<double>>();
    out.per_modality.emplace(it.key(), std::move(s));
  }
  return out;
}

namespace {

template <typename Fold>
double fold_unmasked(const Vector& row, const BoolVec& mask, Fold fold, double init) {
  require(row.size() == mask.size(), "ShapeError");
  bool any = false;
  double acc = init;
  for (Eigen::Index i = 0; i < row.size(); ++i) {
    if (!mask(i)) continue;
    acc = any ? fold(acc, row(i)) : row(i);
    any = true;
  }
  require(any, "AllModalitiesMissing");
  return acc;
}

}  // namespace

double min_fusion(const Vector& row, const BoolVec& mask) {
  return fold_unmasked(row, mask, [](double a, double b) { return std::min(a, b); }, 0.0);
}

double max_fusion(const Vector& row, const BoolVec& mask) {
  return fold_unmasked(row, mask, [](double a, double b) { return std::max(a, b); }, 0.0);
}

double mean_fusion(const Vector& row, const BoolVec& mask) {
  require(row.size() == mask.size(), "ShapeError");
  double sum = 0.0, n = 0.0;
  for (Eigen::Index i = 0; i < row.size(); ++i) {
    if (!mask(i)) continue;
    sum += row(i);
    n += 1.0;
  }
  require(n > 0.0, "AllModalitiesMissing");
  return sum / n;
}

double zscore_normalize(const NormalizationStats& stats, const std::string& modality,
                        double score) {
  const auto& s = stats.at(modality);
  if (s.stddev <= 1e-12) return 0.0;  // constant pool: everything maps to 0
  return (score - s.mean) / s.stddev;
}

double minmax_normalize(const NormalizationStats& stats, const std::string& modality,
                        double score) {
  const auto& s = stats.at(modality);
  if (s.max == s.min) return 0.5;
  return std::clamp((score - s.min) / (s.max - s.min), 0.0, 1.0);
}

double rhe_normalize(const NormalizationStats& stats, const std::string& modality,
                     double score) {
  const auto& ref = stats.at(modality).reference;
  const auto upper = std::upper_bound(ref.begin(), ref.end(), score);
  return static_cast<double>(upper - ref.begin()) / static_cast<double>(ref.size());
}

double weighted_sum_fusion(const Vector& weights, const Vector& row, const BoolVec& mask) {
  require(weights.size() == row.size() && row.size() == mask.size(), "ShapeError");
  require((weights.array() >= 0.0).all(), "InvalidWeights", "weights must be nonnegative");
  double num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < row.size(); ++i) {
    if (!mask(i)) continue;
    num += weights(i) * row(i);
    den += weights(i);
  }
  require(mask.any(), "AllModalitiesMissing");
  if (den <= 0.0) return 0.0;  // all present weights zero
  return num / den;
}

Vector fit_weighted_sum(const std::vector<WeightedSumTrainExample>& data,
                        const WeightedSumConfig& config) {
  require(!data.empty(), "EmptyTrainingSet");
  const Eigen::Index n = data.front().scores.cols();
  require(n >= 2, "ShapeError", "need at least two modalities");

  Rng rng(config.seed);
  std::normal_distribution<double> init(0.0, 0.01);
  Vector logits = Vector::NullaryExpr(n, [&]() { return init(rng); });

  nn::LrSchedule schedule{0, std::max(config.epochs, 1), config.learning_rate, 0.0};
  nn::Adam adam(n, nn::AdamConfig{}, schedule);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // softmax weights
    const Vector shifted = logits.array() - logits.maxCoeff();
    Vector w = shifted.array().exp();
    w /= w.sum();

    Vector dw = Vector::Zero(n);
    for (const auto& example : data) {
      const Eigen::Index t_count = example.scores.rows();
      require(example.scores.cols() == n, "ShapeError");
      Vector fused(t_count);
      Vector present_sum(t_count);
      fusion::ScoreLabels labels = example.labels;
      if (labels.valid.empty()) labels.valid.assign(static_cast<std::size_t>(t_count), true);
      for (Eigen::Index t = 0; t < t_count; ++t) {
        double num = 0.0, den = 0.0;
        for (Eigen::Index c = 0; c < n; ++c) {
          if (!example.mask(t, c)) continue;
          num += w(c) * example.scores(t, c);
          den += w(c);
        }
        if (den <= 0.0) {
          labels.valid[static_cast<std::size_t>(t)] = false;
          fused(t) = 0.0;
          present_sum(t) = 1.0;
        } else {
          fused(t) = num / den;
          present_sum(t) = den;
        }
      }
      Vector dfused;
      fusion::score_triplet_loss_with_grad(fused, labels, config.margin, &dfused);
      for (Eigen::Index t = 0; t < t_count; ++t) {
        if (!labels.template_valid(static_cast<std::size_t>(t))) continue;
        for (Eigen::Index c = 0; c < n; ++c) {
          if (!example.mask(t, c)) continue;
          dw(c) += dfused(t) * (example.scores(t, c) - fused(t)) / present_sum(t);
        }
      }
    }
    dw /= static_cast<double>(data.size());

    // backprop through softmax
    const double dot = w.dot(dw);
    Vector dlogits = w.array() * (dw.array() - dot);
    adam.step(logits, dlogits);
  }

  const Vector shifted = logits.array() - logits.maxCoeff();
  Vector w = shifted.array().exp();
  w /= w.sum();
  return w;
}

}  // namespace qme::baselines
