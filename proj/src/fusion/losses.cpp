#include "qme/fusion/losses.hpp"

namespace qme::fusion {
namespace {

double relu(double v) { return v > 0.0 ? v : 0.0; }

void check_labels(const Vector& fused, const ScoreLabels& labels) {
  require(labels.is_match.size() == static_cast<std::size_t>(fused.size()), "ShapeError",
          "label count vs fused scores");
  require(labels.valid.empty() ||
              labels.valid.size() == static_cast<std::size_t>(fused.size()),
          "ShapeError", "valid mask size");
}

}  // namespace

double triplet_loss(double d_ap, double d_an, double margin) {
  require(d_ap >= 0.0 && d_an >= 0.0, "NegativeDistance");
  return relu(d_ap - d_an + margin);
}

double score_triplet_loss(const Vector& fused, const ScoreLabels& labels, double margin) {
  return score_triplet_loss_with_grad(fused, labels, margin, nullptr);
}

double score_triplet_loss_with_grad(const Vector& fused, const ScoreLabels& labels,
                                    double margin, Vector* grad) {
  check_labels(fused, labels);
  double match_count = 0.0, nonmatch_count = 0.0;
  for (std::size_t t = 0; t < labels.is_match.size(); ++t) {
    if (!labels.template_valid(t)) continue;
    (labels.is_match[t] ? match_count : nonmatch_count) += 1.0;
  }
  require(match_count > 0.0, "NoMatchTemplates");

  if (grad != nullptr) *grad = Vector::Zero(fused.size());
  double nm_sum = 0.0, mat_sum = 0.0;
  for (Eigen::Index t = 0; t < fused.size(); ++t) {
    const auto ut = static_cast<std::size_t>(t);
    if (!labels.template_valid(ut)) continue;
    if (labels.is_match[ut]) {
      mat_sum += relu(margin - fused(t));
      if (grad != nullptr && fused(t) < margin) (*grad)(t) -= 1.0 / match_count;
    } else {
      nm_sum += relu(fused(t));
      if (grad != nullptr && fused(t) > 0.0) (*grad)(t) += 1.0 / nonmatch_count;
    }
  }
  const double nm_term = nonmatch_count > 0.0 ? nm_sum / nonmatch_count : 0.0;
  return nm_term + mat_sum / match_count;
}

double pairwise_triplet_loss(const Vector& fused, const ScoreLabels& labels, double margin) {
  return pairwise_triplet_loss_with_grad(fused, labels, margin, nullptr);
}

double pairwise_triplet_loss_with_grad(const Vector& fused, const ScoreLabels& labels,
                                       double margin, Vector* grad) {
  check_labels(fused, labels);
  std::vector<Eigen::Index> match_idx, nonmatch_idx;
  for (Eigen::Index t = 0; t < fused.size(); ++t) {
    const auto ut = static_cast<std::size_t>(t);
    if (!labels.template_valid(ut)) continue;
    (labels.is_match[ut] ? match_idx : nonmatch_idx).push_back(t);
  }
  require(!match_idx.empty(), "NoMatchTemplates");
  if (grad != nullptr) *grad = Vector::Zero(fused.size());
  if (nonmatch_idx.empty()) return 0.0;

  const double pairs = static_cast<double>(match_idx.size() * nonmatch_idx.size());
  double total = 0.0;
  for (Eigen::Index mi : match_idx) {
    for (Eigen::Index ni : nonmatch_idx) {
      const double v = fused(ni) - fused(mi) + margin;
      if (v > 0.0) {
        total += v;
        if (grad != nullptr) {
          (*grad)(ni) += 1.0 / pairs;
          (*grad)(mi) -= 1.0 / pairs;
        }
      }
    }
  }
  return total / pairs;
}

}  // namespace qme::fusion
