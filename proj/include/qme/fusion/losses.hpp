#ifndef QME_FUSION_LOSSES_HPP
#define QME_FUSION_LOSSES_HPP

#include <vector>

#include "qme/common.hpp"

namespace qme::fusion {

// Per-template match/non-match labels for one query's fused score vector.
// Templates with valid=false (missing score) are excluded from both sets.
struct ScoreLabels {
  std::vector<bool> is_match;
  std::vector<bool> valid;  // empty means all valid

  bool template_valid(std::size_t t) const { return valid.empty() || valid[t]; }
};

// Classic margin loss on distances: relu(d_ap - d_an + margin).
double triplet_loss(double d_ap, double d_an, double margin);

// Margin loss on fused similarity scores: mean over non-match entries of
// relu(s) plus mean over match entries of relu(m - s). Zero exactly when all
// non-match scores are <= 0 and all match scores are >= m.
double score_triplet_loss(const Vector& fused, const ScoreLabels& labels, double margin);

// Same loss with its gradient w.r.t. the fused scores.
double score_triplet_loss_with_grad(const Vector& fused, const ScoreLabels& labels,
                                    double margin, Vector* grad);

// Relative-ranking ablation: mean over (match, non-match) pairs of
// relu(s_nm - s_mat + margin), i.e. the classic triplet loss with distances
// taken as negated similarities.
double pairwise_triplet_loss(const Vector& fused, const ScoreLabels& labels, double margin);
double pairwise_triplet_loss_with_grad(const Vector& fused, const ScoreLabels& labels,
                                       double margin, Vector* grad);

}  // namespace qme::fusion

#endif  // QME_FUSION_LOSSES_HPP
