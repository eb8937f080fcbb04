#ifndef QME_CORE_OPS_HPP
#define QME_CORE_OPS_HPP

#include <string>
#include <vector>

#include "qme/core/types.hpp"

namespace qme::core {

// Arithmetic mean over frame rows (L x d -> d).
Vector aggregate_query_feature(const Matrix& frames);

// Cosine similarity of q against every gallery row. Throws ZeroNormFeature on
// a zero-norm query or gallery row.
Vector cosine_scores(const Vector& q, const Matrix& gallery);

// Maps a Euclidean distance into (0, 1]: 1 / (1 + dist).
double euclidean_to_similarity(double dist);

// Similarity of q against every gallery row under the channel metric:
// cosine directly, or Euclidean distance remapped through
// euclidean_to_similarity.
Vector similarity_scores(const Vector& q, const Matrix& gallery, MetricKind kind);

// Stacks one query's row from each per-modality score matrix into a T x N
// block. Missing (masked) entries stay NaN with mask=false; a modality whose
// matrix lacks the query yields a fully masked column.
ConcatScores build_concat_scores(const std::vector<ScoreMatrix>& matrices,
                                 const std::string& query_id);

}  // namespace qme::core

#endif  // QME_CORE_OPS_HPP
