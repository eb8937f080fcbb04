#include "qme/core/ops.hpp"

#include <cmath>
#include <limits>

namespace qme::core {

Vector aggregate_query_feature(const Matrix& frames) {
  require(frames.rows() >= 1 && frames.cols() >= 1, "EmptyQuery");
  return frames.colwise().mean().transpose();
}

Vector cosine_scores(const Vector& q, const Matrix& gallery) {
  require(gallery.cols() == q.size(), "ShapeError");
  const double qn = q.norm();
  require(qn > 0.0, "ZeroNormFeature", "query");
  Vector out(gallery.rows());
  for (Eigen::Index t = 0; t < gallery.rows(); ++t) {
    const double gn = gallery.row(t).norm();
    require(gn > 0.0, "ZeroNormFeature", "gallery row " + std::to_string(t));
    out(t) = gallery.row(t).dot(q) / (qn * gn);
  }
  return out;
}

double euclidean_to_similarity(double dist) {
  require(dist >= 0.0, "NegativeDistance");
  return 1.0 / (1.0 + dist);
}

Vector similarity_scores(const Vector& q, const Matrix& gallery, MetricKind kind) {
  if (kind == MetricKind::kCosine) return cosine_scores(q, gallery);
  require(gallery.cols() == q.size(), "ShapeError");
  Vector out(gallery.rows());
  for (Eigen::Index t = 0; t < gallery.rows(); ++t)
    out(t) = euclidean_to_similarity((gallery.row(t).transpose() - q).norm());
  return out;
}

ConcatScores build_concat_scores(const std::vector<ScoreMatrix>& matrices,
                                 const std::string& query_id) {
  require(matrices.size() >= 2, "ShapeError", "need at least two modalities");
  const auto& ref = matrices.front().template_ids;
  for (const auto& m : matrices)
    require(m.template_ids == ref, "TemplateOrderMismatch", m.modality_id);

  const Eigen::Index t_count = static_cast<Eigen::Index>(ref.size());
  const Eigen::Index n = static_cast<Eigen::Index>(matrices.size());
  ConcatScores out;
  out.values = Matrix::Constant(t_count, n, std::numeric_limits<double>::quiet_NaN());
  out.mask = BoolArray::Constant(t_count, n, false);
  out.modality_order.reserve(matrices.size());
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto& m = matrices[static_cast<std::size_t>(c)];
    out.modality_order.push_back(m.modality_id);
    const Eigen::Index row = m.query_index(query_id);
    if (row < 0) continue;  // modality absent for this query: column stays masked
    for (Eigen::Index t = 0; t < t_count; ++t) {
      if (m.mask(row, t)) {
        out.values(t, c) = m.values(row, t);
        out.mask(t, c) = true;
      }
    }
  }
  return out;
}

}  // namespace qme::core
