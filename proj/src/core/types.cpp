#include "qme/core/types.hpp"

#include <algorithm>
#include <limits>
#include <set>

namespace qme::core {

std::string to_string(MetricKind kind) {
  return kind == MetricKind::kCosine ? "cosine" : "euclidean";
}

MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "cosine") return MetricKind::kCosine;
  if (s == "euclidean") return MetricKind::kEuclidean;
  fail("UnknownMetricKind", s);
}

bool GalleryManifest::has_subject(const std::string& subject_id) const {
  return std::find(subjects.begin(), subjects.end(), subject_id) != subjects.end();
}

void GalleryManifest::validate() const {
  require(!templates.empty(), "EmptyGallery");
  std::set<std::string> subject_set(subjects.begin(), subjects.end());
  require(subject_set.size() == subjects.size(), "DuplicateSubject");
  for (const auto& t : templates) {
    require(subject_set.count(t.subject_id) > 0, "UnknownSubject",
            "template " + t.template_id + " references " + t.subject_id);
  }
  for (const auto& q : queries) {
    require(q.frame_count >= 1, "InvalidFrameCount", q.query_id);
    require(subject_set.count(q.subject_id) > 0, "UnknownSubject",
            "query " + q.query_id + " references " + q.subject_id);
  }
  for (const auto& [modality, features] : gallery_features) {
    require(static_cast<std::size_t>(features.rows()) == templates.size(),
            "ShapeError", "gallery features for " + modality);
  }
}

void QueryRecord::validate() const {
  require(info.frame_count >= 1, "InvalidFrameCount", info.query_id);
  for (const auto& [modality, mat] : frames) {
    require(mat.rows() == info.frame_count, "ShapeError",
            info.query_id + " modality " + modality);
  }
}

ScoreMatrix ScoreMatrix::zeros(std::string modality_id,
                               std::vector<std::string> query_ids,
                               std::vector<std::string> template_ids) {
  ScoreMatrix m;
  m.modality_id = std::move(modality_id);
  m.values = Matrix::Zero(static_cast<Eigen::Index>(query_ids.size()),
                          static_cast<Eigen::Index>(template_ids.size()));
  m.mask = BoolArray::Constant(m.values.rows(), m.values.cols(), true);
  m.query_ids = std::move(query_ids);
  m.template_ids = std::move(template_ids);
  return m;
}

Eigen::Index ScoreMatrix::query_index(const std::string& query_id) const {
  auto it = std::find(query_ids.begin(), query_ids.end(), query_id);
  if (it == query_ids.end()) return -1;
  return static_cast<Eigen::Index>(it - query_ids.begin());
}

void ScoreMatrix::validate() const {
  require(values.rows() == static_cast<Eigen::Index>(query_ids.size()), "ShapeError");
  require(values.cols() == static_cast<Eigen::Index>(template_ids.size()), "ShapeError");
  require(mask.rows() == values.rows() && mask.cols() == values.cols(), "ShapeError");
  for (Eigen::Index i = 0; i < values.rows(); ++i)
    for (Eigen::Index j = 0; j < values.cols(); ++j)
      if (mask(i, j)) require(std::isfinite(values(i, j)), "NonFiniteScore");
}

}  // namespace qme::core
