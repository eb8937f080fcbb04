#ifndef QME_CORE_TYPES_HPP
#define QME_CORE_TYPES_HPP

#include <map>
#include <string>
#include <vector>

#include "qme/common.hpp"

namespace qme::core {

enum class MetricKind { kCosine, kEuclidean };

std::string to_string(MetricKind kind);
MetricKind metric_kind_from_string(const std::string& s);

struct ModalityChannel {
  std::string modality_id;
  MetricKind metric_kind = MetricKind::kCosine;
  int feature_dim = 0;  // d_n >= 1
};

struct QueryInfo {
  std::string query_id;
  std::string subject_id;
  int frame_count = 0;  // L >= 1
};

struct TemplateEntry {
  std::string template_id;
  std::string subject_id;
};

// Subjects, gallery templates (ordered; order shared across modalities) and
// optional per-modality gallery features (T x d_n).
struct GalleryManifest {
  std::vector<std::string> subjects;
  std::vector<TemplateEntry> templates;
  std::vector<QueryInfo> queries;
  std::map<std::string, Matrix> gallery_features;

  std::size_t template_count() const { return templates.size(); }
  bool has_subject(const std::string& subject_id) const;
  void validate() const;
};

// Per-frame features for one query, keyed by modality. A modality may be
// absent for a query. Each present matrix is frame_count x d_n.
struct QueryRecord {
  QueryInfo info;
  std::map<std::string, Matrix> frames;

  void validate() const;
};

// Q x T similarity scores for one modality. Masked-out entries hold NaN and
// must never be read as scores; consumers consult the mask.
struct ScoreMatrix {
  std::string modality_id;
  std::vector<std::string> query_ids;
  std::vector<std::string> template_ids;
  Matrix values;
  BoolArray mask;

  static ScoreMatrix zeros(std::string modality_id,
                           std::vector<std::string> query_ids,
                           std::vector<std::string> template_ids);
  Eigen::Index query_index(const std::string& query_id) const;
  void validate() const;
};

// One query's T x N score block, one column per modality in a fixed order.
struct ConcatScores {
  Matrix values;  // T x N
  BoolArray mask;
  std::vector<std::string> modality_order;

  Eigen::Index template_count() const { return values.rows(); }
  Eigen::Index modality_count() const { return values.cols(); }
};

}  // namespace qme::core

#endif  // QME_CORE_TYPES_HPP
