#ifndef QME_QUALITY_QUALITY_HPP
#define QME_QUALITY_QUALITY_HPP

#include <string>
#include <vector>

#include "qme/core/types.hpp"
#include "qme/nn/dense.hpp"
#include "qme/nn/optim.hpp"

namespace qme::quality {

// Intermediate backbone features for one query and one modality: per frame a
// (blocks * patches) x d stack of patch vectors.
struct FrameStack {
  int blocks = 1;   // U
  int patches = 1;  // P
  std::vector<Matrix> frames;

  void validate() const;
};

// Per-frame concatenation of elementwise mean and population std over the
// block/patch axis pair: L x 2d.
Matrix reduce_features(const FrameStack& features);

// Subject-center features for the training gallery, one row per subject.
struct TrainingGallery {
  std::vector<std::string> subjects;
  Matrix centers;  // S x d

  Eigen::Index subject_index(const std::string& subject_id) const;
};

// Average-pools each subject's gallery template rows into one center.
TrainingGallery build_training_gallery(const core::GalleryManifest& manifest,
                                       const std::string& modality_id);

// 1-based rank of the true subject's center among all centers by similarity;
// other centers tying the true similarity count against it.
int compute_rank(const Vector& frame_feature, const TrainingGallery& gallery,
                 const std::string& true_subject, core::MetricKind kind);

// Eq-style ranking pseudo label: relu((delta - rank) / (delta - 1)).
double pseudo_quality_label(int rank, double delta);

struct QualityWeight {
  Vector frame_weights;       // each in (0, 1)
  double query_weight = 0.0;  // mean of frame weights
};

// Frozen quality estimator: encoder mapping reduced frame statistics (2d) to
// a sigmoid weight per frame.
class QualityEstimator {
 public:
  QualityEstimator() = default;
  QualityEstimator(nn::DenseNet encoder, std::string modality_id, double delta);

  Vector predict_frame_weights(const Matrix& reduced) const;
  QualityWeight predict_query_weight(const Matrix& reduced) const;

  const nn::DenseNet& encoder() const { return encoder_; }
  const std::string& modality_id() const { return modality_id_; }
  double delta() const { return delta_; }

 private:
  nn::DenseNet encoder_;
  std::string modality_id_;
  double delta_ = 3.0;
};

struct QeTrainExample {
  Matrix reduced;          // L x 2d
  std::vector<int> ranks;  // per frame, 1-based
};

struct QeTrainConfig {
  double delta = 3.0;
  std::vector<Eigen::Index> hidden = {64, 32};
  int epochs = 60;
  int batch_queries = 32;
  double peak_lr = 5e-5;
  double floor_lr = 0.0;
  double warmup_fraction = 0.1;
  nn::AdamConfig adam{0.9, 0.999, 1e-8, 1e-2};
  std::uint64_t seed = 0;
};

struct QeTrainResult {
  QualityEstimator model;
  std::vector<double> epoch_losses;
};

// Minimizes the mean squared error between sigmoid frame weights and the
// ranking pseudo labels. Returns the frozen model.
QeTrainResult train_qe(const std::vector<QeTrainExample>& data,
                       const std::string& modality_id, const QeTrainConfig& config);

// Builds per-frame rank targets for one query from its frame features.
std::vector<int> frame_ranks(const Matrix& frame_features, const TrainingGallery& gallery,
                             const std::string& true_subject, core::MetricKind kind);

}  // namespace qme::quality

#endif  // QME_QUALITY_QUALITY_HPP
