#include "qme/quality/quality.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qme/core/ops.hpp"

namespace qme::quality {

void FrameStack::validate() const {
  require(blocks >= 1 && patches >= 1, "ShapeError", "U and P must be >= 1");
  require(!frames.empty(), "EmptyQuery");
  const Eigen::Index rows = static_cast<Eigen::Index>(blocks) * patches;
  for (const auto& f : frames)
    require(f.rows() == rows, "ShapeError", "frame patch count vs U*P");
}

Matrix reduce_features(const FrameStack& features) {
  features.validate();
  const Eigen::Index d = features.frames.front().cols();
  const auto l = static_cast<Eigen::Index>(features.frames.size());
  Matrix out(l, 2 * d);
  for (Eigen::Index i = 0; i < l; ++i) {
    const Matrix& f = features.frames[static_cast<std::size_t>(i)];
    require(f.cols() == d, "ShapeError");
    const double n = static_cast<double>(f.rows());
    const Vector mean = f.colwise().mean().transpose();
    // population std; a single patch (U*P = 1) has std 0 by definition
    const Matrix centered = f.rowwise() - mean.transpose();
    const Vector var =
        (centered.array().square().colwise().sum() / n).matrix().transpose();
    out.row(i).head(d) = mean.transpose();
    out.row(i).tail(d) = var.array().sqrt().transpose();
  }
  return out;
}

Eigen::Index TrainingGallery::subject_index(const std::string& subject_id) const {
  auto it = std::find(subjects.begin(), subjects.end(), subject_id);
  if (it == subjects.end()) return -1;
  return static_cast<Eigen::Index>(it - subjects.begin());
}

TrainingGallery build_training_gallery(const core::GalleryManifest& manifest,
                                       const std::string& modality_id) {
  auto it = manifest.gallery_features.find(modality_id);
  require(it != manifest.gallery_features.end(), "UnknownModality", modality_id);
  const Matrix& features = it->second;
  require(features.rows() == static_cast<Eigen::Index>(manifest.templates.size()),
          "ShapeError", "gallery feature rows vs templates");

  TrainingGallery gallery;
  gallery.subjects = manifest.subjects;
  gallery.centers = Matrix::Zero(static_cast<Eigen::Index>(manifest.subjects.size()),
                                 features.cols());
  Vector counts = Vector::Zero(gallery.centers.rows());
  for (std::size_t t = 0; t < manifest.templates.size(); ++t) {
    const Eigen::Index s = gallery.subject_index(manifest.templates[t].subject_id);
    require(s >= 0, "UnknownSubject", manifest.templates[t].subject_id);
    gallery.centers.row(s) += features.row(static_cast<Eigen::Index>(t));
    counts(s) += 1.0;
  }
  for (Eigen::Index s = 0; s < gallery.centers.rows(); ++s) {
    require(counts(s) > 0.0, "EmptyGallery", "subject without templates: " + gallery.subjects[static_cast<std::size_t>(s)]);
    gallery.centers.row(s) /= counts(s);
  }
  return gallery;
}

int compute_rank(const Vector& frame_feature, const TrainingGallery& gallery,
                 const std::string& true_subject, core::MetricKind kind) {
  const Eigen::Index own = gallery.subject_index(true_subject);
  require(own >= 0, "UnknownSubject", true_subject);
  const Vector sims = core::similarity_scores(frame_feature, gallery.centers, kind);
  int rank = 1;
  for (Eigen::Index s = 0; s < sims.size(); ++s) {
    if (s == own) continue;
    if (sims(s) >= sims(own)) ++rank;  // ties count against
  }
  return rank;
}

double pseudo_quality_label(int rank, double delta) {
  require(rank >= 1, "InvalidRank");
  require(delta > 1.0, "InvalidDelta");
  const double v = (delta - static_cast<double>(rank)) / (delta - 1.0);
  return v > 0.0 ? v : 0.0;
}

QualityEstimator::QualityEstimator(nn::DenseNet encoder, std::string modality_id,
                                   double delta)
    : encoder_(std::move(encoder)), modality_id_(std::move(modality_id)), delta_(delta) {
  require(encoder_.output_dim() == 1, "ShapeError", "QE encoder must output one weight");
}

Vector QualityEstimator::predict_frame_weights(const Matrix& reduced) const {
  require(reduced.cols() == encoder_.input_dim(), "ShapeError",
          "reduced feature width vs QE input");
  return encoder_.forward(reduced).col(0);
}

QualityWeight QualityEstimator::predict_query_weight(const Matrix& reduced) const {
  QualityWeight w;
  w.frame_weights = predict_frame_weights(reduced);
  w.query_weight = w.frame_weights.mean();
  return w;
}

std::vector<int> frame_ranks(const Matrix& frame_features, const TrainingGallery& gallery,
                             const std::string& true_subject, core::MetricKind kind) {
  std::vector<int> ranks;
  ranks.reserve(static_cast<std::size_t>(frame_features.rows()));
  for (Eigen::Index i = 0; i < frame_features.rows(); ++i)
    ranks.push_back(compute_rank(frame_features.row(i).transpose(), gallery,
                                 true_subject, kind));
  return ranks;
}

QeTrainResult train_qe(const std::vector<QeTrainExample>& data,
                       const std::string& modality_id, const QeTrainConfig& config) {
  require(!data.empty(), "EmptyTrainingSet");
  require(config.delta > 1.0, "InvalidDelta");
  const Eigen::Index in_dim = data.front().reduced.cols();
  for (const auto& ex : data) {
    require(ex.reduced.cols() == in_dim, "ShapeError", "reduced feature width");
    require(ex.ranks.size() == static_cast<std::size_t>(ex.reduced.rows()), "ShapeError",
            "ranks vs frames");
  }

  Rng rng(config.seed);
  std::vector<Eigen::Index> dims = {in_dim};
  dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
  dims.push_back(1);
  std::vector<nn::Activation> acts(config.hidden.size(), nn::Activation::kRelu);
  acts.push_back(nn::Activation::kSigmoid);
  nn::DenseNet encoder(dims, acts, rng);

  const int steps_per_epoch =
      static_cast<int>((data.size() + config.batch_queries - 1) / config.batch_queries);
  const int total_steps = std::max(steps_per_epoch * config.epochs, 1);
  nn::LrSchedule schedule{static_cast<int>(config.warmup_fraction * total_steps),
                          total_steps, config.peak_lr, config.floor_lr};
  nn::Adam adam(encoder.param_count(), config.adam, schedule);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  QeTrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    double epoch_frames = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_queries)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_queries));
      Eigen::Index frame_total = 0;
      for (std::size_t k = start; k < end; ++k)
        frame_total += data[order[k]].reduced.rows();

      Matrix x(frame_total, in_dim);
      Vector target(frame_total);
      Eigen::Index row = 0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = data[order[k]];
        for (Eigen::Index i = 0; i < ex.reduced.rows(); ++i) {
          x.row(row) = ex.reduced.row(i);
          target(row) = pseudo_quality_label(ex.ranks[static_cast<std::size_t>(i)],
                                             config.delta);
          ++row;
        }
      }

      nn::DenseNet::Cache cache;
      const Vector pred = encoder.forward(x, &cache).col(0);
      const Vector diff = pred - target;
      const double n = static_cast<double>(frame_total);
      const double loss = diff.squaredNorm() / n;
      epoch_loss += loss * n;
      epoch_frames += n;

      Matrix dout = (2.0 / n) * diff;
      auto grads = encoder.zero_gradients();
      encoder.backward(cache, dout, &grads);
      Vector params = encoder.param_vector();
      adam.step(params, nn::DenseNet::flatten_gradients(grads));
      encoder.set_param_vector(params);
    }
    result.epoch_losses.push_back(epoch_loss / epoch_frames);
  }

  result.model = QualityEstimator(std::move(encoder), modality_id, config.delta);
  return result;
}

}  // namespace qme::quality
