#include "qme/fusion/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qme::fusion {
namespace {

Vector softmax(const Vector& v) {
  Vector e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

std::string gating_to_string(GatingMode g) {
  return g == GatingMode::kQuality ? "quality" : "uniform";
}

GatingMode gating_from_string(const std::string& s) {
  if (s == "quality") return GatingMode::kQuality;
  if (s == "uniform") return GatingMode::kUniform;
  fail("UnknownGatingMode", s);
}

}  // namespace

Vector route(double quality_weight, int experts) {
  require(experts >= 1, "ShapeError", "expert count");
  if (experts == 1) return Vector::Ones(1);
  require(quality_weight > 0.0 && quality_weight < 1.0, "InvalidQualityWeight",
          std::to_string(quality_weight));
  require(experts == 2, "RouterRequired", "Z > 2 needs the learned router");
  Vector p(2);
  p << quality_weight, 1.0 - quality_weight;
  return p;
}

Vector FusionModel::gate(double quality_weight) const {
  const int z = expert_count();
  if (gating == GatingMode::kUniform)
    return Vector::Constant(z, 1.0 / static_cast<double>(z));
  if (z <= 2) return route(quality_weight, z);
  require(router.has_value(), "RouterRequired");
  require(quality_weight > 0.0 && quality_weight < 1.0, "InvalidQualityWeight");
  Matrix in(1, 1);
  in(0, 0) = quality_weight;
  return softmax(router->forward(in).row(0).transpose());
}

nlohmann::json FusionModel::to_json() const {
  nlohmann::json experts_json = nlohmann::json::array();
  for (const auto& e : experts) experts_json.push_back(nn::dense_to_json(e));
  nlohmann::json j{{"norm", nn::batchnorm_to_json(norm)},
                   {"experts", std::move(experts_json)},
                   {"router", router.has_value() ? nn::dense_to_json(*router)
                                                 : nlohmann::json(nullptr)},
                   {"gating_modality", gating_modality},
                   {"gating", gating_to_string(gating)},
                   {"margin", margin},
                   {"modality_order", modality_order}};
  return j;
}

FusionModel FusionModel::from_json(const nlohmann::json& j) {
  FusionModel m;
  m.norm = nn::batchnorm_from_json(j.at("norm"));
  for (const auto& e : j.at("experts")) m.experts.push_back(nn::dense_from_json(e));
  if (!j.at("router").is_null()) m.router = nn::dense_from_json(j.at("router"));
  m.gating_modality = j.at("gating_modality").get<std::string>();
  m.gating = gating_from_string(j.at("gating").get<std::string>());
  m.margin = j.at("margin").get<double>();
  m.modality_order = j.at("modality_order").get<std::vector<std::string>>();
  require(!m.experts.empty(), "ShapeError", "no experts in checkpoint");
  return m;
}

FusedScores fuse(const FusionModel& model, const core::ConcatScores& scores,
                 double quality_weight) {
  require(scores.modality_order == model.modality_order, "ModalityOrderMismatch");
  const Eigen::Index t_count = scores.template_count();
  const int z = model.expert_count();

  // Masked entries are NaN; normalize in place of them with zeros so BN sees
  // finite input (the mask keeps them out of everything downstream).
  Matrix x = scores.values;
  for (Eigen::Index t = 0; t < x.rows(); ++t)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      if (!scores.mask(t, c)) x(t, c) = 0.0;

  const Matrix normalized = model.norm.apply_eval(x, &scores.mask);

  FusedScores out;
  out.per_expert.resize(t_count, z);
  for (int e = 0; e < z; ++e)
    out.per_expert.col(e) = model.experts[static_cast<std::size_t>(e)].forward(normalized).col(0);
  out.gate = model.gate(quality_weight);
  out.fused = out.per_expert * out.gate;
  return out;
}

FusedScores infer(const FusionModel& model, const quality::QualityEstimator* qe,
                  const core::ConcatScores& scores, const Matrix* gating_reduced) {
  double w = 0.5;
  bool fallback = true;
  if (model.gating == GatingMode::kQuality && qe != nullptr && gating_reduced != nullptr &&
      gating_reduced->rows() > 0) {
    w = qe->predict_query_weight(*gating_reduced).query_weight;
    fallback = false;
  }
  FusedScores out = fuse(model, scores, w);
  out.quality_fallback = model.gating == GatingMode::kQuality && fallback;
  return out;
}

FusionTrainResult train_fusion(const std::vector<FusionTrainExample>& data,
                               const std::vector<std::string>& modality_order,
                               const std::string& gating_modality,
                               const FusionTrainConfig& config) {
  require(!data.empty(), "EmptyTrainingSet");
  require(config.experts >= 1, "ShapeError", "expert count");
  const Eigen::Index n = static_cast<Eigen::Index>(modality_order.size());
  require(n >= 2, "ShapeError", "need at least two modalities");
  for (const auto& ex : data) {
    require(ex.scores.modality_order == modality_order, "ModalityOrderMismatch");
    require(ex.scores.modality_count() == n, "ModalityOrderMismatch");
  }

  Rng rng(config.seed);
  const int z = config.experts;

  FusionModel model;
  model.norm = nn::BatchNorm(n);
  std::vector<Eigen::Index> dims = {n};
  dims.insert(dims.end(), config.expert_hidden.begin(), config.expert_hidden.end());
  dims.push_back(1);
  std::vector<nn::Activation> acts(config.expert_hidden.size(), nn::Activation::kRelu);
  acts.push_back(nn::Activation::kIdentity);
  for (int e = 0; e < z; ++e) model.experts.emplace_back(dims, acts, rng);
  if (z > 2 && config.gating == GatingMode::kQuality)
    model.router = nn::DenseNet({1, z}, {nn::Activation::kIdentity}, rng);
  model.modality_order = modality_order;
  model.gating_modality = gating_modality;
  model.gating = config.gating;
  model.margin = config.margin;

  // Flat parameter layout: experts, then router, then BN scale and shift.
  Eigen::Index expert_params = 0;
  for (const auto& e : model.experts) expert_params += e.param_count();
  const Eigen::Index router_params = model.router ? model.router->param_count() : 0;
  const Eigen::Index total_params = expert_params + router_params + 2 * n;

  Vector decay_mask = Vector::Ones(total_params);
  decay_mask.tail(2 * n).setZero();  // no weight decay on batch-norm scale/shift

  auto gather_params = [&]() {
    Vector p(total_params);
    Eigen::Index pos = 0;
    for (const auto& e : model.experts) {
      p.segment(pos, e.param_count()) = e.param_vector();
      pos += e.param_count();
    }
    if (model.router) {
      p.segment(pos, router_params) = model.router->param_vector();
      pos += router_params;
    }
    p.segment(pos, n) = model.norm.scale();
    p.segment(pos + n, n) = model.norm.shift();
    return p;
  };
  auto scatter_params = [&](const Vector& p) {
    Eigen::Index pos = 0;
    for (auto& e : model.experts) {
      e.set_param_vector(p.segment(pos, e.param_count()));
      pos += e.param_count();
    }
    if (model.router) {
      model.router->set_param_vector(p.segment(pos, router_params));
      pos += router_params;
    }
    model.norm.set_affine(p.segment(pos, n), p.segment(pos + n, n));
  };

  const int steps_per_epoch =
      static_cast<int>((data.size() + config.batch_queries - 1) / config.batch_queries);
  const int total_steps = std::max(steps_per_epoch * config.epochs, 1);
  nn::LrSchedule schedule{static_cast<int>(config.warmup_fraction * total_steps),
                          total_steps, config.peak_lr, config.floor_lr};
  nn::Adam adam(total_params, config.adam, schedule);
  adam.set_decay_mask(decay_mask);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  FusionTrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int epoch_batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_queries)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_queries));
      const double batch_size = static_cast<double>(end - start);

      // Stack all template rows of the batch for batch normalization.
      Eigen::Index total_rows = 0;
      for (std::size_t k = start; k < end; ++k)
        total_rows += data[order[k]].scores.template_count();
      Matrix x = Matrix::Zero(total_rows, n);
      BoolArray mask = BoolArray::Constant(total_rows, n, false);
      std::vector<Eigen::Index> row_offset(end - start + 1, 0);
      Eigen::Index row = 0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = data[order[k]];
        const Eigen::Index t_count = ex.scores.template_count();

        // Occasionally drop one present column of this query.
        Eigen::Index dropped = -1;
        if (config.column_dropout > 0.0 && unit(rng) < config.column_dropout) {
          std::vector<Eigen::Index> present;
          for (Eigen::Index c = 0; c < n; ++c)
            if (ex.scores.mask.col(c).any()) present.push_back(c);
          if (present.size() >= 2) {
            std::uniform_int_distribution<std::size_t> pick(0, present.size() - 1);
            dropped = present[pick(rng)];
          }
        }

        for (Eigen::Index t = 0; t < t_count; ++t) {
          for (Eigen::Index c = 0; c < n; ++c) {
            if (c != dropped && ex.scores.mask(t, c)) {
              x(row + t, c) = ex.scores.values(t, c);
              mask(row + t, c) = true;
            }
          }
        }
        row_offset[k - start] = row;
        row += t_count;
      }
      row_offset[end - start] = row;

      nn::BatchNorm::Cache norm_cache;
      const Matrix normalized = model.norm.forward(x, true, &norm_cache, &mask);

      Matrix per_expert(total_rows, z);
      std::vector<nn::DenseNet::Cache> expert_caches(static_cast<std::size_t>(z));
      for (int e = 0; e < z; ++e)
        per_expert.col(e) = model.experts[static_cast<std::size_t>(e)]
                                .forward(normalized, &expert_caches[static_cast<std::size_t>(e)])
                                .col(0);

      double batch_loss = 0.0;
      Matrix dper_expert = Matrix::Zero(total_rows, z);
      nn::DenseGradients router_grads;
      if (model.router) router_grads = model.router->zero_gradients();

      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = data[order[k]];
        const Eigen::Index r0 = row_offset[k - start];
        const Eigen::Index t_count = row_offset[k - start + 1] - r0;

        Vector gate_weights;
        nn::DenseNet::Cache router_cache;
        if (model.router && model.gating == GatingMode::kQuality) {
          Matrix in(1, 1);
          in(0, 0) = ex.quality_weight;
          gate_weights = softmax(model.router->forward(in, &router_cache).row(0).transpose());
        } else {
          gate_weights = model.gate(ex.quality_weight);
        }

        const Vector fused =
            per_expert.block(r0, 0, t_count, z) * gate_weights;

        ScoreLabels labels = ex.labels;
        // Honor this step's dropout-adjusted validity.
        if (labels.valid.empty()) labels.valid.assign(static_cast<std::size_t>(t_count), true);
        for (Eigen::Index t = 0; t < t_count; ++t)
          if (!mask.row(r0 + t).any()) labels.valid[static_cast<std::size_t>(t)] = false;

        Vector dfused;
        double loss;
        if (config.loss == LossKind::kScoreTriplet)
          loss = score_triplet_loss_with_grad(fused, labels, config.margin, &dfused);
        else
          loss = pairwise_triplet_loss_with_grad(fused, labels, config.margin, &dfused);
        batch_loss += loss;
        dfused /= batch_size;

        dper_expert.block(r0, 0, t_count, z) += dfused * gate_weights.transpose();

        if (model.router && model.gating == GatingMode::kQuality) {
          // dL/dp_z then backprop softmax into the router affine layer
          const Vector dgate =
              per_expert.block(r0, 0, t_count, z).transpose() * dfused;
          const double dot = gate_weights.dot(dgate);
          const Vector dlogits = gate_weights.array() * (dgate.array() - dot);
          model.router->backward(router_cache, dlogits.transpose(), &router_grads);
        }
      }
      batch_loss /= batch_size;
      require(std::isfinite(batch_loss), "NonFiniteLoss");
      epoch_loss += batch_loss;
      ++epoch_batches;

      Matrix dnormalized = Matrix::Zero(total_rows, n);
      std::vector<nn::DenseGradients> expert_grads;
      expert_grads.reserve(static_cast<std::size_t>(z));
      for (int e = 0; e < z; ++e) {
        auto grads = model.experts[static_cast<std::size_t>(e)].zero_gradients();
        dnormalized += model.experts[static_cast<std::size_t>(e)].backward(
            expert_caches[static_cast<std::size_t>(e)], dper_expert.col(e), &grads);
        expert_grads.push_back(std::move(grads));
      }

      Vector dscale = Vector::Zero(n);
      Vector dshift = Vector::Zero(n);
      model.norm.backward(norm_cache, dnormalized, &dscale, &dshift);

      Vector grad(total_params);
      Eigen::Index pos = 0;
      for (int e = 0; e < z; ++e) {
        const Vector g = nn::DenseNet::flatten_gradients(expert_grads[static_cast<std::size_t>(e)]);
        grad.segment(pos, g.size()) = g;
        pos += g.size();
      }
      if (model.router) {
        const Vector g = nn::DenseNet::flatten_gradients(router_grads);
        grad.segment(pos, g.size()) = g;
        pos += g.size();
      }
      grad.segment(pos, n) = dscale;
      grad.segment(pos + n, n) = dshift;

      Vector params = gather_params();
      adam.step(params, grad);
      scatter_params(params);
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_batches));
  }

  result.model = std::move(model);
  return result;
}

}  // namespace qme::fusion
