#include "qme/nn/optim.hpp"

#include <cmath>
#include <numbers>

namespace qme::nn {

void LrSchedule::validate() const {
  require(warmup_steps >= 0 && warmup_steps < total_steps, "InvalidSchedule",
          "need 0 <= warmup < total");
  require(floor_lr <= peak_lr && floor_lr >= 0.0, "InvalidSchedule");
}

double LrSchedule::at(int step) const {
  validate();
  require(step >= 0 && step <= total_steps, "ScheduleOverrun",
          "step " + std::to_string(step) + " of " + std::to_string(total_steps));
  if (step < warmup_steps)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return floor_lr + (peak_lr - floor_lr) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

Adam::Adam(Eigen::Index param_count, AdamConfig config, LrSchedule schedule)
    : config_(config),
      schedule_(schedule),
      first_moment_(Vector::Zero(param_count)),
      second_moment_(Vector::Zero(param_count)) {
  schedule_.validate();
}

void Adam::set_decay_mask(Vector mask) {
  require(mask.size() == first_moment_.size(), "ShapeError", "decay mask size");
  decay_mask_ = std::move(mask);
}

void Adam::step(Eigen::Ref<Vector> params, const Vector& grads) {
  require(params.size() == first_moment_.size(), "ShapeError", "parameter size");
  require(grads.size() == params.size(), "ShapeError", "gradient size");
  require(grads.allFinite(), "NonFiniteGradient");

  const double lr = schedule_.at(std::min(step_count_, schedule_.total_steps));
  ++step_count_;

  if (config_.weight_decay != 0.0) {
    if (decay_mask_.has_value())
      params.array() -= lr * config_.weight_decay * params.array() * decay_mask_->array();
    else
      params.array() -= lr * config_.weight_decay * params.array();
  }

  first_moment_ = config_.beta1 * first_moment_ + (1.0 - config_.beta1) * grads;
  second_moment_ =
      config_.beta2 * second_moment_.array() + (1.0 - config_.beta2) * grads.array().square();
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  params.array() -= lr * (first_moment_.array() / bc1) /
                    ((second_moment_.array() / bc2).sqrt() + config_.epsilon);
}

}  // namespace qme::nn
