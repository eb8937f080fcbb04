#ifndef QME_NN_OPTIM_HPP
#define QME_NN_OPTIM_HPP

#include <optional>

#include "qme/common.hpp"

namespace qme::nn {

// Linear warmup from 0 to peak over warmup_steps, then cosine annealing from
// peak down to floor at total_steps.
struct LrSchedule {
  int warmup_steps = 0;
  int total_steps = 1;
  double peak_lr = 1e-3;
  double floor_lr = 0.0;

  double at(int step) const;
  void validate() const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled; applied before the Adam delta
};

// Adam over a flat parameter vector. An optional decay mask (1 = decayed)
// exempts coordinates such as batch-norm scale/shift from weight decay.
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index param_count, AdamConfig config, LrSchedule schedule);

  // params <- params - lr*wd*params (masked) - lr * mhat / (sqrt(vhat) + eps).
  void step(Eigen::Ref<Vector> params, const Vector& grads);

  void set_decay_mask(Vector mask);
  int step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }
  const LrSchedule& schedule() const { return schedule_; }

 private:
  AdamConfig config_;
  LrSchedule schedule_;
  Vector first_moment_, second_moment_;
  std::optional<Vector> decay_mask_;
  int step_count_ = 0;
};

}  // namespace qme::nn

#endif  // QME_NN_OPTIM_HPP
