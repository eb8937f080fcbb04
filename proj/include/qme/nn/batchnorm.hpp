#ifndef QME_NN_BATCHNORM_HPP
#define QME_NN_BATCHNORM_HPP

#include <vector>

#include "qme/common.hpp"

namespace qme::nn {

// Per-feature batch normalization with running statistics and learnable
// scale/shift. Population variance is used both for normalization and for the
// running update. Masked entries are imputed as zero in normalized space
// (equivalent to imputing the running mean), contribute nothing to batch
// statistics, and pass no gradient to the input.
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(Eigen::Index features, double momentum = 0.1, double epsilon = 1e-5);

  struct Cache {
    Matrix x_hat;        // normalized values (0 at masked entries)
    Vector inv_std;      // per feature, as used in the forward pass
    BoolArray mask;
    bool train = false;
    Vector counts_;                // unmasked rows per feature
    std::vector<bool> batch_col_;  // feature used batch (vs running) stats
  };

  // x: batch x features. Train mode requires >= 2 unmasked rows per feature
  // (a batch of one throws DegenerateBatch) and updates running stats.
  Matrix forward(const Matrix& x, bool train, Cache* cache = nullptr,
                 const BoolArray* mask = nullptr);

  // Eval-mode normalization without touching running stats.
  Matrix apply_eval(const Matrix& x, const BoolArray* mask = nullptr) const;

  // Returns dL/dx; accumulates scale/shift gradients. Eval-mode caches yield
  // the frozen-statistics gradient (no batch-stat terms).
  Matrix backward(const Cache& cache, const Matrix& dout, Vector* dscale,
                  Vector* dshift) const;

  Eigen::Index features() const { return scale_.size(); }
  const Vector& running_mean() const { return running_mean_; }
  const Vector& running_var() const { return running_var_; }
  const Vector& scale() const { return scale_; }
  const Vector& shift() const { return shift_; }
  double momentum() const { return momentum_; }
  double epsilon() const { return epsilon_; }

  void set_stats(Vector mean, Vector var);
  void set_affine(Vector scale, Vector shift);

 private:
  Vector running_mean_, running_var_, scale_, shift_;
  double momentum_ = 0.1;
  double epsilon_ = 1e-5;
};

}  // namespace qme::nn

#endif  // QME_NN_BATCHNORM_HPP
