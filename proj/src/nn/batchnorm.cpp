#include "qme/nn/batchnorm.hpp"

#include <cmath>

namespace qme::nn {

BatchNorm::BatchNorm(Eigen::Index features, double momentum, double epsilon)
    : running_mean_(Vector::Zero(features)),
      running_var_(Vector::Ones(features)),
      scale_(Vector::Ones(features)),
      shift_(Vector::Zero(features)),
      momentum_(momentum),
      epsilon_(epsilon) {
  require(features >= 1, "ShapeError");
  require(momentum > 0.0 && momentum < 1.0, "InvalidMomentum");
  require(epsilon > 0.0, "InvalidEpsilon");
}

Matrix BatchNorm::forward(const Matrix& x, bool train, Cache* cache,
                          const BoolArray* mask) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  require(cols == features(), "ShapeError", "feature width");
  if (mask != nullptr)
    require(mask->rows() == rows && mask->cols() == cols, "ShapeError", "mask shape");
  if (train) require(rows >= 2, "DegenerateBatch", "train mode needs batch >= 2");

  Matrix x_hat = Matrix::Zero(rows, cols);
  Vector inv_std(cols);
  Vector counts = Vector::Zero(cols);
  std::vector<bool> batch_col(static_cast<std::size_t>(cols), false);

  for (Eigen::Index j = 0; j < cols; ++j) {
    double n = 0.0, sum = 0.0, sum_sq = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (mask != nullptr && !(*mask)(i, j)) continue;
      n += 1.0;
      sum += x(i, j);
      sum_sq += x(i, j) * x(i, j);
    }
    counts(j) = n;

    // A fully (or nearly fully) masked column cannot yield batch statistics;
    // it falls back to the running stats and is not updated.
    const bool use_batch = train && n >= 2.0;
    batch_col[static_cast<std::size_t>(j)] = use_batch;

    double mean, var;
    if (use_batch) {
      mean = sum / n;
      var = std::max(sum_sq / n - mean * mean, 0.0);  // population variance
      running_mean_(j) = (1.0 - momentum_) * running_mean_(j) + momentum_ * mean;
      running_var_(j) = (1.0 - momentum_) * running_var_(j) + momentum_ * var;
    } else {
      mean = running_mean_(j);
      var = running_var_(j);
    }
    inv_std(j) = 1.0 / std::sqrt(var + epsilon_);
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (mask != nullptr && !(*mask)(i, j)) continue;  // stays 0 in normalized space
      x_hat(i, j) = (x(i, j) - mean) * inv_std(j);
    }
  }

  if (cache != nullptr) {
    cache->x_hat = x_hat;
    cache->inv_std = inv_std;
    cache->mask = mask != nullptr ? *mask : BoolArray::Constant(rows, cols, true);
    cache->train = train;
    cache->counts_ = counts;
    cache->batch_col_ = batch_col;
  }

  Matrix y(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    y.col(j) = (x_hat.col(j).array() * scale_(j) + shift_(j)).matrix();
  return y;
}

Matrix BatchNorm::apply_eval(const Matrix& x, const BoolArray* mask) const {
  // forward() in eval mode never mutates state, so this cast is sound.
  return const_cast<BatchNorm*>(this)->forward(x, false, nullptr, mask);
}

Matrix BatchNorm::backward(const Cache& cache, const Matrix& dout, Vector* dscale,
                           Vector* dshift) const {
  const Eigen::Index rows = dout.rows();
  const Eigen::Index cols = dout.cols();
  require(cache.x_hat.rows() == rows && cache.x_hat.cols() == cols, "CacheMismatch");

  Matrix dx = Matrix::Zero(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (dshift != nullptr) (*dshift)(j) += dout(i, j);
      if (dscale != nullptr) (*dscale)(j) += dout(i, j) * cache.x_hat(i, j);
      if (!cache.mask(i, j)) continue;
      const double dxhat = dout(i, j) * scale_(j);
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * cache.x_hat(i, j);
    }
    const bool batch_stats = cache.train && cache.batch_col_[static_cast<std::size_t>(j)];
    const double n = cache.counts_(j);
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (!cache.mask(i, j)) continue;
      const double dxhat = dout(i, j) * scale_(j);
      if (batch_stats) {
        dx(i, j) = cache.inv_std(j) / n *
                   (n * dxhat - sum_dxhat - cache.x_hat(i, j) * sum_dxhat_xhat);
      } else {
        dx(i, j) = dxhat * cache.inv_std(j);
      }
    }
  }
  return dx;
}

void BatchNorm::set_stats(Vector mean, Vector var) {
  require(mean.size() == features() && var.size() == features(), "ShapeError");
  require((var.array() >= 0.0).all(), "InvalidVariance");
  running_mean_ = std::move(mean);
  running_var_ = std::move(var);
}

void BatchNorm::set_affine(Vector scale, Vector shift) {
  require(scale.size() == features() && shift.size() == features(), "ShapeError");
  scale_ = std::move(scale);
  shift_ = std::move(shift);
}

}  // namespace qme::nn
