#ifndef QME_NN_DENSE_HPP
#define QME_NN_DENSE_HPP

#include <cstdint>
#include <vector>

#include "qme/common.hpp"

namespace qme::nn {

enum class Activation { kRelu, kSigmoid, kIdentity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::kIdentity;
};

struct DenseGradients {
  std::vector<Matrix> weights;
  std::vector<Vector> bias;
};

// Fixed stack of affine+activation layers over f64. Forward caches enough for
// exact reverse-mode backward. Parameter edits bump a version stamp so a
// backward with a cache from an older forward is rejected (CacheMismatch).
class DenseNet {
 public:
  DenseNet() = default;

  // dims = {in, h1, ..., out}; acts.size() == dims.size() - 1.
  // Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
  DenseNet(const std::vector<Eigen::Index>& dims, const std::vector<Activation>& acts,
           Rng& rng);

  struct Cache {
    Matrix input;
    std::vector<Matrix> pre;   // pre-activation per layer
    std::vector<Matrix> post;  // post-activation per layer
    std::uint64_t version = 0;
  };

  // x: batch x in -> batch x out.
  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;

  // dout: batch x out. Accumulates parameter gradients into grads (which must
  // be zero-initialized or carry prior accumulation of matching shape) and
  // returns dL/dx.
  Matrix backward(const Cache& cache, const Matrix& dout, DenseGradients* grads) const;

  DenseGradients zero_gradients() const;

  Eigen::Index input_dim() const { return layers_.empty() ? 0 : layers_.front().weights.cols(); }
  Eigen::Index output_dim() const { return layers_.empty() ? 0 : layers_.back().weights.rows(); }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  Eigen::Index param_count() const;
  Vector param_vector() const;
  void set_param_vector(const Vector& params);
  // Writes gradients in the same flat order as param_vector.
  static Vector flatten_gradients(const DenseGradients& grads);

  std::uint64_t version() const { return version_; }

  // Direct layer replacement (checkpoint load, tests). Bumps the version.
  void set_layers(std::vector<DenseLayer> layers);

 private:
  std::vector<DenseLayer> layers_;
  std::uint64_t version_ = 0;
};

}  // namespace qme::nn

#endif  // QME_NN_DENSE_HPP
