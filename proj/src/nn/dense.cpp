#include "qme/nn/dense.hpp"

#include <cmath>

namespace qme::nn {
namespace {

Matrix apply_activation(const Matrix& pre, Activation act) {
  switch (act) {
    case Activation::kRelu:
      return pre.cwiseMax(0.0);
    case Activation::kSigmoid:
      return pre.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    case Activation::kIdentity:
      return pre;
  }
  fail("UnknownActivation");
}

// d(post)/d(pre), elementwise, from the cached pre/post values.
Matrix activation_grad(const Matrix& pre, const Matrix& post, Activation act) {
  switch (act) {
    case Activation::kRelu:
      return pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::kSigmoid:
      return post.array() * (1.0 - post.array());
    case Activation::kIdentity:
      return Matrix::Ones(pre.rows(), pre.cols());
  }
  fail("UnknownActivation");
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kIdentity: return "identity";
  }
  fail("UnknownActivation");
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "identity") return Activation::kIdentity;
  fail("UnknownActivation", s);
}

DenseNet::DenseNet(const std::vector<Eigen::Index>& dims,
                   const std::vector<Activation>& acts, Rng& rng) {
  require(dims.size() >= 2, "ShapeError", "need at least one layer");
  require(acts.size() == dims.size() - 1, "ShapeError", "one activation per layer");
  layers_.reserve(acts.size());
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const Eigen::Index fan_in = dims[l];
    const Eigen::Index fan_out = dims[l + 1];
    require(fan_in >= 1 && fan_out >= 1, "ShapeError");
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer;
    layer.weights = Matrix::NullaryExpr(fan_out, fan_in, [&]() { return dist(rng); });
    layer.bias = Vector::Zero(fan_out);
    layer.activation = acts[l];
    layers_.push_back(std::move(layer));
  }
}

Matrix DenseNet::forward(const Matrix& x, Cache* cache) const {
  require(!layers_.empty(), "ShapeError", "empty network");
  require(x.cols() == input_dim(), "ShapeError",
          "input width " + std::to_string(x.cols()) + " != " + std::to_string(input_dim()));
  if (cache != nullptr) {
    cache->input = x;
    cache->pre.clear();
    cache->post.clear();
    cache->version = version_;
  }
  Matrix cur = x;
  for (const auto& layer : layers_) {
    Matrix pre = (cur * layer.weights.transpose()).rowwise() + layer.bias.transpose();
    Matrix post = apply_activation(pre, layer.activation);
    if (cache != nullptr) {
      cache->pre.push_back(pre);
      cache->post.push_back(post);
    }
    cur = std::move(post);
  }
  return cur;
}

Matrix DenseNet::backward(const Cache& cache, const Matrix& dout,
                          DenseGradients* grads) const {
  require(cache.version == version_, "CacheMismatch",
          "forward cache predates a parameter update");
  require(cache.pre.size() == layers_.size(), "CacheMismatch");
  require(dout.rows() == cache.input.rows() && dout.cols() == output_dim(), "ShapeError");

  Matrix delta = dout;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const auto& layer = layers_[l];
    const Matrix& pre = cache.pre[l];
    const Matrix& post = cache.post[l];
    delta = delta.cwiseProduct(activation_grad(pre, post, layer.activation));
    const Matrix& layer_in = (l == 0) ? cache.input : cache.post[l - 1];
    if (grads != nullptr) {
      grads->weights[l] += delta.transpose() * layer_in;
      grads->bias[l] += delta.colwise().sum().transpose();
    }
    delta = delta * layer.weights;
  }
  return delta;
}

DenseGradients DenseNet::zero_gradients() const {
  DenseGradients g;
  g.weights.reserve(layers_.size());
  g.bias.reserve(layers_.size());
  for (const auto& layer : layers_) {
    g.weights.push_back(Matrix::Zero(layer.weights.rows(), layer.weights.cols()));
    g.bias.push_back(Vector::Zero(layer.bias.size()));
  }
  return g;
}

Eigen::Index DenseNet::param_count() const {
  Eigen::Index n = 0;
  for (const auto& layer : layers_) n += layer.weights.size() + layer.bias.size();
  return n;
}

Vector DenseNet::param_vector() const {
  Vector out(param_count());
  Eigen::Index pos = 0;
  for (const auto& layer : layers_) {
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) out(pos++) = layer.weights(r, c);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) out(pos++) = layer.bias(r);
  }
  return out;
}

void DenseNet::set_param_vector(const Vector& params) {
  require(params.size() == param_count(), "ShapeError", "parameter vector size");
  Eigen::Index pos = 0;
  for (auto& layer : layers_) {
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = params(pos++);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = params(pos++);
  }
  ++version_;
}

Vector DenseNet::flatten_gradients(const DenseGradients& grads) {
  Eigen::Index n = 0;
  for (std::size_t l = 0; l < grads.weights.size(); ++l)
    n += grads.weights[l].size() + grads.bias[l].size();
  Vector out(n);
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < grads.weights.size(); ++l) {
    const Matrix& w = grads.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) out(pos++) = w(r, c);
    for (Eigen::Index r = 0; r < grads.bias[l].size(); ++r) out(pos++) = grads.bias[l](r);
  }
  return out;
}

void DenseNet::set_layers(std::vector<DenseLayer> layers) {
  require(!layers.empty(), "ShapeError");
  for (std::size_t l = 0; l + 1 < layers.size(); ++l)
    require(layers[l + 1].weights.cols() == layers[l].weights.rows(), "ShapeError",
            "layer dimension chain");
  for (const auto& layer : layers)
    require(layer.bias.size() == layer.weights.rows(), "ShapeError", "bias size");
  layers_ = std::move(layers);
  ++version_;
}

}  // namespace qme::nn
