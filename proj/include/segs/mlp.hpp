#pragma once

#include "segs/common.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace segs {

struct DenseLayer {
  MatX weight;  // out x in
  VecX bias;    // out
};

/// Activations kept by Mlp::forward for the backward pass. Columns are
/// batch items.
struct MlpCache {
  std::vector<MatX> inputs;  // input of each layer (post-ReLU for hidden layers)
  bool valid = false;
};

struct MlpGrad {
  std::vector<MatX> weight;
  std::vector<VecX> bias;

  void add(const MlpGrad& o) {
    for (std::size_t i = 0; i < weight.size(); ++i) {
      weight[i] += o.weight[i];
      bias[i] += o.bias[i];
    }
  }
  bool all_zero() const {
    for (std::size_t i = 0; i < weight.size(); ++i)
      if (!weight[i].isZero(0.0) || !bias[i].isZero(0.0)) return false;
    return true;
  }
};

/// Fully connected network with ReLU between layers and an identity output;
/// the output activation belongs to the caller.
class Mlp {
 public:
  std::vector<DenseLayer> layers;

  Mlp() = default;

  /// input -> hidden -> output with one ReLU. hidden == 0 gives a single
  /// linear layer. Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static Mlp make(int input_dim, int hidden_dim, int output_dim, std::mt19937_64& rng) {
    Mlp m;
    std::vector<int> dims{input_dim};
    if (hidden_dim > 0) dims.push_back(hidden_dim);
    dims.push_back(output_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const double bound = dims[l] > 0 ? 1.0 / std::sqrt(static_cast<double>(dims[l])) : 0.0;
      std::uniform_real_distribution<double> u(-bound, bound);
      DenseLayer layer{MatX(dims[l + 1], dims[l]), VecX(dims[l + 1])};
      for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = u(rng);
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = u(rng);
      m.layers.push_back(std::move(layer));
    }
    return m;
  }

  int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols()); }
  int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  MatX forward(const MatX& x, MlpCache* cache = nullptr) const {
    if (x.rows() != input_dim())
      throw ConfigError("mlp: input has " + std::to_string(x.rows()) + " rows, expected " +
                        std::to_string(input_dim()));
    if (cache) {
      cache->inputs.clear();
      cache->valid = true;
    }
    MatX h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (cache) cache->inputs.push_back(h);
      MatX y = layers[l].weight * h;
      y.colwise() += layers[l].bias;
      if (l + 1 < layers.size()) y = y.cwiseMax(0.0);
      h = std::move(y);
    }
    return h;
  }

  MlpGrad zero_grad() const {
    MlpGrad g;
    for (const auto& l : layers) {
      g.weight.push_back(MatX::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(VecX::Zero(l.bias.size()));
    }
    return g;
  }

  /// Accumulates parameter gradients into `grad` and returns dL/dinput.
  MatX backward(const MatX& grad_out, const MlpCache& cache, MlpGrad& grad) const {
    if (!cache.valid || cache.inputs.size() != layers.size()) throw UsageError("mlp: backward without forward cache");
    MatX g = grad_out;
    for (std::size_t l = layers.size(); l-- > 0;) {
      const MatX& in = cache.inputs[l];
      grad.weight[l].noalias() += g * in.transpose();
      grad.bias[l] += g.rowwise().sum();
      MatX gin = layers[l].weight.transpose() * g;
      if (l > 0) gin = gin.cwiseProduct((in.array() > 0.0).cast<double>().matrix());
      g = std::move(gin);
    }
    return g;
  }
};

}  // namespace segs
