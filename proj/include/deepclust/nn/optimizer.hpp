#pragma once

#include <stdexcept>
#include <vector>

#include "deepclust/nn/network.hpp"

namespace deepclust::nn {

struct SgdSettings {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double l2_coefficient = 1e-4;
};

// SGD with momentum over a fixed list of parameters:
//   v <- momentum * v + grad + l2 * theta
//   theta <- theta - lr * v
// Parameters with decay == false skip the l2 term.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Parameter*> params, SgdSettings settings)
      : params_(std::move(params)), settings_(settings) {
    if (!(settings.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (settings.momentum < 0.0 || settings.momentum >= 1.0) {
      throw std::invalid_argument("momentum must be in [0,1)");
    }
    if (settings.l2_coefficient < 0.0) throw std::invalid_argument("l2 coefficient must be non-negative");
    velocity_.reserve(params_.size());
    for (Parameter* p : params_) velocity_.push_back(Tensor::like(p->value));
  }

  const SgdSettings& settings() const { return settings_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

  // Applies one update and zeroes the gradient buffers.
  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      Tensor& v = velocity_[k];
      const double l2 = p.decay ? settings_.l2_coefficient : 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = settings_.momentum * v[i] + p.grad[i] + l2 * p.value[i];
        p.value[i] -= settings_.learning_rate * v[i];
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<Parameter*> params_;
  SgdSettings settings_;
  std::vector<Tensor> velocity_;
};

}  // namespace deepclust::nn
