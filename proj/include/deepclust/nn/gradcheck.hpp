#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "deepclust/nn/network.hpp"

namespace deepclust::nn {

// Evaluates a scalar loss. When `with_gradient` is true it must also
// accumulate d(loss)/d(param) into every checked parameter's grad buffer.
using LossEvaluator = std::function<double(bool with_gradient)>;

// max over all parameter entries of
//   |analytic - central difference| / max(1, |central difference|)
inline double finite_diff_check(const std::vector<Parameter*>& params,
                                const LossEvaluator& loss, double epsilon = 1e-5) {
  if (params.empty()) return 0.0;
  for (Parameter* p : params) p->zero_grad();
  const double base = loss(true);
  if (!std::isfinite(base)) throw std::runtime_error("finite_diff_check: non-finite loss");
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& value = params[k]->value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + epsilon;
      const double up = loss(false);
      value[i] = orig - epsilon;
      const double down = loss(false);
      value[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::runtime_error("finite_diff_check: non-finite loss while probing " +
                                 params[k]->name);
      }
      const double numeric = (up - down) / (2.0 * epsilon);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return worst;
}

// Checks every parameter of `net`; the evaluator runs forward (and backward
// when asked) on the network itself.
inline double finite_diff_check(Network& net, const std::function<double(Network&, bool)>& loss,
                                double epsilon = 1e-5) {
  return finite_diff_check(net.parameters(), [&](bool g) { return loss(net, g); }, epsilon);
}

}  // namespace deepclust::nn
