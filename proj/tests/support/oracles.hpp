#pragma once

// Brute-force reference implementations used by unit and acceptance tests.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "deepclust/tensor.hpp"

namespace oracles {

using deepclust::Tensor;

// Sum of squared distances to per-cluster means. Clusters are labelled
// 0..k-1; empty clusters contribute nothing.
inline double partition_inertia(const Tensor& points, const std::vector<std::size_t>& labels, std::size_t k) {
  const std::size_t n = points.dim(0), d = points.dim(1);
  std::vector<double> mean(k * d, 0.0);
  std::vector<double> count(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    count[labels[i]] += 1.0;
    for (std::size_t t = 0; t < d; ++t) mean[labels[i] * d + t] += points(i, t);
  }
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t t = 0; t < d; ++t) {
      if (count[c] > 0) mean[c * d + t] /= count[c];
    }
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = points(i, t) - mean[labels[i] * d + t];
      s += diff * diff;
    }
  }
  return s;
}

// Minimum inertia over every labelling of the points with k labels.
inline double best_partition_inertia(const Tensor& points, std::size_t k) {
  const std::size_t n = points.dim(0);
  std::vector<std::size_t> labels(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    best = std::min(best, partition_inertia(points, labels, k));
    std::size_t i = 0;
    while (i < n && ++labels[i] == k) labels[i++] = 0;
    if (i == n) break;
  }
  return best;
}

// Fraction of points whose label maps to the truth under the best
// one-to-one relabelling, by trying every injection of predicted labels.
inline double brute_force_acc(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth) {
  const std::size_t kp = *std::max_element(pred.begin(), pred.end()) + 1;
  const std::size_t kt = *std::max_element(truth.begin(), truth.end()) + 1;
  const std::size_t m = std::max(kp, kt);
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t best = 0;
  do {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += perm[pred[i]] == truth[i];
    best = std::max(best, hit);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / static_cast<double>(pred.size());
}

// Minimum total cost over all assignments of rows to distinct columns
// (rows <= cols).
inline double brute_force_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t r = cost.size(), c = cost[0].size();
  std::vector<std::size_t> cols(c);
  std::iota(cols.begin(), cols.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) s += cost[i][cols[i]];
    best = std::min(best, s);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

}  // namespace oracles
