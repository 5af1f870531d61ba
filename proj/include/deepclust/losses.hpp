#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepclust/random.hpp"
#include "deepclust/tensor.hpp"

namespace deepclust {

// How a per-sample loss is aggregated over the batch. Each op documents its
// default; `mean` divides the loss and every gradient by the batch size.
enum class Reduction { sum, mean };

namespace detail {

inline double reduction_scale(Reduction r, std::size_t n) {
  return r == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
}

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(what) + ": expected a matrix, got " +
                                shape_str(t.shape()));
  }
}

inline void require_row_distributions(const Tensor& t, const char* what) {
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    double s = 0.0;
    for (double v : t.row(i)) {
      if (!(v >= 0.0)) {
        throw std::invalid_argument(std::string(what) + ": row " + std::to_string(i) +
                                    " has a negative entry");
      }
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string(what) + ": row " + std::to_string(i) +
                                  " sums to " + std::to_string(s));
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Non-clustering losses

struct LossGrad {
  double loss = 0.0;
  Tensor grad;
};

// mean over the batch of ||x_i - f(x_i)||^2; gradient wrt the reconstruction.
inline LossGrad reconstruction_mse(const Tensor& input, const Tensor& reconstruction) {
  input.require_same_shape(reconstruction, "reconstruction_mse");
  const double inv_n = 1.0 / static_cast<double>(input.dim(0));
  LossGrad out{0.0, Tensor::like(input)};
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double d = reconstruction[i] - input[i];
    out.loss += d * d;
    out.grad[i] = 2.0 * d * inv_n;
  }
  out.loss *= inv_n;
  return out;
}

enum class Similarity { negative_squared_distance, cross_entropy };

struct PairGrad {
  double loss = 0.0;
  Tensor grad_a;
  Tensor grad_b;
};

// -(1/N) sum_i s(a_i, b_i) with a = f(x), b = f(T(x)).
// cross_entropy: s(a, b) = sum_j a_j log b_j; both inputs must hold
// distributions in their rows.
inline PairGrad self_augmentation_loss(const Tensor& features, const Tensor& augmented,
                                       Similarity similarity = Similarity::negative_squared_distance) {
  features.require_same_shape(augmented, "self_augmentation_loss");
  const Tensor a = features.flattened();
  const Tensor b = augmented.flattened();
  const double inv_n = 1.0 / static_cast<double>(a.dim(0));
  PairGrad out{0.0, Tensor::like(a), Tensor::like(b)};
  if (similarity == Similarity::negative_squared_distance) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      out.loss += d * d;
      out.grad_a[i] = 2.0 * d * inv_n;
      out.grad_b[i] = -2.0 * d * inv_n;
    }
  } else {
    detail::require_row_distributions(a, "self_augmentation_loss");
    detail::require_row_distributions(b, "self_augmentation_loss");
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (b[i] <= 0.0) {
        if (a[i] > 0.0) {
          throw std::invalid_argument("self_augmentation_loss: zero probability under positive mass");
        }
        continue;
      }
      out.loss -= a[i] * std::log(b[i]);
      out.grad_a[i] = -std::log(b[i]) * inv_n;
      out.grad_b[i] = -a[i] / b[i] * inv_n;
    }
  }
  out.loss *= inv_n;
  out.grad_a = out.grad_a.reshaped(features.shape());
  out.grad_b = out.grad_b.reshaped(augmented.shape());
  return out;
}

struct AugmentationSpec {
  double noise_sigma = 0.0;
  std::size_t max_shift_pixels = 0;
};

// T(x): an integer translation of each image by up to max_shift_pixels per
// axis (zero fill), then additive Gaussian noise.
inline Tensor augment(const Tensor& batch, const AugmentationSpec& spec, Rng& rng) {
  if (spec.noise_sigma < 0.0) throw std::invalid_argument("augment: negative noise_sigma");
  Tensor out = batch;
  if (spec.max_shift_pixels > 0) {
    if (batch.rank() != 4) {
      throw std::invalid_argument("augment: shifting needs [n,c,h,w] input, got " +
                                  shape_str(batch.shape()));
    }
    const std::size_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    const auto span = static_cast<long>(2 * spec.max_shift_pixels + 1);
    const auto m = static_cast<long>(spec.max_shift_pixels);
    for (std::size_t n = 0; n < batch.dim(0); ++n) {
      const long dy = static_cast<long>(rng.index(span)) - m;
      const long dx = static_cast<long>(rng.index(span)) - m;
      auto src = batch.row(n);
      auto dst = out.row(n);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (long y = 0; y < static_cast<long>(h); ++y) {
          for (long x = 0; x < static_cast<long>(w); ++x) {
            const long sy = y - dy, sx = x - dx;
            const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 &&
                                sx < static_cast<long>(w);
            dst[(ch * h + y) * w + x] = inside ? src[(ch * h + sy) * w + sx] : 0.0;
          }
        }
      }
    }
  }
  if (spec.noise_sigma > 0.0) {
    for (double& v : out.values()) v += spec.noise_sigma * rng.normal();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clustering losses

struct EmbeddingLoss {
  double loss = 0.0;
  Tensor grad_embeddings;
  Tensor grad_centroids;
};

namespace detail {

inline void require_compatible(const Tensor& embeddings, const Tensor& centroids, const char* what) {
  require_matrix(embeddings, what);
  require_matrix(centroids, what);
  if (embeddings.dim(1) != centroids.dim(1)) {
    throw std::invalid_argument(std::string(what) + ": embedding dim " +
                                std::to_string(embeddings.dim(1)) + " vs centroid dim " +
                                std::to_string(centroids.dim(1)));
  }
}

}  // namespace detail

// sum_i ||z_i - mu_{s_i}||^2 (a sum in the paper; pass mean for batch use).
inline EmbeddingLoss kmeans_loss(const Tensor& embeddings, const Tensor& centroids,
                                 const std::vector<std::size_t>& assignments,
                                 Reduction reduction = Reduction::sum) {
  detail::require_compatible(embeddings, centroids, "kmeans_loss");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1), k = centroids.dim(0);
  if (assignments.size() != n) {
    throw std::invalid_argument("kmeans_loss: " + std::to_string(assignments.size()) +
                                " assignments for " + std::to_string(n) + " points");
  }
  const double scale = detail::reduction_scale(reduction, n);
  EmbeddingLoss out{0.0, Tensor::like(embeddings), Tensor::like(centroids)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = assignments[i];
    if (c >= k) {
      throw std::invalid_argument("kmeans_loss: point " + std::to_string(i) + " assigned to cluster " +
                                  std::to_string(c) + " of " + std::to_string(k));
    }
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = embeddings(i, j) - centroids(c, j);
      out.loss += diff * diff;
      out.grad_embeddings(i, j) = 2.0 * diff * scale;
      out.grad_centroids(c, j) -= 2.0 * diff * scale;
    }
  }
  out.loss *= scale;
  return out;
}

struct SoftAssignment {
  Tensor q;  // [n, k]
  double nu = 1.0;
};

struct TargetDistribution {
  Tensor p;  // [n, k]
};

// q_ij proportional to (1 + ||z_i - mu_j||^2 / nu)^(-(nu+1)/2), computed in
// log space and normalized per row.
inline SoftAssignment student_t_assignments(const Tensor& embeddings, const Tensor& centroids,
                                            double nu = 1.0) {
  if (!(nu > 0.0)) throw std::invalid_argument("student_t_assignments: nu must be positive");
  detail::require_compatible(embeddings, centroids, "student_t_assignments");
  const std::size_t n = embeddings.dim(0), k = centroids.dim(0);
  SoftAssignment sa{Tensor({n, k}), nu};
  const double power = -(nu + 1.0) / 2.0;
  std::vector<double> logw(k);
  for (std::size_t i = 0; i < n; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      logw[j] = power * std::log1p(squared_distance(embeddings.row(i), centroids.row(j)) / nu);
      top = std::max(top, logw[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      logw[j] = std::exp(logw[j] - top);
      total += logw[j];
    }
    for (std::size_t j = 0; j < k; ++j) sa.q(i, j) = logw[j] / total;
  }
  return sa;
}

// Chains dL/dq back to embeddings and centroids through the Student's-t
// kernel. Uses dL/dlog w_ij = q_ij (g_ij - sum_j' q_ij' g_ij') with
// g = dL/dlog q, and dlog w/dd = -(nu+1) / (2 (nu + d)).
inline EmbeddingLoss student_t_backward(const Tensor& embeddings, const Tensor& centroids,
                                        const SoftAssignment& sa, const Tensor& grad_q) {
  detail::require_compatible(embeddings, centroids, "student_t_backward");
  sa.q.require_same_shape(grad_q, "student_t_backward");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1), k = centroids.dim(0);
  EmbeddingLoss out{0.0, Tensor::like(embeddings), Tensor::like(centroids)};
  std::vector<double> glog(k);
  for (std::size_t i = 0; i < n; ++i) {
    double mass = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      glog[j] = sa.q(i, j) * grad_q(i, j);
      mass += glog[j];
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double dist = squared_distance(embeddings.row(i), centroids.row(j));
      const double dlogw = glog[j] - sa.q(i, j) * mass;
      const double coef = dlogw * -(sa.nu + 1.0) / (sa.nu + dist);  // includes the 2 from dd/dz
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = embeddings(i, t) - centroids(j, t);
        out.grad_embeddings(i, t) += coef * diff;
        out.grad_centroids(j, t) -= coef * diff;
      }
    }
  }
  return out;
}

inline TargetDistribution target_distribution(const SoftAssignment& sa) {
  const Tensor& q = sa.q;
  detail::require_matrix(q, "target_distribution");
  const std::size_t n = q.dim(0), k = q.dim(1);
  std::vector<double> freq(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) freq[j] += q(i, j);
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (!(freq[j] > 0.0)) {
      throw std::domain_error("target_distribution: cluster " + std::to_string(j) +
                              " has zero soft mass");
    }
  }
  TargetDistribution t{Tensor({n, k})};
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      t.p(i, j) = q(i, j) * q(i, j) / freq[j];
      total += t.p(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) t.p(i, j) /= total;
  }
  return t;
}

// KL(P || Q) alone; no gradient.
inline double kl_divergence(const Tensor& p, const Tensor& q) {
  p.require_same_shape(q, "kl_divergence");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (q[i] <= 0.0) throw std::domain_error("kl_divergence: zero entry in Q");
    if (p[i] > 0.0) loss += p[i] * std::log(p[i] / q[i]);
  }
  // Rounding can leave a residue of order -1e-16 when P and Q nearly agree.
  return std::max(loss, 0.0);
}

// sum_i sum_j p_ij log(p_ij / q_ij), P held constant. Gradients reach the
// embeddings and centroids that produced Q.
inline EmbeddingLoss assignment_hardening_kl(const TargetDistribution& target, const SoftAssignment& sa,
                                             const Tensor& embeddings, const Tensor& centroids,
                                             Reduction reduction = Reduction::sum) {
  const double loss = kl_divergence(target.p, sa.q);
  const double scale = detail::reduction_scale(reduction, sa.q.dim(0));
  Tensor grad_q = Tensor::like(sa.q);
  for (std::size_t i = 0; i < grad_q.size(); ++i) grad_q[i] = -target.p[i] / sa.q[i] * scale;
  EmbeddingLoss out = student_t_backward(embeddings, centroids, sa, grad_q);
  out.loss = loss * scale;
  return out;
}

// KL(G || prior) with g_k = (1/N) sum_i q_ik; prior defaults to uniform.
// Gradient is wrt Q; chain it with student_t_backward.
inline LossGrad balanced_assignments_loss(const SoftAssignment& sa,
                                          const std::optional<std::vector<double>>& prior = std::nullopt) {
  const Tensor& q = sa.q;
  detail::require_matrix(q, "balanced_assignments_loss");
  const std::size_t n = q.dim(0), k = q.dim(1);
  std::vector<double> u(k, 1.0 / static_cast<double>(k));
  if (prior) {
    if (prior->size() != k) {
      throw std::invalid_argument("balanced_assignments_loss: prior has " +
                                  std::to_string(prior->size()) + " entries for " + std::to_string(k) +
                                  " clusters");
    }
    double s = 0.0;
    for (double v : *prior) {
      if (!(v > 0.0)) throw std::invalid_argument("balanced_assignments_loss: prior has a zero entry");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("balanced_assignments_loss: prior does not sum to 1");
    u = *prior;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> g(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) g[j] += q(i, j) * inv_n;
  }
  LossGrad out{0.0, Tensor::like(q)};
  for (std::size_t j = 0; j < k; ++j) {
    if (!(g[j] > 0.0)) {
      throw std::domain_error("balanced_assignments_loss: cluster " + std::to_string(j) + " has zero mass");
    }
    const double lg = std::log(g[j] / u[j]);
    out.loss += g[j] * lg;
    for (std::size_t i = 0; i < n; ++i) out.grad(i, j) = (lg + 1.0) * inv_n;
  }
  return out;
}

struct LocalityGraph {
  std::vector<std::vector<std::size_t>> neighbors;
  std::vector<std::vector<double>> weights;

  std::size_t size() const { return neighbors.size(); }

  LocalityGraph scaled(double c) const {
    LocalityGraph g = *this;
    for (auto& row : g.weights) {
      for (double& w : row) w *= c;
    }
    return g;
  }
};

// sum_i sum_{j in N(i)} s_ij ||z_i - z_j||^2, both directed terms kept.
inline LossGrad locality_preserving_loss(const Tensor& embeddings, const LocalityGraph& graph,
                                         Reduction reduction = Reduction::sum) {
  detail::require_matrix(embeddings, "locality_preserving_loss");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (graph.size() != n || graph.weights.size() != n) {
    throw std::invalid_argument("locality_preserving_loss: graph over " + std::to_string(graph.size()) +
                                " points for " + std::to_string(n) + " embeddings");
  }
  const double scale = detail::reduction_scale(reduction, n);
  LossGrad out{0.0, Tensor::like(embeddings)};
  for (std::size_t i = 0; i < n; ++i) {
    if (graph.weights[i].size() != graph.neighbors[i].size()) {
      throw std::invalid_argument("locality_preserving_loss: weight count mismatch at point " +
                                  std::to_string(i));
    }
    for (std::size_t t = 0; t < graph.neighbors[i].size(); ++t) {
      const std::size_t j = graph.neighbors[i][t];
      if (j >= n) {
        throw std::out_of_range("locality_preserving_loss: neighbor " + std::to_string(j) +
                                " of point " + std::to_string(i) + " out of range");
      }
      const double s = graph.weights[i][t];
      out.loss += s * squared_distance(embeddings.row(i), embeddings.row(j));
      for (std::size_t c = 0; c < d; ++c) {
        const double g = 2.0 * s * (embeddings(i, c) - embeddings(j, c)) * scale;
        out.grad(i, c) += g;
        out.grad(j, c) -= g;
      }
    }
  }
  out.loss *= scale;
  return out;
}

struct GroupSparsityParams {
  std::vector<std::size_t> group_sizes;
  double lambda = 1.0;

  // k near-equal contiguous groups covering `dim` features.
  static GroupSparsityParams equal_groups(std::size_t dim, std::size_t groups, double lambda) {
    if (groups == 0 || groups > dim) {
      throw std::invalid_argument("group sparsity: cannot split " + std::to_string(dim) +
                                  " features into " + std::to_string(groups) + " groups");
    }
    GroupSparsityParams p;
    p.lambda = lambda;
    for (std::size_t g = 0; g < groups; ++g) p.group_sizes.push_back(dim / groups + (g < dim % groups));
    return p;
  }

  std::vector<double> group_weights() const {
    std::vector<double> w;
    for (std::size_t s : group_sizes) w.push_back(lambda * std::sqrt(static_cast<double>(s)));
    return w;
  }
};

// sum_i sum_g lambda_g ||phi^g(x_i)||; subgradient 0 on zero groups.
inline LossGrad group_sparsity_loss(const Tensor& features, const GroupSparsityParams& params,
                                    Reduction reduction = Reduction::sum) {
  detail::require_matrix(features, "group_sparsity_loss");
  if (!(params.lambda > 0.0)) throw std::invalid_argument("group_sparsity_loss: lambda must be positive");
  std::size_t total = 0;
  for (std::size_t s : params.group_sizes) {
    if (s == 0) throw std::invalid_argument("group_sparsity_loss: empty group");
    total += s;
  }
  if (total != features.dim(1)) {
    throw std::invalid_argument("group_sparsity_loss: groups cover " + std::to_string(total) +
                                " features, input has " + std::to_string(features.dim(1)));
  }
  const std::vector<double> lambdas = params.group_weights();
  const std::size_t n = features.dim(0);
  const double scale = detail::reduction_scale(reduction, n);
  LossGrad out{0.0, Tensor::like(features)};
  for (std::size_t i = 0; i < n; ++i) {
    auto row = features.row(i);
    auto grow = out.grad.row(i);
    std::size_t begin = 0;
    for (std::size_t g = 0; g < lambdas.size(); ++g) {
      const std::size_t end = begin + params.group_sizes[g];
      double sq = 0.0;
      for (std::size_t c = begin; c < end; ++c) sq += row[c] * row[c];
      const double norm = std::sqrt(sq);
      out.loss += lambdas[g] * norm;
      if (norm > 0.0) {
        for (std::size_t c = begin; c < end; ++c) grow[c] = lambdas[g] * row[c] / norm * scale;
      }
      begin = end;
    }
  }
  out.loss *= scale;
  return out;
}

inline Tensor softmax_rows(const Tensor& logits) {
  detail::require_matrix(logits, "softmax_rows");
  Tensor out = Tensor::like(logits);
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    auto x = logits.row(i);
    auto y = out.row(i);
    const double top = *std::max_element(x.begin(), x.end());
    double total = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) total += y[j] = std::exp(x[j] - top);
    for (double& v : y) v /= total;
  }
  return out;
}

// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
inline Tensor softmax_rows_backward(const Tensor& y, const Tensor& grad_y) {
  y.require_same_shape(grad_y, "softmax_rows_backward");
  Tensor out = Tensor::like(y);
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < y.dim(1); ++j) dot += y(i, j) * grad_y(i, j);
    for (std::size_t j = 0; j < y.dim(1); ++j) out(i, j) = y(i, j) * (grad_y(i, j) - dot);
  }
  return out;
}

// Softmax cross-entropy against mock labels, averaged per sample by default.
inline LossGrad cluster_classification_loss(const Tensor& logits, const std::vector<std::size_t>& labels,
                                            Reduction reduction = Reduction::mean) {
  detail::require_matrix(logits, "cluster_classification_loss");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw std::invalid_argument("cluster_classification_loss: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " rows");
  }
  const double scale = detail::reduction_scale(reduction, n);
  LossGrad out{0.0, softmax_rows(logits)};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw std::invalid_argument("cluster_classification_loss: label " + std::to_string(labels[i]) +
                                  " at row " + std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
    auto x = logits.row(i);
    const double top = *std::max_element(x.begin(), x.end());
    double total = 0.0;
    for (double v : x) total += std::exp(v - top);
    out.loss += top + std::log(total) - x[labels[i]];
    out.grad(i, labels[i]) -= 1.0;
  }
  out.grad *= scale;
  out.loss *= scale;
  return out;
}

using PointSet = std::vector<std::size_t>;

struct MergedPair {
  PointSet a;
  PointSet b;
};

inline constexpr double kAffinityEpsilon = 1e-6;

// Mean squared distance over all cross pairs of the two point sets.
inline double mean_cross_distance(const Tensor& embeddings, const PointSet& a, const PointSet& b) {
  double s = 0.0;
  for (std::size_t i : a) {
    for (std::size_t j : b) s += squared_distance(embeddings.row(i), embeddings.row(j));
  }
  return s / static_cast<double>(a.size() * b.size());
}

// A(c_i, c_j) = 1 / (eps + mean cross squared distance).
inline double cluster_affinity(const Tensor& embeddings, const PointSet& a, const PointSet& b) {
  return 1.0 / (kAffinityEpsilon + mean_cross_distance(embeddings, a, b));
}

// -sum over merged pairs of A(c_a, c_b).
inline LossGrad agglomerative_loss(const Tensor& embeddings, const std::vector<MergedPair>& merged) {
  detail::require_matrix(embeddings, "agglomerative_loss");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  LossGrad out{0.0, Tensor::like(embeddings)};
  for (std::size_t m = 0; m < merged.size(); ++m) {
    const auto& [a, b] = merged[m];
    if (a.empty() || b.empty()) {
      throw std::invalid_argument("agglomerative_loss: merged pair " + std::to_string(m) +
                                  " has an empty cluster");
    }
    for (const PointSet* set : {&a, &b}) {
      for (std::size_t i : *set) {
        if (i >= n) throw std::out_of_range("agglomerative_loss: point index " + std::to_string(i));
      }
    }
    const double mean = mean_cross_distance(embeddings, a, b);
    const double denom = kAffinityEpsilon + mean;
    out.loss -= 1.0 / denom;
    // d(-A)/dD = 1 / denom^2 and dD/dz_a = 2/(|A||B|) sum_b (z_a - z_b)
    const double coef = 2.0 / (denom * denom * static_cast<double>(a.size() * b.size()));
    for (std::size_t i : a) {
      for (std::size_t j : b) {
        for (std::size_t c = 0; c < d; ++c) {
          const double g = coef * (embeddings(i, c) - embeddings(j, c));
          out.grad(i, c) += g;
          out.grad(j, c) -= g;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Combination

using GradMap = std::map<std::string, Tensor>;

struct LossTerm {
  double value = 0.0;
  GradMap grads;

  // this += w * other, merging gradients by name.
  void accumulate(const LossTerm& other, double w) {
    value += w * other.value;
    for (const auto& [name, g] : other.grads) {
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, g * w);
      } else {
        it->second.add_scaled(g, w);
      }
    }
  }

  LossTerm scaled(double c) const {
    LossTerm t;
    t.accumulate(*this, c);
    return t;
  }
};

// alpha * L_c + (1 - alpha) * L_n. A term with weight exactly zero is left out
// entirely, so alpha = 0 yields the non-clustering term bit for bit.
inline LossTerm combine_losses(const LossTerm& clustering, const LossTerm& non_clustering, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("combine_losses: alpha " + std::to_string(alpha) + " outside [0,1]");
  }
  LossTerm out;
  if (alpha != 1.0) out.accumulate(non_clustering, 1.0 - alpha);
  if (alpha != 0.0) out.accumulate(clustering, alpha);
  return out;
}

enum class AlphaMode { pretrain_finetune, joint, variable };

struct AlphaSchedule {
  AlphaMode mode = AlphaMode::joint;
  double alpha_constant = 0.5;
  double ramp_start = 0.0;
  double ramp_end = 1.0;
  std::size_t ramp_steps = 100;

  void validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(alpha_constant) || !in_unit(ramp_start) || !in_unit(ramp_end)) {
      throw std::invalid_argument("AlphaSchedule: alpha values must lie in [0,1]");
    }
  }
};

// Phases are named "pretrain" and "finetune".
inline double alpha_at(const AlphaSchedule& schedule, std::string_view phase, std::size_t step) {
  schedule.validate();
  const bool pretrain = phase == "pretrain";
  if (!pretrain && phase != "finetune") {
    throw std::invalid_argument("alpha_at: unknown phase '" + std::string(phase) + "'");
  }
  switch (schedule.mode) {
    case AlphaMode::pretrain_finetune:
      return pretrain ? 0.0 : 1.0;
    case AlphaMode::joint:
      return schedule.alpha_constant;
    case AlphaMode::variable: {
      if (schedule.ramp_steps == 0 || step >= schedule.ramp_steps) return schedule.ramp_end;
      const double t = static_cast<double>(step) / static_cast<double>(schedule.ramp_steps);
      return schedule.ramp_start + t * (schedule.ramp_end - schedule.ramp_start);
    }
  }
  throw std::invalid_argument("alpha_at: unknown mode");
}

}  // namespace deepclust
