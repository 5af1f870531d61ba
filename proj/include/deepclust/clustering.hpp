#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepclust/losses.hpp"
#include "deepclust/random.hpp"
#include "deepclust/tensor.hpp"

namespace deepclust {

struct ClusterModel {
  Tensor centroids;                      // [k, d]
  std::vector<std::size_t> assignments;  // one id per point
  double inertia = 0.0;
  std::vector<double> inertia_history;   // after every Lloyd iteration and transfer sweep
  std::size_t iterations = 0;

  std::size_t k() const { return centroids.dim(0); }

  std::vector<std::size_t> cluster_sizes() const {
    std::vector<std::size_t> sizes(k(), 0);
    for (std::size_t a : assignments) ++sizes[a];
    return sizes;
  }
};

// Fires when fewer than threshold_fraction of the points changed cluster in
// the last iteration, when nothing changed at all, or at max_iterations.
struct StopRule {
  double threshold_fraction = 0.0;
  std::size_t max_iterations = 300;

  bool fires(std::size_t changed, std::size_t n, std::size_t iteration) const {
    if (changed == 0 || iteration >= max_iterations) return true;
    return static_cast<double>(changed) / static_cast<double>(n) < threshold_fraction;
  }
};

inline StopRule stop_rule_assignment_change(double threshold_fraction, std::size_t max_iterations = 300) {
  if (!(threshold_fraction >= 0.0 && threshold_fraction <= 1.0)) {
    throw std::invalid_argument("stop rule threshold must lie in [0,1]");
  }
  if (max_iterations == 0) throw std::invalid_argument("stop rule needs at least one iteration");
  return StopRule{threshold_fraction, max_iterations};
}

enum class KmeansInit { kmeanspp, random, provided };

struct KmeansOptions {
  KmeansInit init = KmeansInit::kmeanspp;
  StopRule stop{};
  std::uint64_t seed = 0;
  Tensor initial_centroids;  // used with KmeansInit::provided
  // After Lloyd converges, move single points between clusters whenever that
  // lowers the objective once both means shift, then resume Lloyd.
  bool transfer_refinement = true;
};

namespace detail {

inline void require_points(const Tensor& points, std::size_t k, const char* what) {
  require_matrix(points, what);
  if (k == 0) throw std::invalid_argument(std::string(what) + ": k must be at least 1");
  if (k > points.dim(0)) {
    throw std::invalid_argument(std::string(what) + ": k=" + std::to_string(k) + " exceeds " +
                                std::to_string(points.dim(0)) + " points");
  }
  if (!points.all_finite()) throw std::invalid_argument(std::string(what) + ": non-finite point");
}

inline void copy_row(const Tensor& from, std::size_t i, Tensor& to, std::size_t j) {
  auto src = from.row(i);
  std::copy(src.begin(), src.end(), to.row(j).begin());
}

// Nearest centroid, lowest index on ties.
inline std::size_t nearest(const Tensor& centroids, std::span<const double> x, double* dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < centroids.dim(0); ++j) {
    const double d = squared_distance(x, centroids.row(j));
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  if (dist) *dist = best_d;
  return best;
}

inline double inertia_of(const Tensor& points, const Tensor& centroids, const std::vector<std::size_t>& assign) {
  double s = 0.0;
  for (std::size_t i = 0; i < assign.size(); ++i) s += squared_distance(points.row(i), centroids.row(assign[i]));
  return s;
}

inline void recompute_means(const Tensor& points, const std::vector<std::size_t>& assign, Tensor& centroids,
                            std::vector<std::size_t>& counts) {
  const std::size_t d = points.dim(1);
  centroids.fill(0.0);
  std::fill(counts.begin(), counts.end(), 0);
  for (std::size_t i = 0; i < assign.size(); ++i) {
    auto dst = centroids.row(assign[i]);
    auto src = points.row(i);
    for (std::size_t t = 0; t < d; ++t) dst[t] += src[t];
    ++counts[assign[i]];
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) continue;
    for (double& v : centroids.row(c)) v /= static_cast<double>(counts[c]);
  }
}

// One sweep of single-point transfers. Moving x from A to B changes the
// objective by n_B/(n_B+1)|x-mu_B|^2 - n_A/(n_A-1)|x-mu_A|^2.
inline std::size_t transfer_pass(const Tensor& points, std::vector<std::size_t>& assign, Tensor& centroids,
                                 std::vector<std::size_t>& counts) {
  const std::size_t n = points.dim(0), d = points.dim(1), k = centroids.dim(0);
  std::size_t moved = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = assign[i];
    if (counts[a] < 2) continue;
    auto x = points.row(i);
    const double na = static_cast<double>(counts[a]);
    const double remove = na / (na - 1.0) * squared_distance(x, centroids.row(a));
    std::size_t best = a;
    double best_add = remove;
    for (std::size_t b = 0; b < k; ++b) {
      if (b == a) continue;
      const double nb = static_cast<double>(counts[b]);
      const double add = nb / (nb + 1.0) * squared_distance(x, centroids.row(b));
      if (add < best_add) {
        best_add = add;
        best = b;
      }
    }
    if (best == a || best_add >= remove * (1.0 - 1e-12)) continue;
    auto ma = centroids.row(a);
    auto mb = centroids.row(best);
    const double nb = static_cast<double>(counts[best]);
    for (std::size_t t = 0; t < d; ++t) {
      ma[t] = (na * ma[t] - x[t]) / (na - 1.0);
      mb[t] = (nb * mb[t] + x[t]) / (nb + 1.0);
    }
    --counts[a];
    ++counts[best];
    assign[i] = best;
    ++moved;
  }
  return moved;
}

}  // namespace detail

// Standard k-means++ seeding: first centre uniform, then each next centre
// with probability proportional to squared distance to the closest one.
inline Tensor kmeanspp_init(const Tensor& points, std::size_t k, std::uint64_t seed) {
  detail::require_points(points, k, "kmeanspp_init");
  const std::size_t n = points.dim(0);
  Rng rng(seed);
  Tensor centroids({k, points.dim(1)});
  detail::copy_row(points, rng.index(n), centroids, 0);
  std::vector<double> closest(n);
  for (std::size_t i = 0; i < n; ++i) closest[i] = squared_distance(points.row(i), centroids.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(closest.begin(), closest.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (closest[i] <= 0.0) continue;
        cum += closest[i];
        pick = i;
        if (cum > r) break;
      }
    } else {
      pick = rng.index(n);  // every point coincides with a chosen centre
    }
    detail::copy_row(points, pick, centroids, c);
    for (std::size_t i = 0; i < n; ++i) {
      closest[i] = std::min(closest[i], squared_distance(points.row(i), centroids.row(c)));
    }
  }
  return centroids;
}

// k distinct points chosen uniformly.
inline Tensor random_init(const Tensor& points, std::size_t k, std::uint64_t seed) {
  detail::require_points(points, k, "random_init");
  Rng rng(seed);
  std::vector<std::size_t> idx(points.dim(0));
  std::iota(idx.begin(), idx.end(), 0);
  Tensor centroids({k, points.dim(1)});
  for (std::size_t c = 0; c < k; ++c) {
    std::swap(idx[c], idx[c + rng.index(idx.size() - c)]);
    detail::copy_row(points, idx[c], centroids, c);
  }
  return centroids;
}

// Lloyd iterations. Each iteration assigns points, recomputes means, and
// reseeds any empty cluster at the point farthest from its own centroid.
// When the stop rule fires, an optional transfer sweep may reopen the loop.
inline ClusterModel kmeans(const Tensor& points, std::size_t k, const KmeansOptions& opts = {}) {
  detail::require_points(points, k, "kmeans");
  const std::size_t n = points.dim(0), d = points.dim(1);
  ClusterModel m;
  switch (opts.init) {
    case KmeansInit::kmeanspp:
      m.centroids = kmeanspp_init(points, k, opts.seed);
      break;
    case KmeansInit::random:
      m.centroids = random_init(points, k, opts.seed);
      break;
    case KmeansInit::provided:
      if (opts.initial_centroids.shape() != Shape{k, d}) {
        throw std::invalid_argument("kmeans: provided centroids have shape " +
                                    shape_str(opts.initial_centroids.shape()) + ", expected " +
                                    shape_str({k, d}));
      }
      if (!opts.initial_centroids.all_finite()) throw std::invalid_argument("kmeans: non-finite centroid");
      m.centroids = opts.initial_centroids;
      break;
  }
  m.assignments.assign(n, k);  // k marks "unassigned"
  std::vector<std::size_t> counts(k);
  auto record = [&](std::size_t it) {
    m.inertia = detail::inertia_of(points, m.centroids, m.assignments);
    if (!m.inertia_history.empty() && m.inertia > m.inertia_history.back() * (1.0 + 1e-12) + 1e-300) {
      throw std::logic_error("kmeans: inertia increased at iteration " + std::to_string(it));
    }
    m.inertia_history.push_back(m.inertia);
  };
  bool first = true;
  for (std::size_t it = 1;; ++it) {
    std::size_t changed = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = detail::nearest(m.centroids, points.row(i));
      if (c != m.assignments[i]) ++changed;
      m.assignments[i] = c;
    }
    detail::recompute_means(points, m.assignments, m.centroids, counts);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[m.assignments[i]] < 2) continue;  // do not empty another cluster
        const double dist = squared_distance(points.row(i), m.centroids.row(m.assignments[i]));
        if (dist > far_d) {
          far_d = dist;
          far = i;
        }
      }
      --counts[m.assignments[far]];
      m.assignments[far] = c;
      counts[c] = 1;
      detail::copy_row(points, far, m.centroids, c);
      ++changed;
    }
    record(it);
    m.iterations = it;
    // The first pass only establishes assignments; the rule judges reassignments.
    const bool stop = it >= opts.stop.max_iterations || (!first && opts.stop.fires(changed, n, it));
    first = false;
    if (!stop) continue;
    if (!opts.transfer_refinement || it >= opts.stop.max_iterations) break;
    if (detail::transfer_pass(points, m.assignments, m.centroids, counts) == 0) break;
    detail::recompute_means(points, m.assignments, m.centroids, counts);
    record(it);
  }
  return m;
}

// Runs `restarts` seeded k-means and keeps the lowest inertia (earliest on ties).
inline ClusterModel kmeans_best_of(const Tensor& points, std::size_t k, std::size_t restarts,
                                   KmeansOptions opts = {}) {
  if (restarts == 0) throw std::invalid_argument("kmeans_best_of: need at least one restart");
  const std::uint64_t base = opts.seed;
  ClusterModel best;
  for (std::size_t r = 0; r < restarts; ++r) {
    opts.seed = derive_seed(base, r);
    ClusterModel m = kmeans(points, k, opts);
    if (r == 0 || m.inertia < best.inertia) best = std::move(m);
  }
  return best;
}

// Hard assignment of each point to its nearest centroid.
inline std::vector<std::size_t> assign_nearest(const Tensor& points, const Tensor& centroids) {
  detail::require_compatible(points, centroids, "assign_nearest");
  std::vector<std::size_t> out(points.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::nearest(centroids, points.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// Agglomerative clustering

enum class Linkage { single, average };

// Clusters are kept ordered by their smallest member. With average linkage
// the cluster distance is the mean cross squared distance, so the merged
// pair is the one of maximum cluster_affinity. Single linkage uses the
// minimum cross squared distance.
struct AgglomerativeState {
  Linkage linkage = Linkage::average;
  std::vector<PointSet> clusters;
  std::vector<MergedPair> merges;

  std::size_t point_count() const {
    std::size_t n = 0;
    for (const auto& c : clusters) n += c.size();
    return n;
  }

  std::vector<std::size_t> assignments() const {
    std::vector<std::size_t> out(point_count());
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      for (std::size_t i : clusters[c]) out[i] = c;
    }
    return out;
  }

  static AgglomerativeState singletons(std::size_t n, Linkage linkage) {
    AgglomerativeState s;
    s.linkage = linkage;
    for (std::size_t i = 0; i < n; ++i) s.clusters.push_back({i});
    return s;
  }
};

namespace detail {

// Symmetric matrix stored as its strict upper triangle.
class Triangle {
 public:
  explicit Triangle(std::size_t n) : n_(n), v_(n * (n - 1) / 2) {}
  double& at(std::size_t a, std::size_t b) {
    if (a > b) std::swap(a, b);
    return v_[a * (2 * n_ - a - 1) / 2 + (b - a - 1)];
  }

 private:
  std::size_t n_;
  std::vector<double> v_;
};

}  // namespace detail

// Merges the closest pair of current clusters until `target_clusters` remain.
// Distances come from `points`, so a state can be resumed on new embeddings.
inline void agglomerative_merge(AgglomerativeState& state, const Tensor& points, std::size_t target_clusters) {
  detail::require_matrix(points, "agglomerative");
  const std::size_t m = state.clusters.size();
  if (state.point_count() != points.dim(0)) {
    throw std::invalid_argument("agglomerative: state covers " + std::to_string(state.point_count()) +
                                " points, got " + std::to_string(points.dim(0)));
  }
  if (target_clusters == 0 || target_clusters > m) {
    throw std::invalid_argument("agglomerative: target " + std::to_string(target_clusters) +
                                " outside [1," + std::to_string(m) + "]");
  }
  if (target_clusters == m) return;

  const bool average = state.linkage == Linkage::average;
  detail::Triangle dist(m);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      double acc = average ? 0.0 : std::numeric_limits<double>::infinity();
      for (std::size_t i : state.clusters[a]) {
        for (std::size_t j : state.clusters[b]) {
          const double d = squared_distance(points.row(i), points.row(j));
          acc = average ? acc + d : std::min(acc, d);
        }
      }
      if (average) acc /= static_cast<double>(state.clusters[a].size() * state.clusters[b].size());
      dist.at(a, b) = acc;
    }
  }

  std::vector<bool> alive(m, true);
  std::vector<std::size_t> nn(m, m);
  std::vector<double> nn_d(m, std::numeric_limits<double>::infinity());
  auto refresh = [&](std::size_t a) {
    nn[a] = m;
    nn_d[a] = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < m; ++b) {
      if (b == a || !alive[b]) continue;
      const double d = dist.at(a, b);
      if (d < nn_d[a]) {
        nn_d[a] = d;
        nn[a] = b;
      }
    }
  };
  for (std::size_t a = 0; a < m; ++a) refresh(a);

  std::vector<PointSet> clusters = std::move(state.clusters);
  for (std::size_t remaining = m; remaining > target_clusters; --remaining) {
    // Closest pair; ties go to the lexicographically lowest (a, b).
    std::size_t a = m, b = m;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) {
      if (!alive[c]) continue;
      const std::size_t lo = std::min(c, nn[c]), hi = std::max(c, nn[c]);
      if (nn_d[c] < best || (nn_d[c] == best && std::pair(lo, hi) < std::pair(a, b))) {
        best = nn_d[c];
        a = lo;
        b = hi;
      }
    }
    state.merges.push_back({clusters[a], clusters[b]});
    const double wa = static_cast<double>(clusters[a].size()), wb = static_cast<double>(clusters[b].size());
    for (std::size_t c = 0; c < m; ++c) {
      if (!alive[c] || c == a || c == b) continue;
      const double da = dist.at(a, c), db = dist.at(b, c);
      dist.at(a, c) = average ? (wa * da + wb * db) / (wa + wb) : std::min(da, db);
    }
    PointSet merged;
    std::merge(clusters[a].begin(), clusters[a].end(), clusters[b].begin(), clusters[b].end(),
               std::back_inserter(merged));
    clusters[a] = std::move(merged);
    clusters[b].clear();
    alive[b] = false;
    for (std::size_t c = 0; c < m; ++c) {
      if (!alive[c] || c == a) continue;
      if (nn[c] == a || nn[c] == b) {
        refresh(c);
      } else if (dist.at(a, c) < nn_d[c] || (dist.at(a, c) == nn_d[c] && a < nn[c])) {
        nn_d[c] = dist.at(a, c);
        nn[c] = a;
      }
    }
    refresh(a);
  }
  for (std::size_t c = 0; c < m; ++c) {
    if (alive[c]) state.clusters.push_back(std::move(clusters[c]));
  }
}

inline AgglomerativeState agglomerative(const Tensor& points, std::size_t target_clusters,
                                        Linkage linkage = Linkage::average) {
  detail::require_matrix(points, "agglomerative");
  if (target_clusters == 0 || target_clusters > points.dim(0)) {
    throw std::invalid_argument("agglomerative: target " + std::to_string(target_clusters) +
                                " outside [1," + std::to_string(points.dim(0)) + "]");
  }
  AgglomerativeState state = AgglomerativeState::singletons(points.dim(0), linkage);
  agglomerative_merge(state, points, target_clusters);
  return state;
}

// ---------------------------------------------------------------------------
// Neighbour graphs

struct GraphSimilarity {
  enum class Kind { gaussian, binary } kind = Kind::binary;
  double sigma = 1.0;

  static GraphSimilarity gaussian(double sigma) { return {Kind::gaussian, sigma}; }
  static GraphSimilarity binary() { return {Kind::binary, 1.0}; }
};

// Exact k nearest neighbours by Euclidean distance; ties to the lower index.
inline LocalityGraph knn_graph(const Tensor& points, std::size_t k_nn,
                               GraphSimilarity similarity = GraphSimilarity::binary()) {
  detail::require_matrix(points, "knn_graph");
  const std::size_t n = points.dim(0);
  if (k_nn == 0 || k_nn >= n) {
    throw std::invalid_argument("knn_graph: k_nn=" + std::to_string(k_nn) + " needs 1 <= k_nn < n=" +
                                std::to_string(n));
  }
  if (similarity.kind == GraphSimilarity::Kind::gaussian && !(similarity.sigma > 0.0)) {
    throw std::invalid_argument("knn_graph: sigma must be positive");
  }
  LocalityGraph g;
  g.neighbors.resize(n);
  g.weights.resize(n);
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) cand.emplace_back(squared_distance(points.row(i), points.row(j)), j);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k_nn), cand.end());
    for (std::size_t t = 0; t < k_nn; ++t) {
      g.neighbors[i].push_back(cand[t].second);
      const double w = similarity.kind == GraphSimilarity::Kind::binary
                           ? 1.0
                           : std::exp(-cand[t].first / (2.0 * similarity.sigma * similarity.sigma));
      g.weights[i].push_back(w);
    }
  }
  return g;
}

}  // namespace deepclust
