#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "deepclust/clustering.hpp"
#include "support/oracles.hpp"

using namespace deepclust;

namespace {

Tensor line(std::vector<double> xs) {
  const std::size_t n = xs.size();
  return Tensor::matrix(n, 1, std::move(xs));
}

Tensor random_points(std::size_t n, std::size_t d, Rng& rng) {
  Tensor t({n, d});
  for (double& v : t.values()) v = rng.normal();
  return t;
}

std::set<std::set<std::size_t>> as_sets(const std::vector<PointSet>& clusters) {
  std::set<std::set<std::size_t>> out;
  for (const auto& c : clusters) out.emplace(c.begin(), c.end());
  return out;
}

// Recomputes every cluster distance from the points at every step.
std::vector<PointSet> naive_agglomerative(const Tensor& points, std::size_t target, Linkage linkage) {
  std::vector<PointSet> clusters;
  for (std::size_t i = 0; i < points.dim(0); ++i) clusters.push_back({i});
  while (clusters.size() > target) {
    std::size_t ba = 0, bb = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < clusters.size(); ++a) {
      for (std::size_t b = a + 1; b < clusters.size(); ++b) {
        double d = linkage == Linkage::average ? mean_cross_distance(points, clusters[a], clusters[b])
                                               : std::numeric_limits<double>::infinity();
        if (linkage == Linkage::single) {
          for (std::size_t i : clusters[a]) {
            for (std::size_t j : clusters[b]) d = std::min(d, squared_distance(points.row(i), points.row(j)));
          }
        }
        if (d < best) {
          best = d;
          ba = a;
          bb = b;
        }
      }
    }
    clusters[ba].insert(clusters[ba].end(), clusters[bb].begin(), clusters[bb].end());
    std::sort(clusters[ba].begin(), clusters[ba].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bb));
  }
  return clusters;
}

}  // namespace

TEST(Kmeans, SingleClusterIsTheMean) {
  Tensor x = Tensor::matrix(4, 2, {0, 0, 2, 0, 0, 4, 2, 4});
  ClusterModel m = kmeans(x, 1);
  EXPECT_DOUBLE_EQ(m.centroids(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(m.centroids(0, 1), 2.0);
  // The first pass lands on the mean; the second only confirms nothing moved.
  EXPECT_LE(m.iterations, 2u);
  EXPECT_EQ(m.inertia_history.front(), m.inertia);
}

TEST(Kmeans, FourPointExample) {
  ClusterModel m = kmeans(line({0, 1, 10, 11}), 2);
  std::vector<double> c{m.centroids[0], m.centroids[1]};
  std::sort(c.begin(), c.end());
  EXPECT_DOUBLE_EQ(c[0], 0.5);
  EXPECT_DOUBLE_EQ(c[1], 10.5);
  EXPECT_DOUBLE_EQ(m.inertia, 1.0);
  EXPECT_DOUBLE_EQ(oracles::best_partition_inertia(line({0, 1, 10, 11}), 2), 1.0);
}

TEST(Kmeans, DistinctLocationsGiveZeroInertia) {
  Tensor x = line({3, 3, -1, 7, 7, 7, -1});
  EXPECT_EQ(kmeans_best_of(x, 3, 5).inertia, 0.0);
}

TEST(Kmeans, Errors) {
  EXPECT_THROW(kmeans(line({1, 2}), 3), std::invalid_argument);
  EXPECT_THROW(kmeans(line({1, std::nan("")}), 1), std::invalid_argument);
  KmeansOptions opts;
  opts.init = KmeansInit::provided;
  opts.initial_centroids = Tensor({3, 1});
  EXPECT_THROW(kmeans(line({1, 2, 3}), 2, opts), std::invalid_argument);
}

TEST(Kmeans, InertiaNeverIncreases) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    Tensor x = random_points(40, 2, rng);
    KmeansOptions opts;
    opts.init = t % 2 ? KmeansInit::random : KmeansInit::kmeanspp;
    opts.seed = static_cast<std::uint64_t>(t);
    ClusterModel m = kmeans(x, 5, opts);
    for (std::size_t i = 1; i < m.inertia_history.size(); ++i) {
      EXPECT_LE(m.inertia_history[i], m.inertia_history[i - 1]);
    }
    EXPECT_EQ(m.assignments, assign_nearest(x, m.centroids));  // converged
    EXPECT_DOUBLE_EQ(m.inertia, oracles::partition_inertia(x, m.assignments, 5));
  }
}

TEST(Kmeans, EmptyClusterIsReseededAtFarthestPoint) {
  Tensor x = line({0, 1, 2, 100});
  KmeansOptions opts;
  opts.init = KmeansInit::provided;
  opts.initial_centroids = line({50, 1000});  // 1000 attracts nothing
  ClusterModel m = kmeans(x, 2, opts);
  const auto sizes = m.cluster_sizes();
  EXPECT_GT(sizes[0], 0u);
  EXPECT_GT(sizes[1], 0u);
  EXPECT_DOUBLE_EQ(m.inertia, oracles::best_partition_inertia(x, 2));
}

TEST(Kmeans, TiesGoToLowestCentroid) {
  KmeansOptions opts;
  opts.init = KmeansInit::provided;
  opts.initial_centroids = line({-1, 1});
  opts.stop = stop_rule_assignment_change(1.0);
  ClusterModel m = kmeans(line({0, -1, 1}), 2, opts);
  EXPECT_EQ(m.assignments[0], 0u);
}

TEST(Kmeans, SameSeedSameResult) {
  Rng rng(7);
  Tensor x = random_points(60, 3, rng);
  KmeansOptions opts;
  opts.seed = 42;
  ClusterModel a = kmeans(x, 4, opts), b = kmeans(x, 4, opts);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.assignments, b.assignments);
}

TEST(Kmeans, BestOfTwentyFindsExhaustiveOptimum) {
  Rng rng(2024);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t k = 1 + rng.index(3);
    const std::size_t n = k + rng.index(9 - k);
    Tensor x = random_points(n, 1 + rng.index(3), rng);
    KmeansOptions opts;
    opts.seed = static_cast<std::uint64_t>(inst);
    ClusterModel m = kmeans_best_of(x, k, 20, opts);
    const double optimum = oracles::best_partition_inertia(x, k);
    EXPECT_EQ(oracles::partition_inertia(x, m.assignments, k), optimum) << "instance " << inst;
    EXPECT_NEAR(m.inertia, optimum, 1e-12 * (1 + optimum));
  }
}

TEST(StopRule, ThresholdSemantics) {
  Tensor x = line({0, 1, 10, 11});
  KmeansOptions exact;
  exact.seed = 5;
  exact.stop = stop_rule_assignment_change(0.0);
  KmeansOptions loose = exact;
  loose.stop = stop_rule_assignment_change(0.001);
  ClusterModel a = kmeans(x, 2, exact), b = kmeans(x, 2, loose);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.assignments, b.assignments);

  // The first pass only assigns; the rule first judges the second pass.
  KmeansOptions one = exact;
  one.stop = stop_rule_assignment_change(1.0);
  EXPECT_EQ(kmeans(x, 2, one).iterations, 2u);

  KmeansOptions capped = exact;
  capped.stop = stop_rule_assignment_change(0.0, 1);
  EXPECT_EQ(kmeans(x, 2, capped).iterations, 1u);
  EXPECT_EQ(StopRule{}.max_iterations, 300u);

  EXPECT_THROW(stop_rule_assignment_change(-0.1), std::invalid_argument);
  EXPECT_THROW(stop_rule_assignment_change(1.1), std::invalid_argument);
}

TEST(Kmeans, TransferRefinementEscapesPointSeededTrap) {
  // Every Lloyd run seeded at data points stalls here; the optimum is {0,1} {2,3}.
  Tensor x = Tensor::matrix(4, 3, {-0.415918, -0.546797, -0.497895, 0.273226, -0.122076, -0.215094,
                                   -0.504512, 1.45178, 0.692272, -1.61234, 0.742772, -1.25473});
  const double optimum = oracles::best_partition_inertia(x, 2);
  KmeansOptions plain;
  plain.transfer_refinement = false;
  double best_plain = std::numeric_limits<double>::infinity();
  for (std::uint64_t s = 0; s < 50; ++s) {
    plain.seed = s;
    best_plain = std::min(best_plain, kmeans(x, 2, plain).inertia);
    KmeansOptions refined;
    refined.seed = s;
    ClusterModel m = kmeans(x, 2, refined);
    EXPECT_NEAR(m.inertia, optimum, 1e-12);
    EXPECT_EQ(m.assignments, assign_nearest(x, m.centroids));
  }
  EXPECT_GT(best_plain, optimum + 0.1);
}

TEST(StopRule, ZeroThresholdRunsToExactConvergence) {
  Rng rng(4);
  Tensor x = random_points(200, 2, rng);
  KmeansOptions opts;
  opts.init = KmeansInit::random;
  ClusterModel m = kmeans(x, 6, opts);
  EXPECT_EQ(m.assignments, assign_nearest(x, m.centroids));
}

TEST(KmeansPlusPlus, SingleCentreIsAnInputPoint) {
  Tensor x = line({4, 8, 15, 16, 23, 42});
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor c = kmeanspp_init(x, 1, s);
    EXPECT_NE(std::find(x.values().begin(), x.values().end(), c[0]), x.values().end());
  }
}

TEST(KmeansPlusPlus, IdenticalPointsGiveIdenticalCentres) {
  Tensor x = Tensor({5, 2}, 3.25);
  Tensor c = kmeanspp_init(x, 3, 1);
  for (double v : c.values()) EXPECT_EQ(v, 3.25);
  EXPECT_EQ(kmeans(x, 3).inertia, 0.0);
}

TEST(KmeansPlusPlus, BeatsRandomInitInExpectation) {
  Tensor x = line({0, 1, 10, 11});
  double pp_init = 0, rnd_init = 0, pp_final = 0, rnd_final = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto init_cost = [&](const Tensor& c) {
      double total = 0;
      for (std::size_t i = 0; i < 4; ++i) {
        total += std::min(squared_distance(x.row(i), c.row(0)), squared_distance(x.row(i), c.row(1)));
      }
      return total;
    };
    pp_init += init_cost(kmeanspp_init(x, 2, s));
    rnd_init += init_cost(random_init(x, 2, s));
    KmeansOptions opts;
    opts.seed = s;
    pp_final += kmeans(x, 2, opts).inertia;
    opts.init = KmeansInit::random;
    rnd_final += kmeans(x, 2, opts).inertia;
  }
  EXPECT_LE(pp_init, rnd_init);
  EXPECT_LE(pp_final, rnd_final);
}

TEST(Agglomerative, TargetNKeepsSingletons) {
  auto s = agglomerative(line({3, 1, 2}), 3);
  EXPECT_EQ(s.clusters.size(), 3u);
  EXPECT_TRUE(s.merges.empty());
}

TEST(Agglomerative, ThreePointExample) {
  Tensor x = line({0, 1, 10});
  // merge orders from singletons: the pair of highest affinity is {0,1}
  EXPECT_GT(cluster_affinity(x, {0}, {1}), cluster_affinity(x, {1}, {2}));
  EXPECT_GT(cluster_affinity(x, {0}, {1}), cluster_affinity(x, {0}, {2}));
  auto s = agglomerative(x, 2, Linkage::average);
  EXPECT_EQ(as_sets(s.clusters), (std::set<std::set<std::size_t>>{{0, 1}, {2}}));
  ASSERT_EQ(s.merges.size(), 1u);
  EXPECT_EQ(s.merges[0].a, PointSet{0});
  EXPECT_EQ(s.merges[0].b, PointSet{1});
}

TEST(Agglomerative, TargetOneMergesEverything) {
  auto s = agglomerative(line({5, 1, 9, 2}), 1, Linkage::single);
  ASSERT_EQ(s.clusters.size(), 1u);
  EXPECT_EQ(s.clusters[0], (PointSet{0, 1, 2, 3}));
  EXPECT_EQ(s.merges.size(), 3u);
}

TEST(Agglomerative, TargetOutOfRange) {
  EXPECT_THROW(agglomerative(line({1, 2}), 0), std::invalid_argument);
  EXPECT_THROW(agglomerative(line({1, 2}), 3), std::invalid_argument);
}

TEST(Agglomerative, MatchesNaiveRecomputation) {
  Rng rng(9);
  for (int t = 0; t < 40; ++t) {
    const std::size_t n = 2 + rng.index(30);
    Tensor x = random_points(n, 2, rng);
    const std::size_t target = 1 + rng.index(n);
    for (Linkage l : {Linkage::single, Linkage::average}) {
      auto s = agglomerative(x, target, l);
      EXPECT_EQ(as_sets(s.clusters), as_sets(naive_agglomerative(x, target, l))) << t;
      std::size_t covered = 0;
      for (const auto& c : s.clusters) covered += c.size();
      EXPECT_EQ(covered, n);
      EXPECT_EQ(s.merges.size(), n - target);
    }
  }
}

TEST(Agglomerative, InvariantToInputOrder) {
  Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 12;
    Tensor x = random_points(n, 3, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor xp = x.gather_rows(perm);
    for (Linkage l : {Linkage::single, Linkage::average}) {
      auto a = agglomerative(x, 4, l), b = agglomerative(xp, 4, l);
      std::vector<PointSet> mapped;
      for (const auto& c : b.clusters) {
        PointSet m;
        for (std::size_t i : c) m.push_back(perm[i]);
        mapped.push_back(m);
      }
      EXPECT_EQ(as_sets(a.clusters), as_sets(mapped));
    }
  }
}

TEST(Agglomerative, ResumesFromPartialState) {
  Rng rng(12);
  Tensor x = random_points(20, 2, rng);
  auto full = agglomerative(x, 3);
  auto partial = agglomerative(x, 9);
  agglomerative_merge(partial, x, 3);
  EXPECT_EQ(as_sets(partial.clusters), as_sets(full.clusters));
  EXPECT_EQ(partial.merges.size(), 17u);
  const auto assign = partial.assignments();
  EXPECT_EQ(assign.size(), 20u);
}

TEST(KnnGraph, CollinearExample) {
  auto g = knn_graph(line({0, 1, 3}), 1);
  EXPECT_EQ(g.neighbors, (std::vector<std::vector<std::size_t>>{{1}, {0}, {1}}));
  for (const auto& w : g.weights) EXPECT_EQ(w, std::vector<double>{1.0});
}

TEST(KnnGraph, GaussianWeights) {
  auto g = knn_graph(line({0, 0, 2}), 1, GraphSimilarity::gaussian(1.0));
  EXPECT_EQ(g.weights[0][0], 1.0);
  EXPECT_DOUBLE_EQ(g.weights[2][0], std::exp(-2.0));
  EXPECT_THROW(knn_graph(line({0, 1}), 2), std::invalid_argument);
}

TEST(KnnGraph, MatchesQuadraticScan) {
  Rng rng(13);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 3 + rng.index(25), k = 1 + rng.index(n - 1);
    Tensor x = random_points(n, 2, rng);
    auto g = knn_graph(x, k);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<bool> taken(n, false);
      taken[i] = true;
      for (std::size_t r = 0; r < k; ++r) {
        std::size_t best = n;
        for (std::size_t j = 0; j < n; ++j) {
          if (taken[j]) continue;
          if (best == n || squared_distance(x.row(i), x.row(j)) < squared_distance(x.row(i), x.row(best))) {
            best = j;
          }
        }
        taken[best] = true;
        EXPECT_EQ(g.neighbors[i][r], best);
      }
    }
  }
}
