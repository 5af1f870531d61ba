#include <gtest/gtest.h>

#include <numeric>

#include "deepclust/metrics.hpp"
#include "deepclust/random.hpp"
#include "support/oracles.hpp"

using namespace deepclust;

using Labels = std::vector<std::size_t>;

namespace {

Labels random_labels(std::size_t n, std::size_t k, Rng& rng) {
  Labels l(n);
  for (auto& v : l) v = rng.index(k);
  return l;
}

Labels relabel(const Labels& l, const std::vector<std::size_t>& perm) {
  Labels out;
  for (std::size_t v : l) out.push_back(perm[v]);
  return out;
}

}  // namespace

TEST(Contingency, CountsAndMarginals) {
  Contingency c = contingency(Labels{0, 0, 1, 2}, Labels{1, 1, 1, 0});
  EXPECT_EQ(c.total, 4u);
  EXPECT_EQ(c.counts, (std::vector<std::vector<std::size_t>>{{0, 2}, {0, 1}, {1, 0}}));
  EXPECT_EQ(c.pred_totals, (std::vector<std::size_t>{2, 1, 1}));
  EXPECT_EQ(c.true_totals, (std::vector<std::size_t>{1, 3}));
}

TEST(Nmi, PerfectAgreementIsOne) { EXPECT_DOUBLE_EQ(nmi(Labels{0, 1, 1, 2}, Labels{0, 1, 1, 2}), 1.0); }

TEST(Nmi, ConstantPredictionIsZero) {
  EXPECT_EQ(nmi(Labels{3, 3, 3, 3}, Labels{0, 1, 0, 1}), 0.0);
  EXPECT_EQ(nmi(Labels{0, 1, 0, 1}, Labels{2, 2, 2, 2}), 0.0);
}

TEST(Nmi, RelabelingIsInvisible) { EXPECT_DOUBLE_EQ(nmi(Labels{0, 0, 1, 1}, Labels{1, 1, 0, 0}), 1.0); }

TEST(Nmi, MatchesReferenceValues) {
  // geometric-mean normalisation, values from an independent implementation
  EXPECT_NEAR(nmi(Labels{0, 0, 1, 1, 2, 2, 2, 0}, Labels{1, 1, 0, 0, 0, 2, 2, 2}), 0.5588730382170324, 1e-14);
  EXPECT_NEAR(nmi(Labels{0, 1, 2, 3, 0, 1, 2, 3, 0, 1}, Labels{0, 0, 0, 1, 1, 1, 2, 2, 2, 2}), 0.1250116337543685,
              1e-14);
  EXPECT_NEAR(nmi(std::vector<int>{5, 5, 5, 7, 7, 9}, std::vector<int>{0, 1, 0, 1, 0, 1}), 0.17179387755384382,
              1e-14);
}

TEST(Nmi, LengthMismatchThrows) {
  EXPECT_THROW(nmi(Labels{0, 1}, Labels{0}), std::invalid_argument);
  EXPECT_THROW(acc(Labels{0, 1}, Labels{0}), std::invalid_argument);
}

TEST(Acc, PermutationRelabelingScoresOne) { EXPECT_EQ(acc(Labels{2, 2, 0, 1}, Labels{0, 0, 1, 2}), 1.0); }

TEST(Acc, ConstantPredictionOnTwoClasses) { EXPECT_EQ(acc(Labels{0, 0, 0, 0}, Labels{0, 0, 1, 1}), 0.5); }

TEST(Acc, NegativeAndSparseLabels) {
  EXPECT_EQ(acc(std::vector<int>{-1, -1, 40, 40}, std::vector<int>{7, 7, 3, 3}), 1.0);
}

TEST(Acc, ManySingletonClustersFallBelowOneOverK) {
  EXPECT_EQ(acc(Labels{0, 1, 2, 3}, Labels{0, 0, 0, 0}), 0.25);
}

TEST(Hungarian, IdentityFavouringCost) {
  std::vector<std::vector<double>> cost(4, std::vector<double>(4, 1.0));
  for (std::size_t i = 0; i < 4; ++i) cost[i][i] = 0.0;
  Assignment a = hungarian(cost);
  EXPECT_EQ(a.row_to_col, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(a.cost, 0.0);
}

TEST(Hungarian, TwoByTwo) {
  Assignment a = hungarian({{1, 2}, {2, 1}});
  EXPECT_EQ(a.row_to_col, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(a.cost, 2.0);
}

TEST(Hungarian, RectangularIsPadded) {
  Assignment wide = hungarian({{5, 1, 9}, {2, 8, 7}});
  EXPECT_EQ(wide.row_to_col, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(wide.cost, 3.0);
  Assignment tall = hungarian({{5, 1}, {2, 8}, {0, 0}});
  EXPECT_EQ(tall.cost, 0.0 + 1.0);  // row 2 takes column 0, row 0 column 1
  EXPECT_EQ(tall.row_to_col[1], Assignment::unassigned);
}

TEST(Hungarian, Errors) {
  EXPECT_THROW(hungarian({}), std::invalid_argument);
  EXPECT_THROW(hungarian({{1, 2}, {3}}), std::invalid_argument);
}

TEST(Hungarian, MatchesFactorialSearch) {
  Rng rng(17);
  for (int t = 0; t < 300; ++t) {
    const std::size_t r = 1 + rng.index(6), c = r + rng.index(7 - r);
    std::vector<std::vector<double>> cost(r, std::vector<double>(c));
    for (auto& row : cost) {
      for (double& v : row) v = static_cast<double>(rng.index(20));
    }
    Assignment a = hungarian(cost);
    EXPECT_EQ(a.cost, oracles::brute_force_assignment(cost)) << t;
    std::vector<bool> seen(c, false);
    for (std::size_t col : a.row_to_col) {
      ASSERT_LT(col, c);
      EXPECT_FALSE(seen[col]);
      seen[col] = true;
    }
  }
}

TEST(Acc, MatchesFactorialSearch) {
  Rng rng(19);
  for (int t = 0; t < 200; ++t) {
    const std::size_t k = 1 + rng.index(6), n = 1 + rng.index(40);
    const Labels pred = random_labels(n, k, rng), truth = random_labels(n, 1 + rng.index(6), rng);
    EXPECT_EQ(acc(pred, truth), oracles::brute_force_acc(pred, truth)) << t;
  }
}

TEST(Metrics, InvariantUnderRelabelling) {
  Rng rng(23);
  for (int t = 0; t < 200; ++t) {
    const std::size_t k = 1 + rng.index(6), n = 1 + rng.index(50);
    const Labels pred = random_labels(n, k, rng), truth = random_labels(n, k, rng);
    std::vector<std::size_t> pp(k), pt(k);
    std::iota(pp.begin(), pp.end(), 0);
    std::iota(pt.begin(), pt.end(), 0);
    rng.shuffle(pp);
    rng.shuffle(pt);
    EXPECT_NEAR(nmi(pred, truth), nmi(relabel(pred, pp), relabel(truth, pt)), 1e-12);
    EXPECT_EQ(acc(pred, truth), acc(relabel(pred, pp), relabel(truth, pt)));
  }
}

TEST(Metrics, RangeAndBalancedFloor) {
  Rng rng(29);
  for (int t = 0; t < 500; ++t) {
    const std::size_t k = 1 + rng.index(8), n = 1 + rng.index(60);
    const Labels pred = random_labels(n, 1 + rng.index(8), rng), truth = random_labels(n, k, rng);
    const double m = nmi(pred, truth), a = acc(pred, truth);
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
  for (int t = 0; t < 200; ++t) {
    const std::size_t k = 1 + rng.index(6), per = 1 + rng.index(8);
    Labels truth;
    for (std::size_t c = 0; c < k; ++c) truth.insert(truth.end(), per, c);
    // holds when there are no more clusters than classes
    const Labels pred = random_labels(truth.size(), 1 + rng.index(k), rng);
    EXPECT_GE(acc(pred, truth), 1.0 / static_cast<double>(k) - 1e-15);
  }
}
