#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepclust {

// Co-occurrence counts of predicted (rows) and true (columns) labels. Labels
// of any integral type are compacted to 0..k-1 in increasing order.
struct Contingency {
  std::vector<std::vector<std::size_t>> counts;
  std::vector<std::size_t> pred_totals;
  std::vector<std::size_t> true_totals;
  std::size_t total = 0;

  std::size_t pred_clusters() const { return pred_totals.size(); }
  std::size_t true_classes() const { return true_totals.size(); }
};

namespace detail {

template <std::integral L>
std::vector<std::size_t> compact_labels(const std::vector<L>& labels, std::size_t& distinct) {
  std::map<L, std::size_t> ids;
  for (L l : labels) ids.emplace(l, 0);
  std::size_t next = 0;
  for (auto& [label, id] : ids) id = next++;
  distinct = next;
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (L l : labels) out.push_back(ids.at(l));
  return out;
}

}  // namespace detail

template <std::integral L>
Contingency contingency(const std::vector<L>& pred, const std::vector<L>& truth) {
  if (pred.size() != truth.size()) {
    throw std::invalid_argument("contingency: " + std::to_string(pred.size()) + " predictions vs " +
                                std::to_string(truth.size()) + " labels");
  }
  if (pred.empty()) throw std::invalid_argument("contingency: no samples");
  std::size_t kp = 0, kt = 0;
  const auto p = detail::compact_labels(pred, kp);
  const auto t = detail::compact_labels(truth, kt);
  Contingency c;
  c.counts.assign(kp, std::vector<std::size_t>(kt, 0));
  c.pred_totals.assign(kp, 0);
  c.true_totals.assign(kt, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    ++c.counts[p[i]][t[i]];
    ++c.pred_totals[p[i]];
    ++c.true_totals[t[i]];
  }
  c.total = p.size();
  return c;
}

struct Assignment {
  static constexpr std::size_t unassigned = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> row_to_col;  // `unassigned` for rows matched to padding
  double cost = 0.0;
};

// Minimum-cost matching on a rectangular cost matrix, padded with zero-cost
// dummy rows or columns to a square. Shortest augmenting paths with
// potentials, O(n^3).
inline Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  if (cost.empty() || cost[0].empty()) throw std::invalid_argument("hungarian: empty cost matrix");
  const std::size_t rows = cost.size(), cols = cost[0].size();
  for (const auto& r : cost) {
    if (r.size() != cols) throw std::invalid_argument("hungarian: ragged cost matrix");
    for (double v : r) {
      if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
    }
  }
  const std::size_t n = std::max(rows, cols);
  auto at = [&](std::size_t i, std::size_t j) { return i < rows && j < cols ? cost[i][j] : 0.0; };
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; index 0 is the virtual start column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  std::vector<bool> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment a;
  a.row_to_col.assign(rows, Assignment::unassigned);
  for (std::size_t j = 1; j <= n; ++j) {
    const std::size_t i = match[j] - 1;
    if (i < rows && j - 1 < cols) {
      a.row_to_col[i] = j - 1;
      a.cost += cost[i][j - 1];
    }
  }
  return a;
}

// I(pred; truth) / sqrt(H(pred) H(truth)), natural logs; 0 when either
// partition has zero entropy.
template <std::integral L>
double nmi(const std::vector<L>& pred, const std::vector<L>& truth) {
  const Contingency c = contingency(pred, truth);
  const double n = static_cast<double>(c.total);
  auto entropy = [&](const std::vector<std::size_t>& totals) {
    double h = 0.0;
    for (std::size_t t : totals) {
      if (t == 0) continue;
      const double p = static_cast<double>(t) / n;
      h -= p * std::log(p);
    }
    return h;
  };
  const double hp = entropy(c.pred_totals), ht = entropy(c.true_totals);
  if (hp <= 0.0 || ht <= 0.0) return 0.0;
  double mi = 0.0;
  for (std::size_t i = 0; i < c.pred_clusters(); ++i) {
    for (std::size_t j = 0; j < c.true_classes(); ++j) {
      const auto nij = static_cast<double>(c.counts[i][j]);
      if (nij == 0.0) continue;
      mi += nij / n *
            std::log(n * nij / (static_cast<double>(c.pred_totals[i]) * static_cast<double>(c.true_totals[j])));
    }
  }
  return std::clamp(mi / std::sqrt(hp * ht), 0.0, 1.0);
}

// Best one-to-one cluster-to-class matching, as a fraction of samples.
template <std::integral L>
double acc(const std::vector<L>& pred, const std::vector<L>& truth) {
  const Contingency c = contingency(pred, truth);
  std::size_t top = 0;
  for (const auto& row : c.counts) top = std::max(top, *std::max_element(row.begin(), row.end()));
  std::vector<std::vector<double>> cost(c.pred_clusters(), std::vector<double>(c.true_classes()));
  for (std::size_t i = 0; i < c.pred_clusters(); ++i) {
    for (std::size_t j = 0; j < c.true_classes(); ++j) {
      cost[i][j] = static_cast<double>(top - c.counts[i][j]);
    }
  }
  const Assignment a = hungarian(cost);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < a.row_to_col.size(); ++i) {
    if (a.row_to_col[i] != Assignment::unassigned) hits += c.counts[i][a.row_to_col[i]];
  }
  return static_cast<double>(hits) / static_cast<double>(c.total);
}

}  // namespace deepclust
