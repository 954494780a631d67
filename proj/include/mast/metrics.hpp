#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mast/errors.hpp"

namespace mast {

// ---------------------------------------------------------------------------
// Ranking metrics

/// Mean over positives of precision at the positive's rank. Scores are sorted
/// descending; ties keep the original index order.
inline double average_precision(std::span<const double> scores, std::span<const int> targets) {
  if (scores.size() != targets.size())
    throw InputError("average_precision: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(targets.size()) + " targets");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const int t = targets[order[r]];
    if (t != 0 && t != 1) throw InputError("average_precision: targets must be 0 or 1");
    if (t == 1) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) throw InputError("average_precision: no positive targets");
  return sum / static_cast<double>(hits);
}

/// Mean AP over the classes that have at least one positive.
/// scores and targets are samples × classes.
inline double mean_average_precision(const std::vector<std::vector<double>>& scores,
                                     const std::vector<std::vector<int>>& targets) {
  if (scores.size() != targets.size() || scores.empty())
    throw InputError("mean_average_precision: sample count mismatch or empty input");
  const std::size_t classes = scores.front().size();
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i].size() != classes || targets[i].size() != classes)
      throw InputError("mean_average_precision: ragged row " + std::to_string(i));
  double total = 0;
  std::size_t used = 0;
  std::vector<double> col(scores.size());
  std::vector<int> tcol(scores.size());
  for (std::size_t c = 0; c < classes; ++c) {
    bool any = false;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      col[i] = scores[i][c];
      tcol[i] = targets[i][c];
      any = any || tcol[i] == 1;
    }
    if (!any) continue;
    total += average_precision(col, tcol);
    ++used;
  }
  if (used == 0) throw InputError("mean_average_precision: no class has a positive target");
  return total / static_cast<double>(used);
}

/// Fraction of rows whose label is among the k highest scores. A label tied
/// with the k-th score counts only if it precedes it in index order.
inline double topk_accuracy(const std::vector<std::vector<double>>& scores,
                            std::span<const std::size_t> labels, std::size_t k) {
  if (scores.size() != labels.size() || scores.empty())
    throw InputError("topk_accuracy: sample count mismatch or empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& row = scores[i];
    if (k == 0 || k > row.size())
      throw InputError("topk_accuracy: k=" + std::to_string(k) + " invalid for " +
                       std::to_string(row.size()) + " classes");
    if (labels[i] >= row.size())
      throw InputError("topk_accuracy: label " + std::to_string(labels[i]) + " out of range");
    const double s = row[labels[i]];
    std::size_t ahead = 0;
    for (std::size_t c = 0; c < row.size(); ++c)
      if (row[c] > s || (row[c] == s && c < labels[i])) ++ahead;
    if (ahead < k) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Clustering

using Matrix = std::vector<std::vector<double>>;

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct KMeansResult {
  std::vector<std::size_t> labels;
  Matrix centroids;
  double inertia = 0;
};

namespace detail {

inline void check_points(const Matrix& x, const char* op) {
  if (x.empty()) throw InputError(std::string(op) + ": no points");
  for (const auto& row : x)
    if (row.size() != x.front().size())
      throw InputError(std::string(op) + ": points have differing dimensions");
}

inline KMeansResult kmeans_once(const Matrix& x, std::size_t k, std::mt19937_64& rng,
                                std::size_t max_iter) {
  const std::size_t n = x.size();
  KMeansResult r;
  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  r.centroids.push_back(x[rng() % n]);
  while (r.centroids.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x[i], r.centroids.back()));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (u < d2[i]) {
          pick = i;
          break;
        }
        u -= d2[i];
      }
    } else {
      pick = rng() % n;
    }
    r.centroids.push_back(x[pick]);
  }

  r.labels.assign(n, 0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = it == 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(x[i], r.centroids[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (best != r.labels[i]) changed = true;
      r.labels[i] = best;
    }
    if (!changed) break;
    Matrix sums(k, std::vector<double>(x.front().size(), 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.labels[i]];
      for (std::size_t j = 0; j < x[i].size(); ++j) sums[r.labels[i]][j] += x[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (auto& v : sums[c]) v /= static_cast<double>(counts[c]);
      r.centroids[c] = std::move(sums[c]);
    }
  }
  r.inertia = 0;
  for (std::size_t i = 0; i < n; ++i) r.inertia += squared_distance(x[i], r.centroids[r.labels[i]]);
  return r;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding; keeps the lowest-inertia restart.
inline KMeansResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed,
                           std::size_t restarts = 10, std::size_t max_iter = 300) {
  detail::check_points(x, "kmeans");
  if (k == 0) throw InputError("kmeans: k must be positive");
  if (x.size() < k)
    throw InputError("kmeans: " + std::to_string(x.size()) + " points for k=" + std::to_string(k));
  if (restarts == 0) restarts = 1;
  std::mt19937_64 rng(seed);
  KMeansResult best;
  for (std::size_t r = 0; r < restarts; ++r) {
    KMeansResult cur = detail::kmeans_once(x, k, rng, max_iter);
    if (r == 0 || cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

/// Mean silhouette with Euclidean distance. Points in singleton clusters score 0.
inline double silhouette(const Matrix& x, std::span<const std::size_t> labels) {
  detail::check_points(x, "silhouette");
  if (labels.size() != x.size()) throw InputError("silhouette: label count mismatch");
  std::map<std::size_t, std::size_t> sizes;
  for (auto l : labels) ++sizes[l];
  if (sizes.size() < 2) throw InputError("silhouette: need at least two clusters");
  std::vector<std::size_t> dense(labels.size());
  std::map<std::size_t, std::size_t> remap;
  for (const auto& [l, _] : sizes) remap.emplace(l, remap.size());
  for (std::size_t i = 0; i < labels.size(); ++i) dense[i] = remap[labels[i]];
  std::vector<std::size_t> count(sizes.size(), 0);
  for (auto l : dense) ++count[l];

  double total = 0;
  std::vector<double> sum(sizes.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (count[dense[i]] == 1) continue;
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t j = 0; j < x.size(); ++j)
      if (j != i) sum[dense[j]] += std::sqrt(squared_distance(x[i], x[j]));
    const double a = sum[dense[i]] / static_cast<double>(count[dense[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sum.size(); ++c)
      if (c != dense[i]) b = std::min(b, sum[c] / static_cast<double>(count[c]));
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(x.size());
}

namespace detail {

struct Contingency {
  std::vector<std::vector<double>> table;  // rows: a classes, cols: b classes
  std::vector<double> rows, cols;
  double n = 0;
};

inline Contingency contingency(std::span<const std::size_t> a, std::span<const std::size_t> b,
                               const char* op) {
  if (a.size() != b.size())
    throw InputError(std::string(op) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  if (a.empty()) throw InputError(std::string(op) + ": empty labelings");
  std::map<std::size_t, std::size_t> ra, rb;
  for (auto v : a) ra.emplace(v, ra.size());
  for (auto v : b) rb.emplace(v, rb.size());
  Contingency c;
  c.table.assign(ra.size(), std::vector<double>(rb.size(), 0.0));
  c.rows.assign(ra.size(), 0.0);
  c.cols.assign(rb.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t r = ra[a[i]], k = rb[b[i]];
    c.table[r][k] += 1;
    c.rows[r] += 1;
    c.cols[k] += 1;
  }
  c.n = static_cast<double>(a.size());
  return c;
}

inline double comb2(double v) { return v * (v - 1) / 2; }

}  // namespace detail

/// Adjusted Rand index from the contingency table.
inline double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  const auto c = detail::contingency(a, b, "adjusted_rand_index");
  double index = 0, sa = 0, sb = 0;
  for (const auto& row : c.table)
    for (double v : row) index += detail::comb2(v);
  for (double v : c.rows) sa += detail::comb2(v);
  for (double v : c.cols) sb += detail::comb2(v);
  const double expected = c.n > 1 ? sa * sb / detail::comb2(c.n) : 0.0;
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;  // both trivial partitions
  return (index - expected) / (max_index - expected);
}

/// 1 - H(C|K) / H(C), with h = 1 when H(C) = 0.
inline double homogeneity(std::span<const std::size_t> truth, std::span<const std::size_t> pred) {
  const auto c = detail::contingency(truth, pred, "homogeneity");
  double hc = 0;
  for (double v : c.rows)
    if (v > 0) hc -= (v / c.n) * std::log(v / c.n);
  if (hc == 0) return 1.0;
  double hck = 0;
  for (std::size_t r = 0; r < c.table.size(); ++r)
    for (std::size_t k = 0; k < c.cols.size(); ++k) {
      const double v = c.table[r][k];
      if (v > 0) hck -= (v / c.n) * std::log(v / c.cols[k]);
    }
  return std::clamp(1.0 - hck / hc, 0.0, 1.0);
}

struct ClusterReport {
  double silhouette = 0;
  double ari = 0;
  double homogeneity = 0;
  std::size_t clusters = 0;
};

/// Silhouette on the true labels; ARI and homogeneity against a k-means
/// clustering with k equal to the number of true classes.
inline ClusterReport cluster_metrics(const Matrix& x, std::span<const std::size_t> labels,
                                     std::uint64_t seed = 0, std::size_t restarts = 10) {
  detail::check_points(x, "cluster_metrics");
  if (labels.size() != x.size()) throw InputError("cluster_metrics: label count mismatch");
  std::vector<std::size_t> distinct(labels.begin(), labels.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  ClusterReport r;
  r.clusters = distinct.size();
  r.silhouette = silhouette(x, labels);
  const auto km = kmeans(x, distinct.size(), seed, restarts);
  r.ari = adjusted_rand_index(labels, km.labels);
  r.homogeneity = homogeneity(labels, km.labels);
  return r;
}

}  // namespace mast
