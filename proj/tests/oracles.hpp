#pragma once

// Independent reference computations shared by unit tests and the
// acceptance run.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "ice/hash.hpp"
#include "ice/trainer.hpp"

namespace ice::testing {

// Random sparse classification problem: labels come from a planted linear
// rule with flip noise so both classes overlap.
inline TrainingSet random_training_set(std::size_t n, std::size_t dim, std::uint64_t seed,
                                       double flip = 0.15, std::size_t nnz = 5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit;
  std::vector<double> truth(dim);
  for (double& w : truth) w = normal(rng);
  TrainingSet set;
  set.dimension = dim;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.row = i * 7 + 3;
    std::vector<FeatureIndex> idx;
    while (idx.size() < std::min(nnz, dim)) {
      const FeatureIndex j = static_cast<FeatureIndex>(rng() % dim);
      if (std::find(idx.begin(), idx.end(), j) == idx.end()) idx.push_back(j);
    }
    std::sort(idx.begin(), idx.end());
    double z = 0.0;
    for (FeatureIndex j : idx) {
      const double v = normal(rng);
      ex.x.push_back({j, v});
      z += truth[j] * v;
    }
    ex.y = z >= 0 ? 1 : -1;
    if (unit(rng) < flip) ex.y = -ex.y;
    set.examples.push_back(std::move(ex));
  }
  return set;
}

// Objective evaluated directly from its definition.
inline double objective(const std::vector<double>& w, double b, double reg, const TrainingSet& set) {
  double loss = 0.0;
  for (const auto& ex : set.examples) {
    double z = b;
    for (const auto& e : ex.x) z += w[e.index] * e.value;
    const double m = ex.y * z;
    loss += m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
  }
  loss /= static_cast<double>(set.examples.size());
  double sq = 0.0;
  for (double x : w) sq += x * x;
  return loss + 0.5 * reg * sq;
}

// Relative error between the analytic gradient and central differences of
// objective(), as |g - fd| / |fd| over all weights and the bias.
inline double gradient_relative_error(const LinearModel& m, const TrainingSet& set, double h = 1e-5) {
  const LossGradient g = loss_and_gradient(m, set);
  std::vector<double> w = m.weights;
  w.resize(set.dimension, 0.0);
  double diff = 0.0, norm = 0.0;
  for (std::size_t j = 0; j <= set.dimension; ++j) {
    double fd;
    if (j < set.dimension) {
      const double keep = w[j];
      w[j] = keep + h;
      const double up = objective(w, m.bias, m.reg_strength, set);
      w[j] = keep - h;
      const double down = objective(w, m.bias, m.reg_strength, set);
      w[j] = keep;
      fd = (up - down) / (2 * h);
    } else {
      fd = (objective(w, m.bias + h, m.reg_strength, set) -
            objective(w, m.bias - h, m.reg_strength, set)) / (2 * h);
    }
    const double analytic = j < set.dimension ? g.weights[j] : g.bias;
    diff += (analytic - fd) * (analytic - fd);
    norm += fd * fd;
  }
  return std::sqrt(diff) / std::max(std::sqrt(norm), 1e-300);
}

// O(n^2) Mann-Whitney statistic.
inline double pair_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] <= 0) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] > 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

// Best non-decreasing fit whose values are restricted to multiples of 0.01,
// for points already in score order. Dynamic programming over the grid, so
// it is exact over that grid.
inline double best_grid_monotone_error(const std::vector<double>& labels) {
  constexpr int kLevels = 101;
  std::vector<double> best(kLevels, 0.0);
  for (double y : labels) {
    std::vector<double> next(kLevels);
    double running = std::numeric_limits<double>::infinity();
    for (int v = 0; v < kLevels; ++v) {
      running = std::min(running, best[v]);
      const double d = y - v / 100.0;
      next[v] = running + d * d;
    }
    best = std::move(next);
  }
  return *std::min_element(best.begin(), best.end());
}

// Cross-validation re-implemented from its description: stratified folds by
// row hash, mean per-fold AUC, highest mean wins, ties to the larger value.
inline double exhaustive_cv_choice(const TrainingSet& set, const std::vector<double>& grid,
                                   std::uint32_t folds, std::uint64_t salt, const FitOptions& opts) {
  std::vector<std::uint32_t> fold(set.examples.size());
  for (int cls : {1, -1}) {
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
    for (std::size_t i = 0; i < set.examples.size(); ++i) {
      if (set.examples[i].y == cls) keyed.push_back({hash_row(set.examples[i].row, salt), i});
    }
    std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
      return a.first != b.first ? a.first < b.first
                                : set.examples[a.second].row < set.examples[b.second].row;
    });
    for (std::size_t k = 0; k < keyed.size(); ++k) fold[keyed[k].second] = k % folds;
  }
  double best_auc = -1.0, best_reg = 0.0;
  for (double reg : grid) {
    double total = 0.0;
    for (std::uint32_t f = 0; f < folds; ++f) {
      TrainingSet train;
      train.dimension = set.dimension;
      std::vector<double> s;
      std::vector<int> y;
      for (std::size_t i = 0; i < set.examples.size(); ++i) {
        if (fold[i] != f) train.examples.push_back(set.examples[i]);
      }
      const LinearModel m = fit(train, reg, opts);
      for (std::size_t i = 0; i < set.examples.size(); ++i) {
        if (fold[i] == f) {
          s.push_back(m.margin(set.examples[i].x));
          y.push_back(set.examples[i].y);
        }
      }
      total += pair_auc(s, y);
    }
    const double mean = total / folds;
    if (mean > best_auc + kAucTieTolerance ||
        (std::abs(mean - best_auc) <= kAucTieTolerance && reg > best_reg)) {
      best_auc = mean;
      best_reg = reg;
    }
  }
  return best_reg;
}

}  // namespace ice::testing
