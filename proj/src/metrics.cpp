#include <algorithm>
#include <numeric>

#include "ice/trainer.hpp"

namespace ice {

namespace {

void check_lengths(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("scores and labels differ in length");
}

std::vector<std::size_t> order_by_score_desc(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney with average ranks; every rank sum is a multiple of 1/2 and
  // therefore exact in double precision for any realistic sample.
  double positive_rank_sum = 0.0;
  double positives = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] > 0) {
        positive_rank_sum += avg_rank;
        positives += 1.0;
      }
    }
    i = j;
  }
  const double negatives = static_cast<double>(scores.size()) - positives;
  if (positives == 0 || negatives == 0) throw InvalidArgument("AUC is undefined with one class");
  return (positive_rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

std::vector<PrPoint> pr_curve(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores, labels);
  const auto order = order_by_score_desc(scores);
  const double total_pos = static_cast<double>(
      std::count_if(labels.begin(), labels.end(), [](int y) { return y > 0; }));
  std::vector<PrPoint> curve;
  double tp = 0;
  double fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == t; ++i) {
      (labels[order[i]] > 0 ? tp : fp) += 1.0;
    }
    curve.push_back({t, tp / (tp + fp), total_pos > 0 ? tp / total_pos : 0.0});
  }
  return curve;
}

double recall_at_precision(std::span<const PrPoint> curve, double precision) {
  double best = 0.0;
  for (const PrPoint& p : curve) {
    if (p.precision >= precision) best = std::max(best, p.recall);
  }
  return best;
}

double Metrics::recall_at_precision(double precision) const {
  return ice::recall_at_precision(pr_curve, precision);
}

Metrics evaluate(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores, labels);
  Metrics m;
  for (int y : labels) (y > 0 ? m.positives : m.negatives) += 1;
  if (m.positives > 0 && m.negatives > 0) m.auc = auc(scores, labels);
  m.pr_curve = pr_curve(scores, labels);
  return m;
}

}  // namespace ice
