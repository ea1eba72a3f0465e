#include <algorithm>
#include <numeric>

#include "ice/trainer.hpp"

namespace ice {

IsotonicMap::IsotonicMap(std::vector<double> breakpoints, std::vector<double> values)
    : breakpoints_(std::move(breakpoints)), values_(std::move(values)) {
  if (breakpoints_.size() != values_.size()) {
    throw InvalidArgument("isotonic map needs one value per breakpoint");
  }
  for (std::size_t i = 1; i < values_.size(); ++i) {
    if (!(breakpoints_[i - 1] < breakpoints_[i])) {
      throw InvalidArgument("isotonic breakpoints must be strictly ascending");
    }
    if (values_[i - 1] > values_[i]) throw InvalidArgument("isotonic values must be non-decreasing");
  }
  for (double v : values_) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("isotonic values must lie in [0, 1]");
  }
}

double IsotonicMap::operator()(double raw) const {
  if (values_.empty()) return raw;
  auto it = std::upper_bound(breakpoints_.begin(), breakpoints_.end(), raw);
  if (it == breakpoints_.begin()) return values_.front();
  return values_[static_cast<std::size_t>(it - breakpoints_.begin()) - 1];
}

namespace {

struct Block {
  double first_score;
  double sum;
  double weight;
  std::size_t groups;  // distinct scores pooled into this block
  double mean() const { return sum / weight; }
};

struct PavResult {
  std::vector<double> distinct_scores;
  std::vector<Block> blocks;
  std::vector<std::size_t> order;  // input indices sorted by score
};

PavResult run_pav(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("scores and labels differ in length");
  PavResult out;
  out.order.resize(scores.size());
  std::iota(out.order.begin(), out.order.end(), std::size_t{0});
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  for (std::size_t i = 0; i < out.order.size();) {
    const double s = scores[out.order[i]];
    Block b{s, 0.0, 0.0, 1};
    for (; i < out.order.size() && scores[out.order[i]] == s; ++i) {
      b.sum += labels[out.order[i]];
      b.weight += 1.0;
    }
    out.distinct_scores.push_back(s);
    out.blocks.push_back(b);
    while (out.blocks.size() > 1 &&
           out.blocks[out.blocks.size() - 2].mean() >= out.blocks.back().mean()) {
      Block top = out.blocks.back();
      out.blocks.pop_back();
      Block& prev = out.blocks.back();
      // Equal means are pooled too so the map has no redundant steps.
      prev.sum += top.sum;
      prev.weight += top.weight;
      prev.groups += top.groups;
    }
  }
  return out;
}

}  // namespace

IsotonicMap fit_isotonic(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() < 2) throw InvalidArgument("isotonic calibration needs at least 2 points");
  const PavResult pav = run_pav(scores, labels);
  std::vector<double> breakpoints;
  std::vector<double> values;
  for (const Block& b : pav.blocks) {
    breakpoints.push_back(b.first_score);
    values.push_back(std::clamp(b.mean(), 0.0, 1.0));
  }
  return IsotonicMap(std::move(breakpoints), std::move(values));
}

std::vector<double> isotonic_fitted(std::span<const double> scores,
                                    std::span<const double> labels) {
  const PavResult pav = run_pav(scores, labels);
  std::vector<double> fitted(scores.size());
  std::size_t pos = 0;
  std::size_t group = 0;
  for (const Block& b : pav.blocks) {
    group += b.groups;
    const double last_score = pav.distinct_scores[group - 1];
    while (pos < pav.order.size() && scores[pav.order[pos]] <= last_score) {
      fitted[pav.order[pos]] = b.mean();
      ++pos;
    }
  }
  return fitted;
}

}  // namespace ice
