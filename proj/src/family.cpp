#include <algorithm>
#include <cmath>
#include <numeric>

#include "ice/hash.hpp"
#include "ice/trainer.hpp"

namespace ice {

std::vector<std::uint32_t> assign_folds(const TrainingSet& set, std::uint32_t folds,
                                        std::uint64_t salt) {
  if (folds < 1) throw InvalidArgument("fold count must be positive");
  std::vector<std::uint32_t> fold(set.examples.size(), 0);
  for (int cls : {1, -1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < set.examples.size(); ++i) {
      if (set.examples[i].y == cls) members.push_back(i);
    }
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      const auto ha = hash_row(set.examples[a].row, salt);
      const auto hb = hash_row(set.examples[b].row, salt);
      return ha != hb ? ha < hb : set.examples[a].row < set.examples[b].row;
    });
    for (std::size_t k = 0; k < members.size(); ++k) {
      fold[members[k]] = static_cast<std::uint32_t>(k % folds);
    }
  }
  return fold;
}

FamilyResult train_family(const TrainingSet& set, const TrainerFamily& family) {
  if (family.grid.empty()) throw InvalidArgument("trainer family needs a non-empty grid");
  if (family.folds < 2) throw InvalidArgument("trainer family needs at least 2 folds");
  set.validate();
  const std::size_t pos = set.positives();
  const std::size_t neg = set.negatives();
  if (pos == 0 || neg == 0) throw InvalidArgument("family training needs both classes");

  FamilyResult result;
  CvReport& report = result.report;
  report.grid = family.grid;
  const std::size_t minority = std::min(pos, neg);

  if (minority < 2) {
    report.cv_skipped = true;
    report.selected = static_cast<std::size_t>(
        std::max_element(family.grid.begin(), family.grid.end()) - family.grid.begin());
    report.selected_reg = family.grid[report.selected];
    result.model = fit(set, report.selected_reg, family.fit);
    return result;
  }

  const std::uint32_t k = minority >= family.folds ? family.folds : 2;
  report.folds_used = k;
  const auto fold = assign_folds(set, k, family.fold_salt);

  // Fold-local training sets are shared across grid values.
  std::vector<TrainingSet> train(k);
  std::vector<std::vector<std::size_t>> held_out(k);
  for (std::uint32_t f = 0; f < k; ++f) train[f].dimension = set.dimension;
  for (std::size_t i = 0; i < set.examples.size(); ++i) {
    for (std::uint32_t f = 0; f < k; ++f) {
      if (fold[i] == f) {
        held_out[f].push_back(i);
      } else {
        train[f].examples.push_back(set.examples[i]);
      }
    }
  }

  std::vector<std::vector<double>> oof_by_grid(family.grid.size());
  for (std::size_t g = 0; g < family.grid.size(); ++g) {
    std::vector<double> fold_auc(k);
    std::vector<double>& oof = oof_by_grid[g];
    oof.assign(set.examples.size(), 0.5);
    for (std::uint32_t f = 0; f < k; ++f) {
      const LinearModel m = fit(train[f], family.grid[g], family.fit);
      std::vector<double> margins;
      std::vector<int> labels;
      for (std::size_t i : held_out[f]) {
        const double z = m.margin(set.examples[i].x);
        margins.push_back(z);
        labels.push_back(set.examples[i].y);
        oof[i] = sigmoid(z);
      }
      // Margins rank without the ties that sigmoid saturation would create.
      fold_auc[f] = auc(margins, labels);
    }
    report.mean_auc.push_back(std::accumulate(fold_auc.begin(), fold_auc.end(), 0.0) /
                              static_cast<double>(k));
    report.fold_auc.push_back(std::move(fold_auc));
  }

  std::size_t best = 0;
  for (std::size_t g = 1; g < family.grid.size(); ++g) {
    const double diff = report.mean_auc[g] - report.mean_auc[best];
    if (diff > kAucTieTolerance ||
        (std::abs(diff) <= kAucTieTolerance && family.grid[g] > family.grid[best])) {
      best = g;
    }
  }
  report.selected = best;
  report.selected_reg = family.grid[best];
  report.out_of_fold = std::move(oof_by_grid[best]);

  result.model = fit(set, report.selected_reg, family.fit);
  if (family.calibrate) {
    std::vector<double> targets;
    targets.reserve(set.examples.size());
    for (const Example& ex : set.examples) targets.push_back(ex.y > 0 ? 1.0 : 0.0);
    result.model.calibrator = fit_isotonic(report.out_of_fold, targets);
  }
  return result;
}

}  // namespace ice
