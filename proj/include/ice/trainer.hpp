#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ice/types.hpp"

namespace ice {

struct Example {
  RowId row = 0;
  SparseVector x;
  int y = 1;  // +1 or -1
};

struct TrainingSet {
  std::vector<Example> examples;
  std::size_t dimension = 0;

  std::size_t positives() const;
  std::size_t negatives() const;
  // Throws InvalidArgument on duplicate rows, bad labels, out-of-range or
  // non-finite feature values.
  void validate() const;
};

// Right-continuous non-decreasing step function from raw score to
// probability. Below the first breakpoint the first value applies.
class IsotonicMap {
 public:
  IsotonicMap() = default;
  IsotonicMap(std::vector<double> breakpoints, std::vector<double> values);

  double operator()(double raw) const;
  const std::vector<double>& breakpoints() const { return breakpoints_; }
  const std::vector<double>& values() const { return values_; }
  bool empty() const { return values_.empty(); }

  friend bool operator==(const IsotonicMap&, const IsotonicMap&) = default;

 private:
  std::vector<double> breakpoints_;
  std::vector<double> values_;
};

// Pool-adjacent-violators: the least-squares non-decreasing fit of labels
// ordered by score. Equal scores are pooled first. Needs >= 2 points.
IsotonicMap fit_isotonic(std::span<const double> scores, std::span<const double> labels);
// Per-point fitted values in the input order (same fit as fit_isotonic).
std::vector<double> isotonic_fitted(std::span<const double> scores, std::span<const double> labels);

struct LinearModel {
  std::vector<double> weights;  // dense by FeatureIndex; missing tail is zero
  double bias = 0.0;
  double reg_strength = 1.0;
  ModelVersion version = 0;
  std::optional<IsotonicMap> calibrator;

  double margin(const SparseVector& x) const;
  double raw_probability(const SparseVector& x) const;
  // Calibrated when a calibrator is present.
  double predict(const SparseVector& x) const;
  double calibrate(double raw_probability) const;
};

double sigmoid(double z);

struct LossGradient {
  double loss = 0.0;
  std::vector<double> weights;  // d loss / d w
  double bias = 0.0;            // d loss / d b
};

// Mean log-loss plus (reg_strength / 2) * |w|^2; the bias is unregularized.
LossGradient loss_and_gradient(const LinearModel& model, const TrainingSet& set);

struct FitOptions {
  double gradient_tolerance = 1e-6;
  int max_iterations = 500;
  std::size_t history = 10;
};

struct FitReport {
  int iterations = 0;
  double gradient_norm = 0.0;
  double loss = 0.0;
  bool converged = false;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

// L-BFGS from the zero vector; deterministic for a given input.
LinearModel fit(const TrainingSet& set, double reg_strength, const FitOptions& options = {},
                FitReport* report = nullptr);

struct TrainerFamily {
  std::vector<double> grid{1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
  std::uint32_t folds = 5;
  std::uint64_t fold_salt = 0;
  bool calibrate = true;
  FitOptions fit;
};

struct CvReport {
  std::vector<double> grid;
  std::vector<double> mean_auc;                 // per grid value
  std::vector<std::vector<double>> fold_auc;    // [grid][fold]
  std::uint32_t folds_used = 0;
  bool cv_skipped = false;  // too few examples of a class; trained at largest grid value
  std::size_t selected = 0;
  double selected_reg = 0.0;
  std::vector<double> out_of_fold;  // raw probability per example at the selected value
};

// Mean AUCs closer than this are ties; ties go to the larger reg_strength.
inline constexpr double kAucTieTolerance = 1e-12;

// Stratified: within each class, examples ordered by hash(row, salt) are dealt
// round-robin into folds.
std::vector<std::uint32_t> assign_folds(const TrainingSet& set, std::uint32_t folds,
                                        std::uint64_t salt);

struct FamilyResult {
  LinearModel model;
  CvReport report;
};

FamilyResult train_family(const TrainingSet& set, const TrainerFamily& family);

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct Metrics {
  std::optional<double> auc;  // absent with a single class
  std::vector<PrPoint> pr_curve;
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;

  double recall_at_precision(double precision) const;
};

// Concordant-pair fraction, ties counted one half. Throws InvalidArgument
// unless both classes are present. Labels: > 0 positive.
double auc(std::span<const double> scores, std::span<const int> labels);
// Threshold sweep over every distinct score, predicting positive at >= t.
std::vector<PrPoint> pr_curve(std::span<const double> scores, std::span<const int> labels);
double recall_at_precision(std::span<const PrPoint> curve, double precision);
Metrics evaluate(std::span<const double> scores, std::span<const int> labels);

}  // namespace ice
