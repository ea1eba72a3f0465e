#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <set>
#include <sstream>

#include "ice/trainer.hpp"

namespace ice {

namespace {

// log(1 + exp(t)) without overflow.
double softplus(double t) {
  return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Parameters packed as [w_0 .. w_{d-1}, b].
struct Objective {
  const TrainingSet& set;
  double reg;
  std::size_t dim;

  double evaluate(const std::vector<double>& theta, std::vector<double>* grad) const {
    const double n = static_cast<double>(set.examples.size());
    const double b = theta[dim];
    double loss = 0.0;
    if (grad) grad->assign(dim + 1, 0.0);
    for (const Example& ex : set.examples) {
      double z = b;
      for (const auto& e : ex.x) z += theta[e.index] * e.value;
      const double yz = ex.y * z;
      loss += softplus(-yz);
      if (grad) {
        // d/dz softplus(-y z) = -y * sigmoid(-y z)
        const double g = -ex.y * sigmoid(-yz) / n;
        for (const auto& e : ex.x) (*grad)[e.index] += g * e.value;
        (*grad)[dim] += g;
      }
    }
    loss /= n;
    double sq = 0.0;
    for (std::size_t i = 0; i < dim; ++i) sq += theta[i] * theta[i];
    loss += 0.5 * reg * sq;
    if (grad) {
      for (std::size_t i = 0; i < dim; ++i) (*grad)[i] += reg * theta[i];
    }
    return loss;
  }
};

}  // namespace

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::size_t TrainingSet::positives() const {
  return static_cast<std::size_t>(
      std::count_if(examples.begin(), examples.end(), [](const Example& e) { return e.y > 0; }));
}

std::size_t TrainingSet::negatives() const { return examples.size() - positives(); }

void TrainingSet::validate() const {
  std::set<RowId> rows;
  for (const Example& ex : examples) {
    if (!rows.insert(ex.row).second) {
      throw InvalidArgument("duplicate row " + std::to_string(ex.row) + " in training set");
    }
    if (ex.y != 1 && ex.y != -1) throw InvalidArgument("labels must be +1 or -1");
    for (const auto& e : ex.x) {
      if (e.index >= dimension) throw InvalidArgument("feature index beyond dimension");
      if (!std::isfinite(e.value)) {
        throw InvalidArgument("non-finite feature value in row " + std::to_string(ex.row));
      }
    }
  }
}

double LinearModel::margin(const SparseVector& x) const {
  double z = bias;
  for (const auto& e : x) {
    if (e.index < weights.size()) z += weights[e.index] * e.value;
  }
  return z;
}

double LinearModel::raw_probability(const SparseVector& x) const { return sigmoid(margin(x)); }

double LinearModel::calibrate(double raw) const {
  return calibrator && !calibrator->empty() ? (*calibrator)(raw) : raw;
}

double LinearModel::predict(const SparseVector& x) const { return calibrate(raw_probability(x)); }

LossGradient loss_and_gradient(const LinearModel& model, const TrainingSet& set) {
  set.validate();
  if (set.examples.empty()) throw InvalidArgument("empty training set");
  const std::size_t dim = set.dimension;
  std::vector<double> theta(dim + 1, 0.0);
  std::copy_n(model.weights.begin(), std::min(model.weights.size(), dim), theta.begin());
  theta[dim] = model.bias;
  Objective objective{set, model.reg_strength, dim};
  std::vector<double> grad;
  LossGradient out;
  out.loss = objective.evaluate(theta, &grad);
  out.bias = grad[dim];
  grad.resize(dim);
  out.weights = std::move(grad);
  return out;
}

LinearModel fit(const TrainingSet& set, double reg_strength, const FitOptions& options,
                FitReport* report) {
  set.validate();
  if (set.positives() == 0 || set.negatives() == 0) {
    throw InvalidArgument("fit needs both classes");
  }
  if (!(reg_strength > 0)) throw InvalidArgument("reg_strength must be positive");
  const std::size_t dim = set.dimension;
  const Objective objective{set, reg_strength, dim};

  std::vector<double> theta(dim + 1, 0.0);
  std::vector<double> grad;
  double loss = objective.evaluate(theta, &grad);
  std::deque<std::vector<double>> s_hist;
  std::deque<std::vector<double>> y_hist;
  std::deque<double> rho_hist;

  FitReport local;
  int iter = 0;
  double gnorm = std::sqrt(dot(grad, grad));
  std::vector<double> direction(dim + 1);
  std::vector<double> candidate(dim + 1);
  std::vector<double> candidate_grad;
  while (gnorm > options.gradient_tolerance && iter < options.max_iterations) {
    // Two-loop recursion for the quasi-Newton direction.
    direction = grad;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t i = s_hist.size(); i-- > 0;) {
      alpha[i] = rho_hist[i] * dot(s_hist[i], direction);
      for (std::size_t j = 0; j <= dim; ++j) direction[j] -= alpha[i] * y_hist[i][j];
    }
    if (!s_hist.empty()) {
      const double gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
      for (double& v : direction) v *= gamma;
    }
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * dot(y_hist[i], direction);
      for (std::size_t j = 0; j <= dim; ++j) direction[j] += s_hist[i][j] * (alpha[i] - beta);
    }
    for (double& v : direction) v = -v;

    double slope = dot(grad, direction);
    if (!(slope < 0)) {
      // Not a descent direction; restart from steepest descent.
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      for (std::size_t j = 0; j <= dim; ++j) direction[j] = -grad[j];
      slope = -gnorm * gnorm;
    }
    double step = s_hist.empty() ? std::min(1.0, 1.0 / gnorm) : 1.0;

    // Backtracking line search with the Armijo condition.
    bool accepted = false;
    double candidate_loss = loss;
    for (int halvings = 0; halvings < 60; ++halvings) {
      for (std::size_t j = 0; j <= dim; ++j) candidate[j] = theta[j] + step * direction[j];
      candidate_loss = objective.evaluate(candidate, &candidate_grad);
      if (!std::isfinite(candidate_loss)) {
        step *= 0.5;
        continue;
      }
      if (candidate_loss <= loss + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // no further decrease representable

    std::vector<double> s(dim + 1);
    std::vector<double> y(dim + 1);
    for (std::size_t j = 0; j <= dim; ++j) {
      s[j] = candidate[j] - theta[j];
      y[j] = candidate_grad[j] - grad[j];
    }
    const double sy = dot(s, y);
    theta.swap(candidate);
    grad.swap(candidate_grad);
    loss = candidate_loss;
    gnorm = std::sqrt(dot(grad, grad));
    ++iter;
    if (sy > 1e-16) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > options.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
  }
  if (!std::isfinite(loss) || !std::isfinite(gnorm)) {
    std::ostringstream msg;
    msg << "logistic fit diverged after " << iter << " iterations (loss " << loss
        << ", gradient norm " << gnorm << ", reg " << reg_strength << ", n "
        << set.examples.size() << ")";
    throw TrainingError(msg.str());
  }

  local.iterations = iter;
  local.gradient_norm = gnorm;
  local.loss = loss;
  local.converged = gnorm <= options.gradient_tolerance;
  if (report) *report = local;

  LinearModel model;
  model.weights.assign(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(dim));
  model.bias = theta[dim];
  model.reg_strength = reg_strength;
  return model;
}

}  // namespace ice
