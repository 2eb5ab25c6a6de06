#pragma once

// Prediction-error metrics for fitted survival predictors: L2 distance and
// D_tau against a known truth, and the IPCW metrics (Uno's C-index,
// integrated Brier score, RMST error) using a Kaplan-Meier estimate of the
// censoring distribution.

#include "potl/survival_core.hpp"

#include <functional>
#include <span>
#include <vector>

namespace potl {

inline constexpr int kTimeGridPoints = 200;
inline constexpr double kCensoringFloor = 1e-6;

/// Kaplan-Meier estimate H(t) of the censoring survival function.
class CensoringKM {
 public:
  CensoringKM() = default;
  CensoringKM(std::vector<double> times, std::vector<double> values);

  [[nodiscard]] const std::vector<double>& times() const { return times_; }
  [[nodiscard]] const std::vector<double>& values() const { return values_; }
  /// H(t), right-continuous.
  [[nodiscard]] double at(double t) const;
  /// H(t-).
  [[nodiscard]] double before(double t) const;

 private:
  std::vector<double> times_;
  std::vector<double> values_;
};

/// Product-limit estimator with the roles of event and censoring swapped.
/// At tied times events precede censorings.
CensoringKM censoring_km(std::span<const Subject> subjects);

using SurvivalFunction = std::function<double(double, const CovariatePath&)>;

/// Survival curves evaluated on increasing time grids.
class SurvivalPredictor {
 public:
  virtual ~SurvivalPredictor() = default;
  virtual void curve(const CovariatePath& path, std::span<const double> times, std::span<double> out) const = 0;
};

/// Curves of a fitted transformation model, one merge sweep per subject.
class ModelPredictor final : public SurvivalPredictor {
 public:
  explicit ModelPredictor(const TargetModel& model) : model_(model) {}
  void curve(const CovariatePath& path, std::span<const double> times, std::span<double> out) const override;

 private:
  const TargetModel& model_;
};

class FunctionPredictor final : public SurvivalPredictor {
 public:
  explicit FunctionPredictor(SurvivalFunction fn) : fn_(std::move(fn)) {}
  void curve(const CovariatePath& path, std::span<const double> times, std::span<double> out) const override;

 private:
  SurvivalFunction fn_;
};

struct ValidationSet {
  std::vector<Subject> subjects;
  SurvivalFunction oracle;  // true S0(t | X); empty when unknown
};

/// 200 equally spaced points on [0, tau], endpoints included.
std::vector<double> time_grid(double tau);

double l2_distance(const SurvivalPredictor& fitted, const ValidationSet& val, double tau);
double d_tau(const SurvivalPredictor& fitted, const ValidationSet& val, double tau);
/// Risk score 1 - S(tau | X); weights H(Y_i-)^-2 on comparable pairs.
double uno_c_index(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                   const CensoringKM* censoring = nullptr);
double integrated_brier(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                        const CensoringKM* censoring = nullptr);
/// IPCW mean of |min(Y_i, tau) - RMST_i| over events.
double rmst_error(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                  const CensoringKM* censoring = nullptr);

struct MetricSet {
  double l2d = 0.0;
  double d_tau = 0.0;
  double c_index = 0.0;
  double ibs = 0.0;
  double rmst = 0.0;
  bool censoring_floor_hit = false;
};

/// All five metrics from one pass of curve evaluations. The oracle metrics
/// are NaN when the validation set carries no oracle.
MetricSet evaluate_metrics(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                           const CensoringKM* censoring = nullptr);

}  // namespace potl
