#pragma once

// Domain types and exact evaluation of the semiparametric transformation
// model  Lambda(t | X) = G( int_0^t exp{beta' X(s)} dLambda(s) ),
// G(x) = log(1 + r x) / r  (r = 0: G(x) = x, the Cox model).

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace potl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kSourceClamp = 1e-6;   // clamp for source survival values
inline constexpr double kModelClamp = 1e-12;   // clamp for model survival inside logs

/// Right-continuous piecewise-constant covariate path. Segment k holds
/// values.row(k) on [breakpoints[k], breakpoints[k+1]); the last segment
/// extends to infinity. A time-fixed covariate vector is the one-segment case.
class CovariatePath {
 public:
  CovariatePath() = default;
  explicit CovariatePath(const Eigen::VectorXd& fixed);
  CovariatePath(std::vector<double> breakpoints, RowMatrix values);

  [[nodiscard]] Eigen::Index dim() const { return values_.cols(); }
  [[nodiscard]] std::size_t segments() const { return breakpoints_.size(); }
  [[nodiscard]] bool time_fixed() const { return breakpoints_.size() == 1; }
  [[nodiscard]] const std::vector<double>& breakpoints() const { return breakpoints_; }
  [[nodiscard]] const RowMatrix& values() const { return values_; }

  /// Index of the segment containing t (t >= 0).
  [[nodiscard]] std::size_t segment_at(double t) const;
  [[nodiscard]] Eigen::VectorXd value_at(double t) const;

 private:
  std::vector<double> breakpoints_{0.0};
  RowMatrix values_{RowMatrix::Zero(1, 0)};
};

struct Subject {
  double time = 0.0;   // Y = min(T, C)
  bool event = false;  // Delta = I(T <= C)
  CovariatePath covariates;
};

/// Subjects with their external ids and covariate column names.
struct Dataset {
  std::vector<Subject> subjects;
  std::vector<std::string> ids;
  std::vector<std::string> covariate_names;

  [[nodiscard]] std::size_t size() const { return subjects.size(); }
};

/// Throws DataError unless time > 0 and the covariate path is well formed.
void validate(const Subject& subject);

/// Step function with nonnegative jumps at strictly increasing positive times.
class StepIntensity {
 public:
  StepIntensity() = default;
  StepIntensity(std::vector<double> times, std::vector<double> jumps);

  [[nodiscard]] std::size_t size() const { return times_.size(); }
  [[nodiscard]] const std::vector<double>& times() const { return times_; }
  [[nodiscard]] const std::vector<double>& jumps() const { return jumps_; }
  /// Prefix sums; cumulative()[l] = sum of the first l jumps (size L + 1).
  [[nodiscard]] const std::vector<double>& cumulative() const { return cumulative_; }

  /// Lambda(t) = sum of jumps at times <= t.
  [[nodiscard]] double at(double t) const;
  /// Number of jump times <= t.
  [[nodiscard]] std::size_t count_upto(double t) const;
  /// Lambda{t}: jump size at exactly t, 0 when t is not a jump time.
  [[nodiscard]] double jump_at(double t) const;

 private:
  std::vector<double> times_;
  std::vector<double> jumps_;
  std::vector<double> cumulative_{0.0};
};

struct TransformationSpec {
  double r = 0.0;

  [[nodiscard]] bool is_cox() const { return r == 0.0; }
  [[nodiscard]] double G(double x) const;
  /// log G'(x) = -log(1 + r x).
  [[nodiscard]] double log_G_prime(double x) const;
};

struct TargetModel {
  Eigen::VectorXd beta;
  StepIntensity intensity;
  TransformationSpec transform;
};

/// One penalty atom: the fitted survival at (time, covariates) is pulled
/// toward source_survival with weight `weight`.
struct PseudoSample {
  double time = 0.0;
  CovariatePath covariates;
  double weight = 1.0;
  double source_survival = 0.5;
};

/// Builds a pseudo sample, clamping the source survival to [1e-6, 1 - 1e-6].
PseudoSample make_pseudo_sample(double time, CovariatePath covariates, double weight,
                                double source_survival);

double clamp_source_survival(double s);

/// G(x) = log(1 + r x) / r, or x when r = 0. Throws std::domain_error for
/// negative arguments.
double transform_G(double x, double r);

/// int_0^t exp{beta' X(s)} dLambda(s) = sum_{t_l <= t} lambda_l exp{beta' X(t_l)}.
double cumulative_intensity(const Eigen::VectorXd& beta, const StepIntensity& intensity,
                            const CovariatePath& path, double t);

double survival(const TargetModel& model, const CovariatePath& path, double t);

/// Right-censored NPMLE log-likelihood. Returns -infinity when an event time
/// carries a zero jump (degenerate likelihood).
double log_likelihood(std::span<const Subject> subjects, const TargetModel& model);

/// Cross-entropy similarity between model and source survival predictions,
/// m^-1 sum_i w_i [S~_i log S_i + (1 - S~_i) log(1 - S_i)]. Zero for an empty list.
double penalty_psi(std::span<const PseudoSample> pseudo, const TargetModel& model);

}  // namespace potl
