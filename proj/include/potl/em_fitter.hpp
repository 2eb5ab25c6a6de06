#pragma once

// Penalized NPMLE of (beta, Lambda) by EM. The frailties z_i, z~_i and the
// Poisson counts behind the current-status surrogate are the missing data.
// The E-step returns posterior frailty means and the per-atom Poisson factor;
// the M-step updates beta by one Newton step on the profiled expected
// complete-data objective and then sets each jump in closed form.

#include "potl/frailty_quad.hpp"
#include "potl/survival_core.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace potl {

/// Below this frailty variance the gamma frailty is replaced by z == 1.
inline constexpr double kDegenerateFrailtyR = 0.01;

struct FitConfig {
  double xi = 0.0;  // penalty weight; 0 is the target-only fit
  double r = 0.0;   // transformation index
  double tol = 1e-6;
  int max_iter = 5000;
  int quad_order = 40;
  // Monitor the cross-entropy penalty itself instead of the penalty the EM
  // ascends; the two coincide when r = 0.
  bool monitor_cross_entropy = false;
};

struct Grid {
  std::vector<double> times;      // distinct Y and Y~, increasing
  std::vector<int> event_counts;  // d_l
};

Grid build_grid(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo);

struct RiskSums {
  std::vector<double> s0;
  RowMatrix s1;  // L x p
  RowMatrix s2;  // L x p*p, row-major p x p blocks; empty unless requested
};

/// E-step output plus the risk sums of the M-step. Per-unit vectors follow the
/// problem's canonical (sorted) order.
struct EmWorkspace {
  std::vector<double> ez;         // E(z_i | data)
  std::vector<double> ez_tilde;   // E(z~_i | data)
  std::vector<double> ew_factor;  // shared factor of E(W-bar_il)
  std::vector<char> pseudo_active;
  std::size_t dropped_pseudo = 0;

  // Frozen at the E-step parameters.
  std::vector<double> numerators;     // n^-1 d_l + xi m^-1 sum_i w_i I(t_l <= Y~_i) E(W-bar_il)
  Eigen::VectorXd covariate_mass;     // n^-1 sum Delta_i X_i(Y_i) + xi m^-1 sum_il w_i E(W-bar_il) X~_il
  double objective = 0.0;             // n^-1 l_n + xi psi at the E-step parameters

  // s0(t_l), s1(t_l), s2(t_l) at the beta of the last compute_risk_sums call.
  RiskSums risk;
};

struct FitResult {
  TargetModel model;
  int iterations = 0;
  std::vector<double> objective_trace;  // objective at iterates 0..iterations
  bool converged = false;
  std::vector<std::string> warnings;
};

/// Fitting problem with data in canonical order, the jump grid and every
/// grid-index range precomputed. Immutable once built.
class EmProblem {
 public:
  EmProblem(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo, FitConfig config);

  [[nodiscard]] const FitConfig& config() const { return config_; }
  [[nodiscard]] const Grid& grid() const { return grid_; }
  [[nodiscard]] Eigen::Index dim() const { return p_; }
  [[nodiscard]] std::span<const Subject> subjects() const { return subjects_; }
  [[nodiscard]] std::span<const PseudoSample> pseudo() const { return pseudo_; }
  [[nodiscard]] bool penalized() const { return !pseudo_.empty(); }
  [[nodiscard]] double effective_r() const { return r_; }

  /// beta = 0, every jump 1/L.
  [[nodiscard]] TargetModel initial_model() const;
  [[nodiscard]] TargetModel make_model(Eigen::VectorXd beta, std::vector<double> jumps) const;

  /// Conditional expectations at `model` (whose jumps must live on grid()).
  [[nodiscard]] EmWorkspace e_step(const TargetModel& model) const;

  /// s0/s1/s2 at beta using the frozen frailty expectations in ws.
  [[nodiscard]] RiskSums risk_sums(const EmWorkspace& ws, const Eigen::VectorXd& beta,
                                   bool second_order = true) const;
  void compute_risk_sums(EmWorkspace& ws, const Eigen::VectorXd& beta, bool second_order = true) const {
    ws.risk = risk_sums(ws, beta, second_order);
  }

  /// Closed-form jump update from ws.numerators and ws.risk.s0.
  [[nodiscard]] std::vector<double> update_lambda(const EmWorkspace& ws) const;

  /// M-step score with lambda profiled out, expectations frozen.
  [[nodiscard]] Eigen::VectorXd score(const EmWorkspace& ws, const Eigen::VectorXd& beta) const;
  /// Negative Jacobian of score().
  [[nodiscard]] Eigen::MatrixXd information(const EmWorkspace& ws, const Eigen::VectorXd& beta) const;
  /// Profiled expected complete-data objective (up to a constant).
  [[nodiscard]] double profile_q(const EmWorkspace& ws, const Eigen::VectorXd& beta) const;

  /// One Newton step from beta, halved until profile_q does not decrease.
  [[nodiscard]] Eigen::VectorXd update_beta(const EmWorkspace& ws, const Eigen::VectorXd& beta,
                                            std::vector<std::string>* warnings = nullptr) const;

  /// n^-1 l_n + xi psi, where psi is the penalty the EM ascends (see README).
  [[nodiscard]] double objective(const TargetModel& model) const;

  [[nodiscard]] FitResult fit() const;

 private:
  struct Range {
    std::uint32_t lo;     // first grid index
    std::uint32_t hi;     // one past the last grid index
    std::uint32_t owner;  // subject or pseudo index
    std::uint32_t row;    // row in the segment value matrix
  };

  struct Block {
    RowMatrix values;  // one row per covariate segment
    std::vector<Range> ranges;
  };

  Block index_paths(const std::vector<const CovariatePath*>& paths, const std::vector<double>& ends) const;
  static Eigen::VectorXd exp_eta(const Block& block, const Eigen::VectorXd& beta);
  void accumulate(const Block& block, const std::vector<double>& unit_weights, const Eigen::VectorXd& beta,
                  RiskSums& sums, bool second_order) const;

  FitConfig config_;
  double r_ = 0.0;
  Eigen::Index p_ = 0;
  std::vector<Subject> subjects_;
  std::vector<PseudoSample> pseudo_;
  Grid grid_;
  Block subject_block_;
  Block pseudo_block_;
  std::vector<std::uint32_t> event_index_;  // grid index of Y_i
  RowMatrix event_covariates_;               // X_i(Y_i), one row per subject
  Eigen::VectorXd event_covariate_sum_;      // n^-1 sum Delta_i X_i(Y_i)
  std::vector<const QuadratureRule*> pseudo_rules_;
};

/// Convenience wrapper: EmProblem(subjects, pseudo, config).fit().
FitResult fit(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo,
              const FitConfig& config);

}  // namespace potl
