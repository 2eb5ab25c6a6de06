#pragma once

// Selection of the penalty weight xi by K-fold cross-validation (held-out
// integrated Brier score) and of the transformation index r by AIC.

#include "potl/em_fitter.hpp"
#include "potl/survival_core.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace potl {

struct TuneGrid {
  std::vector<double> xi_values{0.0,    0.015625, 0.03125, 0.0625, 0.125, 0.25,
                                0.5,    1.0,      2.0,     4.0,    8.0};
  std::vector<double> r_values{0.0, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0};
  int folds = 5;
  std::uint64_t seed = 1;
};

/// Fold label per subject: a seeded permutation dealt round-robin.
std::vector<int> assign_folds(std::size_t n, int folds, std::uint64_t seed);

struct CvScore {
  double xi = 0.0;
  double score = 0.0;  // mean held-out IBS; +inf when a fold fit failed
  std::vector<double> fold_scores;
};

struct CvResult {
  double best_xi = 0.0;
  std::vector<CvScore> table;
  int attempts = 1;  // fold assignments tried
  std::vector<std::string> warnings;
};

/// Cross-validated choice of xi at fixed base.r. When pseudo is aligned with
/// subjects (one atom per subject, same order) each training fit only sees the
/// atoms of its training subjects; otherwise every fit uses all atoms.
CvResult cv_select_xi(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo,
                      const TuneGrid& grid, const FitConfig& base);

struct AicRow {
  double r = 0.0;
  double log_likelihood = 0.0;
  double aic = 0.0;
  bool converged = false;
};

struct AicResult {
  double best_r = 0.0;
  TargetModel best_model;
  std::vector<AicRow> table;
  std::vector<std::string> warnings;
};

/// AIC(r) = -2 l_n + 2 (p + L) over unpenalized fits. Non-converged fits are
/// excluded; throws NumericError when every r is excluded.
AicResult aic_select_r(std::span<const Subject> subjects, const TuneGrid& grid, const FitConfig& base);

}  // namespace potl
