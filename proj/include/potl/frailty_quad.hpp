#pragma once

// Gamma-frailty integrals. The frailty z has the gamma density f with mean 1
// and variance r. Every integral here has the form
//
//   int_0^inf g(z) z^c exp(-b z) f(z) dz,
//
// which is evaluated by a generalized Gauss-Laguerre rule in u = (1/r + b) z
// with exponent alpha = 1/r - 1 + c. The gamma density and the exponential
// factor are absorbed exactly; only the smooth g is approximated.

#include "potl/survival_core.hpp"

#include <span>
#include <vector>

namespace potl {

/// Generalized Gauss-Laguerre rule for the weight u^alpha exp(-u) on (0, inf).
struct QuadratureRule {
  int order = 0;
  double alpha = 0.0;
  std::vector<double> nodes;               // strictly increasing
  std::vector<double> weights;             // sum to Gamma(alpha + 1)
  std::vector<double> normalized_weights;  // sum to 1
};

/// Golub-Welsch construction. Throws NumericError if the eigen-solver fails.
QuadratureRule build_laguerre_rule(int order, double alpha);

/// Rule absorbing the frailty density: alpha = 1/r - 1, so that
/// E_f[g(z)] ~ sum_j normalized_weights_j g(r * nodes_j).
QuadratureRule build_rule(int order, double r);

/// Process-wide cache keyed by (order, alpha); safe for concurrent use.
const QuadratureRule& cached_laguerre_rule(int order, double alpha);

struct FrailtyPosteriorRC {
  bool event = false;
  double cum_intensity = 0.0;  // A >= 0
  double r = 1.0;              // > 0
};

struct FrailtyPosteriorCS {
  double source_survival = 0.5;  // in (0, 1)
  double cum_intensity = 1.0;    // A > 0
  double r = 1.0;                // > 0
};

/// Closed form (1/r + Delta) / (1/r + A) for the right-censored posterior mean.
double posterior_mean_rc_closed_form(const FrailtyPosteriorRC& p);

/// E(z | Y, Delta) by quadrature; `rule` must be build_rule(order, p.r).
double posterior_mean_rc(const FrailtyPosteriorRC& p, const QuadratureRule& rule);

/// log int z^Delta exp(-z A) f(z) dz by quadrature (same rule as above).
double log_marginal_rc(const FrailtyPosteriorRC& p, const QuadratureRule& rule);

/// Rule for the current-status posterior: alpha = 1/r - source_survival.
const QuadratureRule& cs_rule(int order, const FrailtyPosteriorCS& p);

/// All current-status quantities from one pass over the nodes.
struct CsMoments {
  double mean = 1.0;          // E(z~ | .)
  double poisson_bar = 0.0;   // E[(1 - S~) z~ / (1 - exp(-z~ A)) | .]
  double log_marginal = 0.0;  // log int exp(-zAS~) (1 - exp(-zA))^(1-S~) f(z) dz
};

CsMoments cs_moments(const FrailtyPosteriorCS& p, const QuadratureRule& rule);

/// Posterior mean of z~ under density  exp(-zA)^S~ (1 - exp(-zA))^(1-S~) f(z).
double posterior_mean_cs(const FrailtyPosteriorCS& p, const QuadratureRule& rule);

/// Shared factor of E(W-bar_il): posterior expectation of (1-S~) z~ / (1 - exp(-z~ A)).
double expected_poisson_bar(const FrailtyPosteriorCS& p, const QuadratureRule& rule);

/// The r -> 0 counterparts: z identically 1.
CsMoments cs_moments_degenerate(double source_survival, double cum_intensity);

/// Right-censored log-likelihood through the frailty integral rather than G.
/// Must agree with log_likelihood for r > 0.
double frailty_log_likelihood(std::span<const Subject> subjects, const TargetModel& model,
                              int order = 40);

}  // namespace potl
