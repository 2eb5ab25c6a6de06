#include "potl/frailty_quad.hpp"

#include "potl/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <sstream>
#include <stdexcept>

namespace potl {
namespace {

constexpr double kAlphaMatch = 1e-12;

void require_alpha(const QuadratureRule& rule, double alpha, const char* who) {
  if (std::abs(rule.alpha - alpha) > kAlphaMatch * std::max(1.0, std::abs(alpha))) {
    std::ostringstream os;
    os << who << ": rule has alpha " << rule.alpha << ", expected " << alpha;
    throw std::invalid_argument(os.str());
  }
}

void require_positive_r(double r) {
  if (!(r > 0.0) || !std::isfinite(r)) throw std::invalid_argument("frailty variance r must be positive");
}

// log of (1 - exp(-x)) / x, continuous at 0.
double log_phi(double x) {
  if (x < 1e-12) return -0.5 * x;
  return std::log(-std::expm1(-x) / x);
}

}  // namespace

QuadratureRule build_laguerre_rule(int order, double alpha) {
  if (order < 1) throw std::invalid_argument("quadrature order must be positive");
  if (!(alpha > -1.0) || !std::isfinite(alpha)) throw std::invalid_argument("Laguerre alpha must exceed -1");

  const Eigen::Index n = order;
  Eigen::VectorXd diag(n);
  Eigen::VectorXd sub(std::max<Eigen::Index>(n - 1, 0));
  for (Eigen::Index k = 0; k < n; ++k) {
    const double kk = static_cast<double>(k);
    diag(k) = 2.0 * kk + alpha + 1.0;
    if (k + 1 < n) sub(k) = std::sqrt((kk + 1.0) * (kk + 1.0 + alpha));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) throw NumericError("Golub-Welsch eigen-solver failed");

  QuadratureRule rule;
  rule.order = order;
  rule.alpha = alpha;
  rule.nodes.resize(static_cast<std::size_t>(n));
  rule.weights.resize(static_cast<std::size_t>(n));
  rule.normalized_weights.resize(static_cast<std::size_t>(n));
  const double mass = std::exp(std::lgamma(alpha + 1.0));
  for (Eigen::Index j = 0; j < n; ++j) {
    const double v0 = solver.eigenvectors()(0, j);
    const auto jj = static_cast<std::size_t>(j);
    rule.nodes[jj] = solver.eigenvalues()(j);
    rule.normalized_weights[jj] = v0 * v0;
    rule.weights[jj] = v0 * v0 * mass;
  }
  return rule;
}

QuadratureRule build_rule(int order, double r) {
  require_positive_r(r);
  if (order < 2) throw std::invalid_argument("quadrature order must be at least 2");
  return build_laguerre_rule(order, 1.0 / r - 1.0);
}

const QuadratureRule& cached_laguerre_rule(int order, double alpha) {
  static std::shared_mutex mutex;
  static std::map<std::pair<int, double>, std::unique_ptr<const QuadratureRule>> cache;
  const auto key = std::make_pair(order, alpha);
  {
    std::shared_lock lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return *it->second;
  }
  auto rule = std::make_unique<const QuadratureRule>(build_laguerre_rule(order, alpha));
  std::unique_lock lock(mutex);
  auto [it, inserted] = cache.try_emplace(key, std::move(rule));
  return *it->second;
}

double posterior_mean_rc_closed_form(const FrailtyPosteriorRC& p) {
  require_positive_r(p.r);
  const double a = 1.0 / p.r;
  return (a + (p.event ? 1.0 : 0.0)) / (a + p.cum_intensity);
}

double posterior_mean_rc(const FrailtyPosteriorRC& p, const QuadratureRule& rule) {
  require_positive_r(p.r);
  if (!(p.cum_intensity >= 0.0) || !std::isfinite(p.cum_intensity)) {
    throw std::invalid_argument("cumulative intensity must be finite and nonnegative");
  }
  const double a = 1.0 / p.r;
  require_alpha(rule, a - 1.0, "posterior_mean_rc");
  const double rate = a + p.cum_intensity;
  double num = 0.0;
  double den = 0.0;
  for (std::size_t j = 0; j < rule.nodes.size(); ++j) {
    const double z = rule.nodes[j] / rate;
    const double base = rule.normalized_weights[j] * (p.event ? z : 1.0);
    den += base;
    num += base * z;
  }
  if (!(den > 0.0)) throw NumericError("posterior_mean_rc: vanishing normalizer");
  return num / den;
}

double log_marginal_rc(const FrailtyPosteriorRC& p, const QuadratureRule& rule) {
  require_positive_r(p.r);
  const double a = 1.0 / p.r;
  require_alpha(rule, a - 1.0, "log_marginal_rc");
  const double rate = a + p.cum_intensity;
  double sum = 0.0;
  for (std::size_t j = 0; j < rule.nodes.size(); ++j) {
    sum += rule.normalized_weights[j] * (p.event ? rule.nodes[j] / rate : 1.0);
  }
  return a * (std::log(a) - std::log(rate)) + std::log(sum);
}

const QuadratureRule& cs_rule(int order, const FrailtyPosteriorCS& p) {
  require_positive_r(p.r);
  return cached_laguerre_rule(order, 1.0 / p.r - p.source_survival);
}

// With phi(x) = (1 - e^-x) / x the current-status factor is
// exp(-zAS)(zA phi(zA))^(1-S); the power z^(1-S) joins the Laguerre exponent.
CsMoments cs_moments(const FrailtyPosteriorCS& p, const QuadratureRule& rule) {
  require_positive_r(p.r);
  const double s = p.source_survival;
  const double big_a = p.cum_intensity;
  if (!(s > 0.0 && s < 1.0)) throw std::invalid_argument("source survival must lie in (0, 1)");
  if (!(big_a > 0.0) || !std::isfinite(big_a)) {
    std::ostringstream os;
    os << "current-status posterior needs finite A > 0, got " << big_a;
    throw NumericError(os.str());
  }
  const double a = 1.0 / p.r;
  const double alpha = a - s;
  require_alpha(rule, alpha, "cs_moments");
  const double rate = a + big_a * s;

  double den = 0.0;
  double num_z = 0.0;
  double num_w = 0.0;
  for (std::size_t j = 0; j < rule.nodes.size(); ++j) {
    const double z = rule.nodes[j] / rate;
    const double lp = log_phi(z * big_a);
    const double w = rule.normalized_weights[j];
    const double base = w * std::exp((1.0 - s) * lp);
    den += base;
    num_z += base * z;
    num_w += w * std::exp(-s * lp);
  }
  if (!(den > 0.0) || !std::isfinite(den)) {
    std::ostringstream os;
    os << "current-status posterior degenerate at A=" << big_a << ", S=" << s << ", r=" << p.r;
    throw NumericError(os.str());
  }
  CsMoments out;
  out.mean = num_z / den;
  out.poisson_bar = (1.0 - s) / big_a * num_w / den;
  out.log_marginal = a * std::log(a) - std::lgamma(a) + (1.0 - s) * std::log(big_a) +
                     std::lgamma(alpha + 1.0) - (alpha + 1.0) * std::log(rate) + std::log(den);
  return out;
}

double posterior_mean_cs(const FrailtyPosteriorCS& p, const QuadratureRule& rule) {
  return cs_moments(p, rule).mean;
}

double expected_poisson_bar(const FrailtyPosteriorCS& p, const QuadratureRule& rule) {
  return cs_moments(p, rule).poisson_bar;
}

CsMoments cs_moments_degenerate(double source_survival, double cum_intensity) {
  if (!(cum_intensity > 0.0) || !std::isfinite(cum_intensity)) {
    throw NumericError("current-status term needs finite A > 0");
  }
  const double s = source_survival;
  const double fail = -std::expm1(-cum_intensity);
  CsMoments out;
  out.mean = 1.0;
  out.poisson_bar = (1.0 - s) / fail;
  out.log_marginal = -cum_intensity * s + (1.0 - s) * std::log(fail);
  return out;
}

double frailty_log_likelihood(std::span<const Subject> subjects, const TargetModel& model,
                              int order) {
  const double r = model.transform.r;
  const QuadratureRule* rule = r > 0.0 ? &cached_laguerre_rule(order, 1.0 / r - 1.0) : nullptr;
  double total = 0.0;
  for (const auto& s : subjects) {
    const double a = cumulative_intensity(model.beta, model.intensity, s.covariates, s.time);
    if (s.event) {
      const double jump = model.intensity.jump_at(s.time);
      if (!(jump > 0.0)) return -std::numeric_limits<double>::infinity();
      total += std::log(jump) + s.covariates.value_at(s.time).dot(model.beta);
    }
    total += rule ? log_marginal_rc({s.event, a, r}, *rule) : -a;
  }
  return total;
}

}  // namespace potl
