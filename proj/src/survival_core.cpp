#include "potl/survival_core.hpp"

#include "potl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace potl {

CovariatePath::CovariatePath(const Eigen::VectorXd& fixed)
    : breakpoints_{0.0}, values_(fixed.transpose()) {}

CovariatePath::CovariatePath(std::vector<double> breakpoints, RowMatrix values)
    : breakpoints_(std::move(breakpoints)), values_(std::move(values)) {
  if (breakpoints_.empty() || breakpoints_.front() != 0.0) {
    throw DataError("covariate path must start at time 0");
  }
  if (static_cast<Eigen::Index>(breakpoints_.size()) != values_.rows()) {
    throw DataError("covariate path needs one value row per segment");
  }
  for (std::size_t k = 1; k < breakpoints_.size(); ++k) {
    if (!(breakpoints_[k] > breakpoints_[k - 1])) {
      throw DataError("covariate path breakpoints must be strictly increasing");
    }
  }
}

std::size_t CovariatePath::segment_at(double t) const {
  auto it = std::upper_bound(breakpoints_.begin(), breakpoints_.end(), t);
  return it == breakpoints_.begin() ? 0 : static_cast<std::size_t>(it - breakpoints_.begin()) - 1;
}

Eigen::VectorXd CovariatePath::value_at(double t) const {
  return values_.row(static_cast<Eigen::Index>(segment_at(t))).transpose();
}

void validate(const Subject& subject) {
  if (!(subject.time > 0.0) || !std::isfinite(subject.time)) {
    std::ostringstream os;
    os << "subject time must be positive and finite, got " << subject.time;
    throw DataError(os.str());
  }
  if (!subject.covariates.values().allFinite()) {
    throw DataError("subject covariates must be finite");
  }
}

StepIntensity::StepIntensity(std::vector<double> times, std::vector<double> jumps)
    : times_(std::move(times)), jumps_(std::move(jumps)) {
  if (times_.size() != jumps_.size()) {
    throw DataError("intensity needs one jump per time");
  }
  for (std::size_t l = 0; l < times_.size(); ++l) {
    if (!(times_[l] > 0.0) || (l > 0 && !(times_[l] > times_[l - 1]))) {
      throw DataError("intensity times must be positive and strictly increasing");
    }
    if (!(jumps_[l] >= 0.0) || !std::isfinite(jumps_[l])) {
      throw DataError("intensity jumps must be finite and nonnegative");
    }
  }
  cumulative_.assign(times_.size() + 1, 0.0);
  for (std::size_t l = 0; l < times_.size(); ++l) cumulative_[l + 1] = cumulative_[l] + jumps_[l];
}

std::size_t StepIntensity::count_upto(double t) const {
  return static_cast<std::size_t>(std::upper_bound(times_.begin(), times_.end(), t) - times_.begin());
}

double StepIntensity::at(double t) const { return cumulative_[count_upto(t)]; }

double StepIntensity::jump_at(double t) const {
  auto it = std::lower_bound(times_.begin(), times_.end(), t);
  if (it == times_.end() || *it != t) return 0.0;
  return jumps_[static_cast<std::size_t>(it - times_.begin())];
}

double TransformationSpec::G(double x) const { return transform_G(x, r); }

double TransformationSpec::log_G_prime(double x) const {
  return r == 0.0 ? 0.0 : -std::log1p(r * x);
}

double clamp_source_survival(double s) {
  if (!(s >= 0.0 && s <= 1.0)) {
    std::ostringstream os;
    os << "source survival must lie in [0, 1], got " << s;
    throw DataError(os.str());
  }
  return std::clamp(s, kSourceClamp, 1.0 - kSourceClamp);
}

PseudoSample make_pseudo_sample(double time, CovariatePath covariates, double weight,
                                double source_survival) {
  if (!(time > 0.0)) throw DataError("pseudo sample time must be positive");
  if (!(weight >= 0.0) || !std::isfinite(weight)) throw DataError("pseudo sample weight must be nonnegative");
  return PseudoSample{time, std::move(covariates), weight, clamp_source_survival(source_survival)};
}

double transform_G(double x, double r) {
  if (x < 0.0 || r < 0.0 || std::isnan(x) || std::isnan(r)) {
    throw std::domain_error("transform_G requires x >= 0 and r >= 0");
  }
  return r == 0.0 ? x : std::log1p(r * x) / r;
}

double cumulative_intensity(const Eigen::VectorXd& beta, const StepIntensity& intensity,
                            const CovariatePath& path, double t) {
  if (beta.size() != path.dim()) {
    throw std::invalid_argument("beta dimension does not match covariate path dimension");
  }
  if (t < 0.0) throw std::domain_error("cumulative_intensity requires t >= 0");
  const auto& times = intensity.times();
  const auto& cum = intensity.cumulative();
  const std::size_t upto = intensity.count_upto(t);
  const auto& bps = path.breakpoints();
  double total = 0.0;
  std::size_t lo = 0;
  for (std::size_t k = 0; k < bps.size() && lo < upto; ++k) {
    std::size_t hi = upto;
    if (k + 1 < bps.size()) {
      hi = std::min<std::size_t>(
          upto, static_cast<std::size_t>(std::lower_bound(times.begin(), times.end(), bps[k + 1]) -
                                         times.begin()));
    }
    if (hi > lo) {
      const double eta = path.values().row(static_cast<Eigen::Index>(k)).dot(beta.transpose());
      total += std::exp(eta) * (cum[hi] - cum[lo]);
      lo = hi;
    }
  }
  return total;
}

double survival(const TargetModel& model, const CovariatePath& path, double t) {
  const double a = cumulative_intensity(model.beta, model.intensity, path, t);
  return std::exp(-model.transform.G(a));
}

double log_likelihood(std::span<const Subject> subjects, const TargetModel& model) {
  double total = 0.0;
  for (const auto& s : subjects) {
    const double a = cumulative_intensity(model.beta, model.intensity, s.covariates, s.time);
    total -= model.transform.G(a);
    if (s.event) {
      const double jump = model.intensity.jump_at(s.time);
      if (!(jump > 0.0)) return -std::numeric_limits<double>::infinity();
      total += std::log(jump) + s.covariates.value_at(s.time).dot(model.beta) +
               model.transform.log_G_prime(a);
    }
  }
  return total;
}

double penalty_psi(std::span<const PseudoSample> pseudo, const TargetModel& model) {
  if (pseudo.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : pseudo) {
    const double s = std::clamp(survival(model, p.covariates, p.time), kModelClamp, 1.0 - kModelClamp);
    total += p.weight * (p.source_survival * std::log(s) + (1.0 - p.source_survival) * std::log1p(-s));
  }
  return total / static_cast<double>(pseudo.size());
}

}  // namespace potl
