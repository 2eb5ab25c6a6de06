#include "potl/em_fitter.hpp"

#include "potl/errors.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace potl {
namespace {

constexpr double kEventJumpFloor = 1e-300;
constexpr double kAscentSlack = 1e-10;
constexpr double kRidge = 1e-8;
constexpr int kMaxHalvings = 40;

int compare_paths(const CovariatePath& a, const CovariatePath& b) {
  const auto& ba = a.breakpoints();
  const auto& bb = b.breakpoints();
  if (ba.size() != bb.size()) return ba.size() < bb.size() ? -1 : 1;
  for (std::size_t k = 0; k < ba.size(); ++k) {
    if (ba[k] != bb[k]) return ba[k] < bb[k] ? -1 : 1;
  }
  const auto& va = a.values();
  const auto& vb = b.values();
  for (Eigen::Index k = 0; k < va.size(); ++k) {
    const double x = va.data()[k];
    const double y = vb.data()[k];
    if (x != y) return x < y ? -1 : 1;
  }
  return 0;
}

bool subject_less(const Subject& a, const Subject& b) {
  if (a.time != b.time) return a.time < b.time;
  if (a.event != b.event) return a.event < b.event;
  return compare_paths(a.covariates, b.covariates) < 0;
}

bool pseudo_less(const PseudoSample& a, const PseudoSample& b) {
  if (a.time != b.time) return a.time < b.time;
  if (a.source_survival != b.source_survival) return a.source_survival < b.source_survival;
  if (a.weight != b.weight) return a.weight < b.weight;
  return compare_paths(a.covariates, b.covariates) < 0;
}

void add_warning(std::vector<std::string>* warnings, std::string message) {
  if (warnings && std::find(warnings->begin(), warnings->end(), message) == warnings->end()) {
    warnings->push_back(std::move(message));
  }
}

std::size_t lower_index(const std::vector<double>& grid, double t) {
  return static_cast<std::size_t>(std::lower_bound(grid.begin(), grid.end(), t) - grid.begin());
}

std::size_t upper_index(const std::vector<double>& grid, double t) {
  return static_cast<std::size_t>(std::upper_bound(grid.begin(), grid.end(), t) - grid.begin());
}

}  // namespace

Grid build_grid(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo) {
  Grid grid;
  grid.times.reserve(subjects.size() + pseudo.size());
  for (const auto& s : subjects) grid.times.push_back(s.time);
  for (const auto& p : pseudo) grid.times.push_back(p.time);
  std::sort(grid.times.begin(), grid.times.end());
  grid.times.erase(std::unique(grid.times.begin(), grid.times.end()), grid.times.end());
  grid.event_counts.assign(grid.times.size(), 0);
  for (const auto& s : subjects) {
    if (s.event) ++grid.event_counts[lower_index(grid.times, s.time)];
  }
  return grid;
}

EmProblem::EmProblem(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo,
                     FitConfig config)
    : config_(config) {
  if (subjects.empty()) throw DataError("fit needs at least one subject");
  if (!(config_.xi >= 0.0) || !std::isfinite(config_.xi)) throw std::invalid_argument("xi must be nonnegative");
  if (!(config_.r >= 0.0) || !std::isfinite(config_.r)) throw std::invalid_argument("r must be nonnegative");
  if (!(config_.tol > 0.0)) throw std::invalid_argument("tol must be positive");
  if (config_.max_iter < 1) throw std::invalid_argument("max_iter must be at least 1");
  if (config_.quad_order < 2) throw std::invalid_argument("quad_order must be at least 2");
  r_ = config_.r < kDegenerateFrailtyR ? 0.0 : config_.r;

  p_ = subjects.front().covariates.dim();
  for (const auto& s : subjects) {
    validate(s);
    if (s.covariates.dim() != p_) throw DataError("subjects have differing covariate dimensions");
  }
  subjects_.assign(subjects.begin(), subjects.end());
  std::stable_sort(subjects_.begin(), subjects_.end(), subject_less);

  if (config_.xi > 0.0) {
    for (const auto& p : pseudo) {
      if (p.covariates.dim() != p_) throw DataError("pseudo sample covariate dimension mismatch");
      if (!(p.time > 0.0)) throw DataError("pseudo sample time must be positive");
      if (!(p.source_survival > 0.0 && p.source_survival < 1.0)) {
        throw DataError("pseudo sample source survival must lie in (0, 1)");
      }
    }
    pseudo_.assign(pseudo.begin(), pseudo.end());
    std::stable_sort(pseudo_.begin(), pseudo_.end(), pseudo_less);
  }

  grid_ = build_grid(subjects_, pseudo_);

  std::vector<const CovariatePath*> paths;
  std::vector<double> ends;
  for (const auto& s : subjects_) {
    paths.push_back(&s.covariates);
    ends.push_back(s.time);
  }
  subject_block_ = index_paths(paths, ends);

  const auto n = static_cast<Eigen::Index>(subjects_.size());
  event_index_.resize(subjects_.size());
  event_covariates_.resize(n, p_);
  event_covariate_sum_ = Eigen::VectorXd::Zero(p_);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = subjects_[static_cast<std::size_t>(i)];
    event_index_[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(lower_index(grid_.times, s.time));
    event_covariates_.row(i) = s.covariates.value_at(s.time).transpose();
    if (s.event) event_covariate_sum_ += event_covariates_.row(i).transpose();
  }
  event_covariate_sum_ /= static_cast<double>(n);

  paths.clear();
  ends.clear();
  for (const auto& p : pseudo_) {
    paths.push_back(&p.covariates);
    ends.push_back(p.time);
  }
  pseudo_block_ = index_paths(paths, ends);
  if (r_ > 0.0) {
    for (const auto& p : pseudo_) {
      pseudo_rules_.push_back(&cs_rule(config_.quad_order, {p.source_survival, 1.0, r_}));
    }
  }
}

EmProblem::Block EmProblem::index_paths(const std::vector<const CovariatePath*>& paths,
                                        const std::vector<double>& ends) const {
  Block block;
  Eigen::Index rows = 0;
  for (const auto* path : paths) rows += static_cast<Eigen::Index>(path->segments());
  block.values.resize(rows, p_);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto& bps = paths[i]->breakpoints();
    const std::size_t upto = upper_index(grid_.times, ends[i]);
    for (std::size_t k = 0; k < bps.size(); ++k, ++row) {
      block.values.row(row) = paths[i]->values().row(static_cast<Eigen::Index>(k));
      const std::size_t lo = lower_index(grid_.times, bps[k]);
      const std::size_t hi = k + 1 < bps.size() ? std::min(upto, lower_index(grid_.times, bps[k + 1])) : upto;
      if (hi > lo) {
        block.ranges.push_back({static_cast<std::uint32_t>(lo), static_cast<std::uint32_t>(hi),
                                static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(row)});
      }
    }
  }
  return block;
}

Eigen::VectorXd EmProblem::exp_eta(const Block& block, const Eigen::VectorXd& beta) {
  if (block.values.cols() == 0) return Eigen::VectorXd::Ones(block.values.rows());
  return (block.values * beta).array().exp().matrix();
}

TargetModel EmProblem::initial_model() const {
  const double start = 1.0 / static_cast<double>(grid_.times.size());
  return make_model(Eigen::VectorXd::Zero(p_), std::vector<double>(grid_.times.size(), start));
}

TargetModel EmProblem::make_model(Eigen::VectorXd beta, std::vector<double> jumps) const {
  return TargetModel{std::move(beta), StepIntensity(grid_.times, std::move(jumps)), TransformationSpec{r_}};
}

EmWorkspace EmProblem::e_step(const TargetModel& model) const {
  const std::size_t big_l = grid_.times.size();
  if (model.intensity.size() != big_l || model.beta.size() != p_) {
    throw std::invalid_argument("e_step: model does not live on the problem grid");
  }
  const auto& beta = model.beta;
  const auto& jumps = model.intensity.jumps();
  const auto& cum = model.intensity.cumulative();
  const TransformationSpec& transform = model.transform;
  const double n = static_cast<double>(subjects_.size());

  EmWorkspace ws;

  std::vector<double> big_a(subjects_.size(), 0.0);
  const Eigen::VectorXd e_subject = exp_eta(subject_block_, beta);
  for (const auto& rg : subject_block_.ranges) big_a[rg.owner] += e_subject(rg.row) * (cum[rg.hi] - cum[rg.lo]);

  double loglik = 0.0;
  ws.ez.resize(subjects_.size());
  for (std::size_t i = 0; i < subjects_.size(); ++i) {
    const auto& s = subjects_[i];
    loglik -= transform.G(big_a[i]);
    if (s.event) {
      const double jump = jumps[event_index_[i]];
      if (jump > 0.0) {
        loglik += std::log(jump) + event_covariates_.row(static_cast<Eigen::Index>(i)).dot(beta) +
                  transform.log_G_prime(big_a[i]);
      } else {
        loglik = -std::numeric_limits<double>::infinity();
      }
    }
    ws.ez[i] = r_ > 0.0 ? (1.0 / r_ + (s.event ? 1.0 : 0.0)) / (1.0 / r_ + big_a[i]) : 1.0;
  }

  ws.numerators.assign(big_l, 0.0);
  for (std::size_t l = 0; l < big_l; ++l) ws.numerators[l] = grid_.event_counts[l] / n;
  ws.covariate_mass = event_covariate_sum_;

  double penalty = 0.0;
  if (penalized()) {
    const double m = static_cast<double>(pseudo_.size());
    const double scale = config_.xi / m;
    std::vector<double> a_tilde(pseudo_.size(), 0.0);
    const Eigen::VectorXd e_pseudo = exp_eta(pseudo_block_, beta);
    for (const auto& rg : pseudo_block_.ranges) a_tilde[rg.owner] += e_pseudo(rg.row) * (cum[rg.hi] - cum[rg.lo]);

    ws.ez_tilde.assign(pseudo_.size(), 0.0);
    ws.ew_factor.assign(pseudo_.size(), 0.0);
    ws.pseudo_active.assign(pseudo_.size(), 0);
    for (std::size_t j = 0; j < pseudo_.size(); ++j) {
      const auto& ps = pseudo_[j];
      const double a = a_tilde[j];
      if (!(a > 0.0) || !std::isfinite(a)) {
        ++ws.dropped_pseudo;
        const double s = std::clamp(std::exp(-transform.G(a)), kModelClamp, 1.0 - kModelClamp);
        penalty += ps.weight * (ps.source_survival * std::log(s) + (1.0 - ps.source_survival) * std::log1p(-s));
        continue;
      }
      const CsMoments mom = r_ > 0.0 ? cs_moments({ps.source_survival, a, r_}, *pseudo_rules_[j])
                                     : cs_moments_degenerate(ps.source_survival, a);
      ws.pseudo_active[j] = 1;
      ws.ez_tilde[j] = mom.mean;
      ws.ew_factor[j] = mom.poisson_bar;
      if (config_.monitor_cross_entropy) {
        const double s = std::clamp(std::exp(-transform.G(a)), kModelClamp, 1.0 - kModelClamp);
        penalty += ps.weight * (ps.source_survival * std::log(s) + (1.0 - ps.source_survival) * std::log1p(-s));
      } else {
        penalty += ps.weight * mom.log_marginal;
      }
    }

    // E(W-bar_il) = ew_factor_i lambda_l exp(beta' X~_il), summed over atoms at risk.
    std::vector<double> diff(big_l, 0.0);
    for (const auto& rg : pseudo_block_.ranges) {
      if (!ws.pseudo_active[rg.owner]) continue;
      const double v = scale * pseudo_[rg.owner].weight * ws.ew_factor[rg.owner] * e_pseudo(rg.row);
      diff[rg.hi - 1] += v;
      if (rg.lo > 0) diff[rg.lo - 1] -= v;
      ws.covariate_mass += (v * (cum[rg.hi] - cum[rg.lo])) * pseudo_block_.values.row(rg.row).transpose();
    }
    double run = 0.0;
    for (std::size_t l = big_l; l-- > 0;) {
      run += diff[l];
      ws.numerators[l] += run * jumps[l];
    }
    penalty /= m;
  }
  ws.objective = loglik / n + config_.xi * penalty;
  return ws;
}

void EmProblem::accumulate(const Block& block, const std::vector<double>& unit_weights,
                           const Eigen::VectorXd& beta, RiskSums& sums, bool second_order) const {
  const Eigen::VectorXd e = exp_eta(block, beta);
  for (const auto& rg : block.ranges) {
    const double v = unit_weights[rg.owner] * e(rg.row);
    if (v == 0.0) continue;
    const auto x = block.values.row(rg.row);
    const Eigen::Index top = rg.hi - 1;
    sums.s0[top] += v;
    sums.s1.row(top) += v * x;
    if (second_order) {
      for (Eigen::Index a = 0; a < p_; ++a) sums.s2.row(top).segment(a * p_, p_) += (v * x(a)) * x;
    }
    if (rg.lo > 0) {
      const Eigen::Index below = rg.lo - 1;
      sums.s0[below] -= v;
      sums.s1.row(below) -= v * x;
      if (second_order) {
        for (Eigen::Index a = 0; a < p_; ++a) sums.s2.row(below).segment(a * p_, p_) -= (v * x(a)) * x;
      }
    }
  }
}

RiskSums EmProblem::risk_sums(const EmWorkspace& ws, const Eigen::VectorXd& beta, bool second_order) const {
  const auto big_l = static_cast<Eigen::Index>(grid_.times.size());
  RiskSums sums;
  sums.s0.assign(grid_.times.size(), 0.0);
  sums.s1 = RowMatrix::Zero(big_l, p_);
  if (second_order) sums.s2 = RowMatrix::Zero(big_l, p_ * p_);

  const double n = static_cast<double>(subjects_.size());
  std::vector<double> w(subjects_.size());
  for (std::size_t i = 0; i < subjects_.size(); ++i) w[i] = ws.ez[i] / n;
  accumulate(subject_block_, w, beta, sums, second_order);

  if (penalized()) {
    const double scale = config_.xi / static_cast<double>(pseudo_.size());
    w.assign(pseudo_.size(), 0.0);
    for (std::size_t j = 0; j < pseudo_.size(); ++j) {
      if (ws.pseudo_active[j]) w[j] = scale * pseudo_[j].weight * ws.ez_tilde[j];
    }
    accumulate(pseudo_block_, w, beta, sums, second_order);
  }

  for (Eigen::Index l = big_l - 1; l-- > 0;) {
    sums.s0[static_cast<std::size_t>(l)] += sums.s0[static_cast<std::size_t>(l + 1)];
    sums.s1.row(l) += sums.s1.row(l + 1);
    if (second_order) sums.s2.row(l) += sums.s2.row(l + 1);
  }
  return sums;
}

std::vector<double> EmProblem::update_lambda(const EmWorkspace& ws) const {
  std::vector<double> jumps(grid_.times.size(), 0.0);
  for (std::size_t l = 0; l < jumps.size(); ++l) {
    const double num = ws.numerators[l];
    if (!(num > 0.0)) continue;
    const double s0 = ws.risk.s0[l];
    if (!(s0 > 0.0)) {
      std::ostringstream os;
      os << "singular risk set at t=" << grid_.times[l] << " (s0=" << s0 << ")";
      throw NumericError(os.str());
    }
    jumps[l] = num / s0;
    if (grid_.event_counts[l] > 0) jumps[l] = std::max(jumps[l], kEventJumpFloor);
  }
  return jumps;
}

Eigen::VectorXd EmProblem::score(const EmWorkspace& ws, const Eigen::VectorXd& beta) const {
  const RiskSums sums = risk_sums(ws, beta, false);
  Eigen::VectorXd u = ws.covariate_mass;
  for (std::size_t l = 0; l < grid_.times.size(); ++l) {
    const double num = ws.numerators[l];
    if (num > 0.0) u -= (num / sums.s0[l]) * sums.s1.row(static_cast<Eigen::Index>(l)).transpose();
  }
  return u;
}

Eigen::MatrixXd EmProblem::information(const EmWorkspace& ws, const Eigen::VectorXd& beta) const {
  const RiskSums sums = risk_sums(ws, beta, true);
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(p_, p_);
  for (std::size_t l = 0; l < grid_.times.size(); ++l) {
    const double num = ws.numerators[l];
    if (!(num > 0.0)) continue;
    const auto li = static_cast<Eigen::Index>(l);
    const double s0 = sums.s0[l];
    const Eigen::VectorXd mean = sums.s1.row(li).transpose() / s0;
    const Eigen::Map<const RowMatrix> s2(sums.s2.row(li).data(), p_, p_);
    info += num * (s2 / s0 - mean * mean.transpose());
  }
  return info;
}

double EmProblem::profile_q(const EmWorkspace& ws, const Eigen::VectorXd& beta) const {
  const RiskSums sums = risk_sums(ws, beta, false);
  double q = beta.dot(ws.covariate_mass);
  for (std::size_t l = 0; l < grid_.times.size(); ++l) {
    const double num = ws.numerators[l];
    if (num > 0.0) q -= num * std::log(sums.s0[l]);
  }
  return q;
}

Eigen::VectorXd EmProblem::update_beta(const EmWorkspace& ws, const Eigen::VectorXd& beta,
                                       std::vector<std::string>* warnings) const {
  if (p_ == 0) return beta;
  const Eigen::VectorXd u = score(ws, beta);
  if (!u.allFinite()) throw NumericError("NaN in M-step score");
  Eigen::MatrixXd info = information(ws, beta);
  Eigen::LLT<Eigen::MatrixXd> llt(info);
  if (llt.info() != Eigen::Success) {
    add_warning(warnings, "singular information matrix; ridge-regularized");
    info += kRidge * Eigen::MatrixXd::Identity(p_, p_);
    llt.compute(info);
    if (llt.info() != Eigen::Success) throw NumericError("information matrix is not positive definite");
  }
  Eigen::VectorXd step = llt.solve(u);
  if (!step.allFinite()) throw NumericError("non-finite Newton step");
  if (step.squaredNorm() == 0.0) return beta;

  const double q0 = profile_q(ws, beta);
  const double slack = 1e-13 * std::max(1.0, std::abs(q0));
  for (int h = 0; h <= kMaxHalvings; ++h) {
    const Eigen::VectorXd trial = beta + step;
    const double q = profile_q(ws, trial);
    if (std::isfinite(q) && q >= q0 - slack) {
      if (h > 0) add_warning(warnings, "Newton step halved to keep the M-step ascending");
      return trial;
    }
    step *= 0.5;
  }
  return beta;
}

double EmProblem::objective(const TargetModel& model) const { return e_step(model).objective; }

FitResult EmProblem::fit() const {
  FitResult result;
  if (config_.r > 0.0 && r_ == 0.0) {
    add_warning(&result.warnings, "r below 0.01 replaced by the Cox limit r = 0");
  }
  TargetModel model = initial_model();
  EmWorkspace ws = e_step(model);
  result.objective_trace.push_back(ws.objective);

  for (int iter = 1; iter <= config_.max_iter; ++iter) {
    if (ws.dropped_pseudo > 0) {
      add_warning(&result.warnings, "pseudo samples with zero cumulative intensity dropped from an E-step");
    }
    Eigen::VectorXd beta = update_beta(ws, model.beta, &result.warnings);
    compute_risk_sums(ws, beta, false);
    std::vector<double> jumps = update_lambda(ws);

    double change = (beta - model.beta).norm();
    double max_jump_change = 0.0;
    const auto& old_jumps = model.intensity.jumps();
    for (std::size_t l = 0; l < jumps.size(); ++l) {
      max_jump_change = std::max(max_jump_change, std::abs(jumps[l] - old_jumps[l]));
    }
    change += max_jump_change;

    model = make_model(std::move(beta), std::move(jumps));
    ws = e_step(model);
    const double previous = result.objective_trace.back();
    if (std::isfinite(previous) &&
        !(ws.objective >= previous - kAscentSlack * std::abs(previous))) {
      std::ostringstream os;
      os.precision(17);
      os << "EM ascent violated at iteration " << iter << ": " << previous << " -> " << ws.objective;
      throw NumericError(os.str());
    }
    result.objective_trace.push_back(ws.objective);
    result.iterations = iter;
    if (change < config_.tol) {
      result.converged = true;
      break;
    }
  }
  if (!result.converged) add_warning(&result.warnings, "EM reached max_iter without converging");
  result.model = std::move(model);
  return result;
}

FitResult fit(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo,
              const FitConfig& config) {
  return EmProblem(subjects, pseudo, config).fit();
}

}  // namespace potl
