#include "potl/tuning.hpp"

#include "potl/errors.hpp"
#include "potl/metrics.hpp"
#include "potl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace potl {
namespace {

constexpr int kMaxFoldAttempts = 10;

bool training_folds_have_events(std::span<const Subject> subjects, const std::vector<int>& fold, int folds) {
  std::vector<int> events(static_cast<std::size_t>(folds), 0);
  int total = 0;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (subjects[i].event) {
      ++events[static_cast<std::size_t>(fold[i])];
      ++total;
    }
  }
  return std::all_of(events.begin(), events.end(), [&](int e) { return total - e > 0; });
}

double fold_score(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo, bool aligned,
                  const std::vector<int>& fold, int k, const FitConfig& config) {
  std::vector<Subject> train;
  std::vector<PseudoSample> train_pseudo;
  ValidationSet held_out;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (fold[i] == k) {
      held_out.subjects.push_back(subjects[i]);
    } else {
      train.push_back(subjects[i]);
      if (aligned) train_pseudo.push_back(pseudo[i]);
    }
  }
  if (!aligned) train_pseudo.assign(pseudo.begin(), pseudo.end());

  const FitResult res = fit(train, train_pseudo, config);
  double tau = 0.0;
  for (const auto& s : train) tau = std::max(tau, s.time);
  const CensoringKM km = censoring_km(train);
  return integrated_brier(ModelPredictor(res.model), held_out, tau, &km);
}

}  // namespace

std::vector<int> assign_folds(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2 || static_cast<std::size_t>(folds) > n) {
    throw std::invalid_argument("folds must lie in [2, n]");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<int> fold(n);
  for (std::size_t pos = 0; pos < n; ++pos) fold[perm[pos]] = static_cast<int>(pos % static_cast<std::size_t>(folds));
  return fold;
}

CvResult cv_select_xi(std::span<const Subject> subjects, std::span<const PseudoSample> pseudo,
                      const TuneGrid& grid, const FitConfig& base) {
  if (grid.xi_values.empty()) throw std::invalid_argument("xi grid is empty");
  CvResult out;
  std::vector<int> fold;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxFoldAttempts) {
      throw DataError("cross-validation: a training fold has no events after 10 fold assignments");
    }
    fold = assign_folds(subjects.size(), grid.folds, substream_seed(grid.seed, static_cast<std::uint64_t>(attempt)));
    if (training_folds_have_events(subjects, fold, grid.folds)) {
      out.attempts = attempt + 1;
      break;
    }
  }
  const bool aligned = pseudo.size() == subjects.size();

  std::vector<double> xis = grid.xi_values;
  std::sort(xis.begin(), xis.end());
  xis.erase(std::unique(xis.begin(), xis.end()), xis.end());

  double best = std::numeric_limits<double>::infinity();
  out.best_xi = xis.front();
  for (double xi : xis) {
    FitConfig config = base;
    config.xi = xi;
    CvScore row{xi, 0.0, {}};
    for (int k = 0; k < grid.folds; ++k) {
      double s = std::numeric_limits<double>::infinity();
      try {
        s = fold_score(subjects, pseudo, aligned, fold, k, config);
      } catch (const std::runtime_error& e) {
        std::ostringstream os;
        os << "cv fit failed at xi=" << xi << ", fold " << k << ": " << e.what();
        out.warnings.push_back(os.str());
      }
      if (!std::isfinite(s)) s = std::numeric_limits<double>::infinity();
      row.fold_scores.push_back(s);
      row.score += s;
    }
    row.score /= grid.folds;
    if (row.score < best) {
      best = row.score;
      out.best_xi = xi;
    }
    out.table.push_back(std::move(row));
  }
  return out;
}

AicResult aic_select_r(std::span<const Subject> subjects, const TuneGrid& grid, const FitConfig& base) {
  if (grid.r_values.empty()) throw std::invalid_argument("r grid is empty");
  std::vector<double> rs = grid.r_values;
  std::sort(rs.begin(), rs.end());
  rs.erase(std::unique(rs.begin(), rs.end()), rs.end());

  AicResult out;
  double best = std::numeric_limits<double>::infinity();
  bool any = false;
  for (double r : rs) {
    FitConfig config = base;
    config.xi = 0.0;
    config.r = r;
    AicRow row{r, 0.0, std::numeric_limits<double>::infinity(), false};
    try {
      const FitResult res = fit(subjects, {}, config);
      row.converged = res.converged;
      row.log_likelihood = log_likelihood(subjects, res.model);
      const double k = static_cast<double>(res.model.beta.size()) + static_cast<double>(res.model.intensity.size());
      row.aic = -2.0 * row.log_likelihood + 2.0 * k;
      if (row.converged && row.aic < best) out.best_model = res.model;
    } catch (const std::runtime_error& e) {
      out.warnings.push_back("AIC fit failed at r=" + std::to_string(r) + ": " + e.what());
    }
    if (!row.converged) {
      out.warnings.push_back("AIC: r=" + std::to_string(r) + " excluded (not converged)");
    } else if (row.aic < best) {
      best = row.aic;
      out.best_r = r;
      any = true;
    }
    out.table.push_back(row);
  }
  if (!any) throw NumericError("AIC selection: no r converged");
  return out;
}

}  // namespace potl
