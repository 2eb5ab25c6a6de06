#include "potl/metrics.hpp"

#include "potl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace potl {
namespace {

double trapezoid(std::span<const double> f, double h) {
  if (f.size() < 2) return 0.0;
  double sum = 0.5 * (f.front() + f.back());
  for (std::size_t k = 1; k + 1 < f.size(); ++k) sum += f[k];
  return sum * h;
}

// Fenwick tree over risk ranks.
class RankCounter {
 public:
  explicit RankCounter(std::size_t n) : tree_(n + 1, 0.0) {}
  void add(std::size_t rank) {
    for (std::size_t i = rank + 1; i < tree_.size(); i += i & (~i + 1)) tree_[i] += 1.0;
  }
  // Number of inserted ranks < rank.
  [[nodiscard]] double below(std::size_t rank) const {
    double s = 0.0;
    for (std::size_t i = rank; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<double> tree_;
};

struct Needs {
  bool oracle = false;
  bool c_index = false;
  bool ibs = false;
  bool rmst = false;
};

MetricSet compute(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                  const CensoringKM* censoring, Needs needs) {
  if (val.subjects.empty()) throw DataError("validation set is empty");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (needs.oracle && !val.oracle) throw DataError("metric needs the true survival oracle");

  const CensoringKM own = censoring ? CensoringKM() : censoring_km(val.subjects);
  const CensoringKM& km = censoring ? *censoring : own;
  MetricSet out;
  auto divisor = [&](double h) {
    if (h < kCensoringFloor) {
      out.censoring_floor_hit = true;
      return kCensoringFloor;
    }
    return h;
  };

  const std::vector<double> grid = time_grid(tau);
  const std::size_t g = grid.size();
  const double h = tau / static_cast<double>(g - 1);
  const std::size_t n = val.subjects.size();

  std::vector<double> curve(g);
  std::vector<double> truth(g);
  std::vector<double> sq(g);
  std::vector<double> brier(g, 0.0);
  std::vector<double> risk(n);
  std::vector<double> h_grid(g);
  for (std::size_t k = 0; k < g; ++k) h_grid[k] = divisor(km.at(grid[k]));

  double l2_sum = 0.0;
  double dtau_sum = 0.0;
  double rmst_num = 0.0;
  double rmst_den = 0.0;
  const FunctionPredictor oracle(val.oracle ? val.oracle : SurvivalFunction{});

  for (std::size_t i = 0; i < n; ++i) {
    const Subject& s = val.subjects[i];
    fitted.curve(s.covariates, grid, curve);
    risk[i] = 1.0 - curve.back();
    if (needs.oracle) {
      oracle.curve(s.covariates, grid, truth);
      for (std::size_t k = 0; k < g; ++k) sq[k] = (curve[k] - truth[k]) * (curve[k] - truth[k]);
      l2_sum += std::sqrt(trapezoid(sq, h));
      dtau_sum += std::abs(curve.back() - truth.back());
    }
    const double w_event = s.event ? 1.0 / divisor(km.before(s.time)) : 0.0;
    if (needs.ibs) {
      for (std::size_t k = 0; k < g; ++k) {
        if (s.time <= grid[k]) {
          brier[k] += w_event * curve[k] * curve[k];
        } else {
          brier[k] += (1.0 - curve[k]) * (1.0 - curve[k]) / h_grid[k];
        }
      }
    }
    if (needs.rmst && s.event) {
      rmst_num += w_event * std::abs(std::min(s.time, tau) - trapezoid(curve, h));
      rmst_den += w_event;
    }
  }

  const double nd = static_cast<double>(n);
  out.l2d = needs.oracle ? l2_sum / nd : std::numeric_limits<double>::quiet_NaN();
  out.d_tau = needs.oracle ? dtau_sum / nd : std::numeric_limits<double>::quiet_NaN();
  if (needs.ibs) {
    for (auto& b : brier) b /= nd;
    out.ibs = trapezoid(brier, h) / tau;
  }
  if (needs.rmst) {
    if (!(rmst_den > 0.0)) throw DataError("RMST error undefined: no events");
    out.rmst = rmst_num / rmst_den;
  }

  if (needs.c_index) {
    std::vector<double> ranks_sorted(risk);
    std::sort(ranks_sorted.begin(), ranks_sorted.end());
    ranks_sorted.erase(std::unique(ranks_sorted.begin(), ranks_sorted.end()), ranks_sorted.end());
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
      rank[i] = static_cast<std::size_t>(std::lower_bound(ranks_sorted.begin(), ranks_sorted.end(), risk[i]) -
                                         ranks_sorted.begin());
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return val.subjects[a].time > val.subjects[b].time;
    });
    RankCounter counter(ranks_sorted.size());
    double inserted = 0.0;
    double num = 0.0;
    double den = 0.0;
    for (std::size_t start = 0; start < n;) {
      std::size_t stop = start;
      const double t = val.subjects[order[start]].time;
      while (stop < n && val.subjects[order[stop]].time == t) ++stop;
      for (std::size_t q = start; q < stop; ++q) {
        const std::size_t i = order[q];
        const Subject& s = val.subjects[i];
        if (!s.event || !(s.time < tau) || inserted == 0.0) continue;
        const double hw = divisor(km.before(s.time));
        const double w = 1.0 / (hw * hw);
        const double less = counter.below(rank[i]);
        const double equal = counter.below(rank[i] + 1) - less;
        num += w * (less + 0.5 * equal);
        den += w * inserted;
      }
      for (std::size_t q = start; q < stop; ++q) counter.add(rank[order[q]]);
      inserted += static_cast<double>(stop - start);
      start = stop;
    }
    if (!(den > 0.0)) throw DataError("C-index undefined: no comparable pairs");
    out.c_index = num / den;
  }
  return out;
}

}  // namespace

CensoringKM::CensoringKM(std::vector<double> times, std::vector<double> values)
    : times_(std::move(times)), values_(std::move(values)) {}

double CensoringKM::at(double t) const {
  auto it = std::upper_bound(times_.begin(), times_.end(), t);
  return it == times_.begin() ? 1.0 : values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

double CensoringKM::before(double t) const {
  auto it = std::lower_bound(times_.begin(), times_.end(), t);
  return it == times_.begin() ? 1.0 : values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

CensoringKM censoring_km(std::span<const Subject> subjects) {
  if (subjects.empty()) throw DataError("censoring KM needs at least one subject");
  std::vector<std::pair<double, bool>> obs;
  obs.reserve(subjects.size());
  for (const auto& s : subjects) obs.emplace_back(s.time, s.event);
  std::sort(obs.begin(), obs.end());

  std::vector<double> times;
  std::vector<double> values;
  double surv = 1.0;
  std::size_t at_risk = obs.size();
  for (std::size_t start = 0; start < obs.size();) {
    std::size_t stop = start;
    std::size_t events = 0;
    std::size_t censored = 0;
    while (stop < obs.size() && obs[stop].first == obs[start].first) {
      (obs[stop].second ? events : censored) += 1;
      ++stop;
    }
    const std::size_t exposed = at_risk - events;
    if (censored > 0) {
      surv *= 1.0 - static_cast<double>(censored) / static_cast<double>(exposed);
      times.push_back(obs[start].first);
      values.push_back(surv);
    }
    at_risk -= stop - start;
    start = stop;
  }
  return CensoringKM(std::move(times), std::move(values));
}

void ModelPredictor::curve(const CovariatePath& path, std::span<const double> times, std::span<double> out) const {
  const auto& jt = model_.intensity.times();
  const auto& cum = model_.intensity.cumulative();
  if (path.time_fixed()) {
    const double scale = std::exp(path.values().row(0).dot(model_.beta.transpose()));
    std::size_t l = 0;
    for (std::size_t k = 0; k < times.size(); ++k) {
      while (l < jt.size() && jt[l] <= times[k]) ++l;
      out[k] = std::exp(-model_.transform.G(scale * cum[l]));
    }
    return;
  }
  for (std::size_t k = 0; k < times.size(); ++k) out[k] = survival(model_, path, times[k]);
}

void FunctionPredictor::curve(const CovariatePath& path, std::span<const double> times, std::span<double> out) const {
  for (std::size_t k = 0; k < times.size(); ++k) out[k] = fn_(times[k], path);
}

std::vector<double> time_grid(double tau) {
  std::vector<double> grid(kTimeGridPoints);
  for (int k = 0; k < kTimeGridPoints; ++k) grid[static_cast<std::size_t>(k)] = tau * k / (kTimeGridPoints - 1);
  grid.back() = tau;
  return grid;
}

double l2_distance(const SurvivalPredictor& fitted, const ValidationSet& val, double tau) {
  return compute(fitted, val, tau, nullptr, {.oracle = true}).l2d;
}

double d_tau(const SurvivalPredictor& fitted, const ValidationSet& val, double tau) {
  return compute(fitted, val, tau, nullptr, {.oracle = true}).d_tau;
}

double uno_c_index(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                   const CensoringKM* censoring) {
  return compute(fitted, val, tau, censoring, {.c_index = true}).c_index;
}

double integrated_brier(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                        const CensoringKM* censoring) {
  return compute(fitted, val, tau, censoring, {.ibs = true}).ibs;
}

double rmst_error(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                  const CensoringKM* censoring) {
  return compute(fitted, val, tau, censoring, {.rmst = true}).rmst;
}

MetricSet evaluate_metrics(const SurvivalPredictor& fitted, const ValidationSet& val, double tau,
                           const CensoringKM* censoring) {
  return compute(fitted, val, tau, censoring,
                 {.oracle = static_cast<bool>(val.oracle), .c_index = true, .ibs = true, .rmst = true});
}

}  // namespace potl
