#include "fixtures.hpp"
#include "oracles.hpp"

#include "potl/errors.hpp"
#include "potl/metrics.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace potl;
using doctest::Approx;

namespace {

std::vector<Subject> subjects_of(std::vector<std::pair<double, bool>> obs) {
  std::vector<Subject> out;
  for (auto [t, d] : obs) out.push_back(Subject{t, d, fixture::fixed({0.0})});
  return out;
}

double oracle_surv(double t, const CovariatePath& path) { return std::exp(-t * std::exp(path.values()(0, 0))); }

ValidationSet random_validation(std::uint64_t seed, int n, bool censor) {
  Rng rng(seed);
  ValidationSet val;
  val.oracle = oracle_surv;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    const double t = -std::log(rng.uniform()) * std::exp(-x);
    const double c = censor ? rng.uniform(0.2, 3.0) : 1e9;
    // Coarse rounding produces ties in both times and risks.
    const double y = std::round(std::min(t, c) * 20.0) / 20.0 + 0.05;
    val.subjects.push_back(Subject{y, t <= c, fixture::fixed({std::round(x * 4.0) / 4.0})});
  }
  return val;
}

}  // namespace

TEST_CASE("censoring_km examples") {
  const CensoringKM none = censoring_km(subjects_of({{1.0, true}, {2.0, true}, {3.0, true}}));
  for (double t : {0.0, 1.0, 2.5, 10.0}) CHECK(none.at(t) == 1.0);

  const CensoringKM one = censoring_km(subjects_of({{2.0, false}}));
  CHECK(one.at(1.99) == 1.0);
  CHECK(one.before(2.0) == 1.0);
  CHECK(one.at(2.0) == 0.0);

  const CensoringKM five =
      censoring_km(subjects_of({{1.0, true}, {2.0, false}, {3.0, true}, {4.0, false}, {5.0, false}}));
  CHECK(five.at(1.5) == 1.0);
  CHECK(five.at(2.0) == Approx(0.75).epsilon(1e-15));
  CHECK(five.at(3.5) == Approx(0.75).epsilon(1e-15));
  CHECK(five.at(4.0) == Approx(0.375).epsilon(1e-15));
  CHECK(five.before(4.0) == Approx(0.75).epsilon(1e-15));
  CHECK(five.at(5.0) == 0.0);
}

TEST_CASE("censoring_km matches the product-limit oracle with ties") {
  const ValidationSet val = random_validation(12, 150, true);
  const CensoringKM km = censoring_km(val.subjects);
  for (double t = 0.0; t < 3.5; t += 0.025) {
    CHECK(km.at(t) == Approx(oracle::censoring_km_at(val.subjects, t, false)).epsilon(1e-12));
    CHECK(km.before(t) == Approx(oracle::censoring_km_at(val.subjects, t, true)).epsilon(1e-12));
  }
}

TEST_CASE("time grid") {
  const auto g = time_grid(2.0);
  CHECK(g.size() == 200);
  CHECK(g.front() == 0.0);
  CHECK(g.back() == 2.0);
}

TEST_CASE("oracle metrics examples") {
  const ValidationSet val = random_validation(3, 100, false);
  const FunctionPredictor exact(oracle_surv);
  CHECK(l2_distance(exact, val, 2.0) == 0.0);
  CHECK(d_tau(exact, val, 2.0) == 0.0);

  const FunctionPredictor up([](double t, const CovariatePath& p) { return oracle_surv(t, p) + 0.1; });
  CHECK(l2_distance(up, val, 2.0) == Approx(0.1 * std::sqrt(2.0)).epsilon(1e-12));
  const FunctionPredictor off([](double t, const CovariatePath& p) { return oracle_surv(t, p) - 0.05; });
  CHECK(d_tau(off, val, 2.0) == Approx(0.05).epsilon(1e-12));

  ValidationSet blind = val;
  blind.oracle = {};
  CHECK_THROWS_AS(l2_distance(exact, blind, 2.0), DataError);
  CHECK_THROWS_AS(d_tau(exact, blind, 2.0), DataError);
  const MetricSet m = evaluate_metrics(exact, blind, 2.0);
  CHECK(std::isnan(m.l2d));
  CHECK(std::isfinite(m.ibs));
}

TEST_CASE("C-index examples") {
  ValidationSet val;
  for (double t : {0.3, 0.7, 1.1, 1.6, 2.4}) val.subjects.push_back(Subject{t, true, fixture::fixed({1.0 / t})});
  const FunctionPredictor ordered([](double t, const CovariatePath& p) { return std::exp(-t * p.values()(0, 0)); });
  CHECK(uno_c_index(ordered, val, 3.0) == 1.0);
  const FunctionPredictor reversed([](double t, const CovariatePath& p) { return std::exp(-t / p.values()(0, 0)); });
  CHECK(uno_c_index(reversed, val, 3.0) == 0.0);
  const FunctionPredictor flat([](double t, const CovariatePath&) { return std::exp(-t); });
  CHECK(uno_c_index(flat, val, 3.0) == 0.5);

  ValidationSet lonely;
  lonely.subjects = subjects_of({{1.0, false}, {2.0, false}});
  CHECK_THROWS_AS(uno_c_index(flat, lonely, 3.0), DataError);
}

TEST_CASE("C-index matches the pairwise oracle") {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    const ValidationSet val = random_validation(seed, 120, true);
    const FunctionPredictor pred(oracle_surv);
    for (double tau : {1.0, 2.0}) {
      std::vector<double> risk;
      for (const auto& s : val.subjects) risk.push_back(1.0 - oracle_surv(tau, s.covariates));
      const CensoringKM km = censoring_km(val.subjects);
      CHECK(uno_c_index(pred, val, tau) ==
            Approx(oracle::c_index_pairs(risk, val.subjects, tau, km)).epsilon(1e-12));
    }
  }
}

TEST_CASE("integrated Brier examples") {
  ValidationSet val;
  val.subjects = subjects_of({{3.0, true}, {4.0, true}, {5.0, true}});
  const FunctionPredictor one([](double, const CovariatePath&) { return 1.0; });
  CHECK(integrated_brier(one, val, 2.0) == 0.0);

  val.subjects = subjects_of({{0.3, true}, {0.9, true}, {1.4, true}, {2.5, true}});
  const FunctionPredictor half([](double, const CovariatePath&) { return 0.5; });
  CHECK(integrated_brier(half, val, 2.0) == Approx(0.25).epsilon(1e-14));
}

TEST_CASE("RMST error examples") {
  const ValidationSet val = random_validation(9, 60, false);
  const FunctionPredictor pred(oracle_surv);
  const double tau = 2.0;
  double expect = 0.0;
  const auto grid = time_grid(tau);
  const double h = grid[1] - grid[0];
  for (const auto& s : val.subjects) {
    double area = 0.0;
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const double w = (k == 0 || k + 1 == grid.size()) ? 0.5 : 1.0;
      area += w * oracle_surv(grid[k], s.covariates) * h;
    }
    expect += std::abs(std::min(s.time, tau) - area);
  }
  CHECK(rmst_error(pred, val, tau) == Approx(expect / static_cast<double>(val.subjects.size())).epsilon(1e-12));

  ValidationSet single;
  single.subjects = subjects_of({{1.0, true}});
  const FunctionPredictor one([](double, const CovariatePath&) { return 1.0; });
  CHECK(rmst_error(one, single, 1.0) == Approx(0.0).scale(1.0).epsilon(1e-14));

  ValidationSet none;
  none.subjects = subjects_of({{1.0, false}});
  CHECK_THROWS_AS(rmst_error(one, none, 1.0), DataError);
}

TEST_CASE("censoring floor is flagged") {
  ValidationSet val;
  val.subjects = subjects_of({{0.5, true}, {1.0, false}});
  const FunctionPredictor half([](double, const CovariatePath&) { return 0.5; });
  const MetricSet m = evaluate_metrics(half, val, 2.0);
  CHECK(m.censoring_floor_hit);
  CHECK(std::isfinite(m.ibs));
}

TEST_CASE("metrics are invariant to validation order and bounded") {
  ValidationSet val = random_validation(21, 200, true);
  const FunctionPredictor pred([](double t, const CovariatePath& p) { return std::exp(-0.8 * t * std::exp(0.6 * p.values()(0, 0))); });
  const MetricSet a = evaluate_metrics(pred, val, 2.0);
  std::reverse(val.subjects.begin(), val.subjects.end());
  std::rotate(val.subjects.begin(), val.subjects.begin() + 37, val.subjects.end());
  const MetricSet b = evaluate_metrics(pred, val, 2.0);
  CHECK(a.l2d == Approx(b.l2d).epsilon(1e-12));
  CHECK(a.d_tau == Approx(b.d_tau).epsilon(1e-12));
  CHECK(a.c_index == Approx(b.c_index).epsilon(1e-12));
  CHECK(a.ibs == Approx(b.ibs).epsilon(1e-12));
  CHECK(a.rmst == Approx(b.rmst).epsilon(1e-12));
  CHECK(a.l2d >= 0.0);
  CHECK(a.d_tau >= 0.0);
  CHECK(a.d_tau <= 1.0);
  CHECK(a.c_index >= 0.0);
  CHECK(a.c_index <= 1.0);
  CHECK(a.ibs >= 0.0);
  CHECK(a.rmst >= 0.0);
  CHECK(evaluate_metrics(pred, val, 2.0).c_index == uno_c_index(pred, val, 2.0));
}

TEST_CASE("model curves equal pointwise survival") {
  const Eigen::VectorXd beta = (Eigen::VectorXd(2) << 0.4, -0.7).finished();
  const TargetModel model{beta, StepIntensity({0.2, 0.6, 1.0, 1.7}, {0.1, 0.3, 0.0, 0.4}), TransformationSpec{0.8}};
  RowMatrix values(2, 2);
  values << 0.5, 1.0, -0.5, 0.2;
  const CovariatePath varying({0.0, 0.8}, values);
  const auto grid = time_grid(2.0);
  std::vector<double> out(grid.size());
  for (const CovariatePath* path : {&varying, static_cast<const CovariatePath*>(nullptr)}) {
    const CovariatePath fixed = fixture::fixed({0.5, 1.0});
    const CovariatePath& p = path ? *path : fixed;
    ModelPredictor(model).curve(p, grid, out);
    for (std::size_t k = 0; k < grid.size(); ++k) CHECK(out[k] == Approx(survival(model, p, grid[k])).epsilon(1e-13));
  }
}
