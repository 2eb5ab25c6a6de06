#include "fixtures.hpp"
#include "oracles.hpp"

#include "potl/errors.hpp"
#include "potl/frailty_quad.hpp"
#include "potl/survival_core.hpp"

#include <doctest.h>

#include <cmath>
#include <stdexcept>

using namespace potl;
using doctest::Approx;

namespace {

RowMatrix rows(std::initializer_list<std::initializer_list<double>> values) {
  RowMatrix m(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(values.begin()->size()));
  Eigen::Index i = 0;
  for (auto row : values) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

TargetModel model_with(double r, std::vector<double> times, std::vector<double> jumps, Eigen::VectorXd beta) {
  return TargetModel{std::move(beta), StepIntensity(std::move(times), std::move(jumps)), TransformationSpec{r}};
}

}  // namespace

TEST_CASE("transform_G values") {
  CHECK(transform_G(0.0, 1.0) == 0.0);
  CHECK(transform_G(1.0, 0.0) == 1.0);
  CHECK(transform_G(1.0, 1.0) == Approx(0.693147).epsilon(1e-6));
  CHECK_THROWS_AS(transform_G(-1.0, 1.0), std::domain_error);
  CHECK_THROWS_AS(transform_G(1.0, -0.5), std::domain_error);
}

TEST_CASE("transform_G tends to the identity as r goes to 0") {
  for (double x = 0.0; x <= 10.0; x += 0.25) CHECK(std::abs(transform_G(x, 1e-8) - x) < 1e-6);
}

TEST_CASE("transform_G increases in x") {
  for (double r : {0.0, 0.3, 1.0, 2.0}) {
    double prev = -1.0;
    for (double x = 0.0; x < 20.0; x += 0.5) {
      const double g = transform_G(x, r);
      CHECK(g > prev);
      prev = g;
    }
  }
}

TEST_CASE("covariate path validation") {
  CHECK_THROWS_AS(CovariatePath({0.5, 1.0}, rows({{1.0}, {2.0}})), DataError);
  CHECK_THROWS_AS(CovariatePath({0.0, 0.0}, rows({{1.0}, {2.0}})), DataError);
  CHECK_THROWS_AS(CovariatePath({0.0, 1.0}, rows({{1.0}})), DataError);
  const CovariatePath path({0.0, 1.0, 2.5}, rows({{1.0}, {2.0}, {3.0}}));
  CHECK(path.segment_at(0.0) == 0);
  CHECK(path.segment_at(0.99) == 0);
  CHECK(path.segment_at(1.0) == 1);
  CHECK(path.segment_at(7.0) == 2);
  CHECK(path.value_at(2.5)[0] == 3.0);
}

TEST_CASE("cumulative_intensity examples") {
  const StepIntensity lam({1.0, 2.0, 3.0}, {0.2, 0.3, 0.5});
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  CHECK(cumulative_intensity(zero, lam, fixture::fixed({4.0}), 5.0) == Approx(1.0));
  CHECK(cumulative_intensity(zero, lam, fixture::fixed({4.0}), 0.5) == 0.0);

  const StepIntensity single({1.0}, {0.3});
  Eigen::VectorXd b(1);
  b << std::log(2.0);
  CHECK(cumulative_intensity(b, single, fixture::fixed({1.0}), 1.5) == Approx(0.6));

  SUBCASE("two-segment path matches a term-by-term sum") {
    const CovariatePath path({0.0, 1.5}, rows({{0.2, 1.0}, {-0.4, 2.0}}));
    Eigen::VectorXd beta(2);
    beta << 0.7, -0.3;
    const double e1 = std::exp(0.7 * 0.2 - 0.3 * 1.0);
    const double e2 = std::exp(-0.7 * 0.4 - 0.3 * 2.0);
    CHECK(cumulative_intensity(beta, lam, path, 3.0) == Approx(0.2 * e1 + 0.3 * e2 + 0.5 * e2).epsilon(1e-14));
    CHECK(cumulative_intensity(beta, lam, path, 1.7) == Approx(0.2 * e1).epsilon(1e-14));
    CHECK(cumulative_intensity(beta, lam, path, 2.0) == Approx(0.2 * e1 + 0.3 * e2).epsilon(1e-14));
  }
  CHECK_THROWS_AS(cumulative_intensity(Eigen::VectorXd::Zero(2), lam, fixture::fixed({1.0}), 1.0),
                  std::invalid_argument);
}

TEST_CASE("survival examples") {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  const TargetModel po = model_with(1.0, {1.0}, {1.0}, zero);
  CHECK(survival(po, fixture::fixed({0.0}), 0.0) == 1.0);
  CHECK(survival(po, fixture::fixed({0.0}), 1.0) == Approx(0.5));
  const TargetModel half = model_with(0.5, {1.0}, {2.0}, zero);
  CHECK(survival(half, fixture::fixed({0.0}), 1.0) == Approx(0.25).epsilon(1e-14));
}

TEST_CASE("survival is nonincreasing and right-continuous on random models") {
  Rng rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> times;
    std::vector<double> jumps;
    double t = 0.0;
    for (int l = 0; l < 8; ++l) {
      t += 0.1 + rng.uniform();
      times.push_back(t);
      jumps.push_back(rng.uniform() < 0.2 ? 0.0 : rng.uniform());
    }
    Eigen::VectorXd beta(2);
    beta << rng.normal(), rng.normal();
    const TargetModel m = model_with(rng.uniform(0.0, 2.0), times, jumps, beta);
    const CovariatePath path({0.0, times[3]}, rows({{rng.normal(), rng.uniform()}, {rng.normal(), rng.uniform()}}));
    double prev = 1.0;
    for (double s = 0.0; s < t + 1.0; s += 0.05) {
      const double v = survival(m, path, s);
      CHECK(v <= prev + 1e-15);
      prev = v;
    }
    for (double tl : times) CHECK(survival(m, path, tl) == survival(m, path, tl + 1e-12));
  }
}

TEST_CASE("log_likelihood closed forms") {
  const Eigen::VectorXd beta = (Eigen::VectorXd(1) << 0.4).finished();
  const TargetModel m = model_with(0.0, {1.0, 2.0}, {0.3, 0.5}, beta);
  SUBCASE("censored only") {
    std::vector<Subject> s{{1.5, false, fixture::fixed({1.0})}, {2.5, false, fixture::fixed({-1.0})}};
    const double expect = -(0.3 * std::exp(0.4)) - (0.8 * std::exp(-0.4));
    CHECK(log_likelihood(s, m) == Approx(expect).epsilon(1e-14));
  }
  SUBCASE("one Cox event") {
    std::vector<Subject> s{{1.0, true, fixture::fixed({1.0})}};
    CHECK(log_likelihood(s, m) == Approx(std::log(0.3) + 0.4 - 0.3 * std::exp(0.4)).epsilon(1e-14));
  }
  SUBCASE("event without a jump is degenerate") {
    std::vector<Subject> s{{1.5, true, fixture::fixed({1.0})}};
    CHECK(std::isinf(log_likelihood(s, m)));
  }
}

TEST_CASE("log_likelihood equals the frailty-integral form") {
  std::vector<Subject> subjects{{0.5, true, fixture::fixed({0.3, 1.0})},
                               {1.0, false, fixture::fixed({-0.2, 0.0})},
                               {1.2, true, fixture::fixed({1.1, 1.0})},
                               {2.0, true, fixture::fixed({0.0, 0.0})},
                               {2.4, false, fixture::fixed({0.7, 1.0})}};
  const Eigen::VectorXd beta = (Eigen::VectorXd(2) << 0.5, -0.4).finished();
  for (double r : {0.5, 1.0, 2.0}) {
    const TargetModel m = model_with(r, {0.5, 1.2, 2.0}, {0.2, 0.35, 0.6}, beta);
    const double direct = log_likelihood(subjects, m);
    CHECK(std::abs(direct - frailty_log_likelihood(subjects, m, 40)) < 1e-6);
    CHECK(std::abs(direct - oracle::frailty_loglik(subjects, m)) < 1e-6);
  }
}

TEST_CASE("penalty_psi examples") {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  // Lambda(1) = log 2 under Cox gives S(1) = 0.5.
  const TargetModel m = model_with(0.0, {1.0}, {std::log(2.0)}, zero);
  std::vector<PseudoSample> half{make_pseudo_sample(1.0, fixture::fixed({0.0}), 1.0, 0.5),
                                 make_pseudo_sample(1.0, fixture::fixed({3.0}), 1.0, 0.5)};
  CHECK(penalty_psi(half, m) == Approx(std::log(0.5)).epsilon(1e-14));
  CHECK(penalty_psi({}, m) == 0.0);

  SUBCASE("weighted three-atom fixture") {
    const TargetModel m2 = model_with(1.0, {0.5, 1.5}, {0.4, 0.6}, zero);
    std::vector<PseudoSample> atoms{make_pseudo_sample(0.5, fixture::fixed({0.0}), 0.5, 0.9),
                                    make_pseudo_sample(1.0, fixture::fixed({0.0}), 2.0, 0.6),
                                    make_pseudo_sample(2.0, fixture::fixed({0.0}), 1.0, 0.3)};
    const double s1 = 1.0 / 1.4;
    const double s3 = 1.0 / 2.0;
    const double expect = (0.5 * (0.9 * std::log(s1) + 0.1 * std::log(1 - s1)) +
                           2.0 * (0.6 * std::log(s1) + 0.4 * std::log(1 - s1)) +
                           1.0 * (0.3 * std::log(s3) + 0.7 * std::log(1 - s3))) /
                          3.0;
    CHECK(penalty_psi(atoms, m2) == Approx(expect).epsilon(1e-14));
    CHECK(penalty_psi(atoms, m2) <= 0.0);
  }
}

TEST_CASE("cross-entropy is maximized at the source value") {
  Rng rng(5);
  for (int k = 0; k < 10; ++k) {
    const double st = rng.uniform(0.02, 0.98);
    auto h = [st](double s) { return st * std::log(s) + (1 - st) * std::log(1 - s); };
    for (double s = 0.01; s < 1.0; s += 0.01) {
      if (std::abs(s - st) > 1e-9) CHECK(h(s) < h(st));
    }
    CHECK(-st / (st * st) - (1 - st) / ((1 - st) * (1 - st)) < 0.0);
  }
}

TEST_CASE("source survival clamping") {
  CHECK(clamp_source_survival(0.0) == kSourceClamp);
  CHECK(clamp_source_survival(1.0) == 1.0 - kSourceClamp);
  CHECK(clamp_source_survival(0.4) == 0.4);
  CHECK_THROWS_AS(clamp_source_survival(1.5), DataError);
  CHECK_THROWS_AS(make_pseudo_sample(1.0, fixture::fixed({0.0}), -1.0, 0.5), DataError);
}

TEST_CASE("step intensity validation and lookup") {
  CHECK_THROWS_AS(StepIntensity({1.0, 1.0}, {0.1, 0.2}), DataError);
  CHECK_THROWS_AS(StepIntensity({1.0}, {-0.1}), DataError);
  const StepIntensity lam({1.0, 2.0}, {0.25, 0.5});
  CHECK(lam.at(0.9) == 0.0);
  CHECK(lam.at(1.0) == 0.25);
  CHECK(lam.at(5.0) == 0.75);
  CHECK(lam.jump_at(2.0) == 0.5);
  CHECK(lam.jump_at(1.5) == 0.0);
  CHECK(lam.count_upto(1.99) == 1);
}
