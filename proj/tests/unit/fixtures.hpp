#pragma once

#include "potl/rng.hpp"
#include "potl/sim_harness.hpp"
#include "potl/survival_core.hpp"

#include <vector>

namespace fixture {

inline potl::CovariatePath fixed(std::initializer_list<double> values) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(values.size()));
  Eigen::Index k = 0;
  for (double v : values) x[k++] = v;
  return potl::CovariatePath(x);
}

inline std::vector<potl::Subject> target_sample(int n, std::uint64_t seed) {
  potl::ScenarioSpec spec;
  potl::Rng rng(seed);
  return potl::gen_target(spec, rng, n).data.subjects;
}

// Target subjects with one atom per subject carrying the true survival
// shrunk by `distort` (1 = exact).
inline std::vector<potl::PseudoSample> atoms_for(const std::vector<potl::Subject>& subjects, double distort) {
  std::vector<potl::PseudoSample> out;
  for (const auto& s : subjects) {
    const auto& x = s.covariates.values();
    const double eta = 0.5 * x(0, 0) - 0.5 * x(0, 1);
    const double surv = std::pow(1.0 + 0.5 * s.time, -std::exp(eta) * distort);
    out.push_back(potl::make_pseudo_sample(s.time, s.covariates, 1.0, surv));
  }
  return out;
}

}  // namespace fixture
