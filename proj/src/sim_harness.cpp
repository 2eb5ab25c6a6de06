#include "potl/sim_harness.hpp"

#include "potl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace potl {
namespace {

Eigen::VectorXd target_beta(const ScenarioSpec& spec) {
  Eigen::VectorXd beta(spec.covariate_mismatch ? 4 : 2);
  if (spec.covariate_mismatch) {
    beta << 0.5, -0.5, -0.5, 0.5;
  } else {
    beta << 0.5, -0.5;
  }
  return beta;
}

std::vector<std::string> covariate_names(int p) {
  std::vector<std::string> names;
  for (int k = 1; k <= p; ++k) names.push_back("x" + std::to_string(k));
  return names;
}

// x1 ~ Ber(0.5); x2 ~ Unif(0, 1), or Beta(1, 2) by inversion when shifted;
// further covariates Unif(0, 1).
Eigen::VectorXd draw_covariates(Rng& rng, int p, bool beta_x2) {
  Eigen::VectorXd x(p);
  x[0] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const double u = rng.uniform();
  x[1] = beta_x2 ? 1.0 - std::sqrt(1.0 - u) : u;
  for (int k = 2; k < p; ++k) x[k] = rng.uniform();
  return x;
}

double positive(double t) { return std::max(t, std::numeric_limits<double>::min()); }

double draw_source_time(ScenarioId id, Rng& rng, const Eigen::VectorXd& x) {
  const double b = id == ScenarioId::SC3 ? 0.7 : 0.5;
  const double eta = b * x[0] - b * x[1];
  if (id != ScenarioId::SC5) return positive(source_time_from_uniform(id, rng.uniform(), eta));
  const double w = sc5_w_from_uniform(rng.uniform());
  return positive(std::exp(-eta + w + 0.5 * rng.normal()));
}

SurvivalFunction source_oracle(ScenarioId id) {
  switch (id) {
    case ScenarioId::SC1:
      return [](double t, const CovariatePath& path) {
        const auto& x = path.values();
        return std::pow(1.0 + 0.5 * t, -std::exp(0.5 * x(0, 0) - 0.5 * x(0, 1)));
      };
    case ScenarioId::SC2:
    case ScenarioId::SC3: {
      const double b = id == ScenarioId::SC2 ? 0.5 : 0.7;
      return [b](double t, const CovariatePath& path) {
        const auto& x = path.values();
        return std::exp(-0.4 * t * std::exp(b * x(0, 0) - b * x(0, 1)));
      };
    }
    case ScenarioId::SC4:
      return [](double t, const CovariatePath& path) {
        const auto& x = path.values();
        return 1.0 / (1.0 + 0.5 * t * std::exp(0.5 * x(0, 0) - 0.5 * x(0, 1)));
      };
    case ScenarioId::SC5:
      return {};
  }
  return {};
}

void finish(GeneratedStudy& study, std::string id_prefix) {
  study.data.ids.reserve(study.data.subjects.size());
  for (std::size_t i = 0; i < study.data.subjects.size(); ++i) {
    study.data.ids.push_back(id_prefix + std::to_string(i + 1));
  }
}

}  // namespace

double target_time_from_uniform(double u, double eta) { return 2.0 * (std::pow(u, -std::exp(-eta)) - 1.0); }

double source_time_from_uniform(ScenarioId id, double u, double eta) {
  switch (id) {
    case ScenarioId::SC1:
      return target_time_from_uniform(u, eta);
    case ScenarioId::SC2:
    case ScenarioId::SC3:
      return -std::log(u) * std::exp(-eta) / 0.4;
    case ScenarioId::SC4:
      return 2.0 * (1.0 / u - 1.0) * std::exp(-eta);
    case ScenarioId::SC5:
      break;
  }
  throw std::invalid_argument("scenario has no single-uniform inversion");
}

double sc5_w_from_uniform(double u) { return std::log(2.0 * (1.0 - u) / u); }

ScenarioId parse_scenario(std::string_view name) {
  for (int k = 1; k <= 5; ++k) {
    if (name == "SC" + std::to_string(k) || name == "sc" + std::to_string(k)) return static_cast<ScenarioId>(k);
  }
  throw std::invalid_argument("unknown scenario id '" + std::string(name) + "'");
}

std::string scenario_name(ScenarioId id) { return "SC" + std::to_string(static_cast<int>(id)); }

CovariateShift parse_shift(std::string_view name) {
  if (name == "none") return CovariateShift::none;
  if (name == "source-beta") return CovariateShift::source_beta;
  if (name == "validation-beta") return CovariateShift::validation_beta;
  throw std::invalid_argument("unknown covariate shift '" + std::string(name) + "'");
}

std::string shift_name(CovariateShift shift) {
  switch (shift) {
    case CovariateShift::none:
      return "none";
    case CovariateShift::source_beta:
      return "source-beta";
    case CovariateShift::validation_beta:
      return "validation-beta";
  }
  return "none";
}

SurvivalFunction target_oracle(const ScenarioSpec& spec) {
  return [beta = target_beta(spec)](double t, const CovariatePath& path) {
    const double eta = path.values().row(0).dot(beta.transpose());
    return std::pow(1.0 + 0.5 * t, -std::exp(eta));
  };
}

GeneratedStudy gen_target(const ScenarioSpec& spec, Rng& rng, int n) {
  const Eigen::VectorXd beta = target_beta(spec);
  const int p = static_cast<int>(beta.size());
  GeneratedStudy study;
  study.data.covariate_names = covariate_names(p);
  study.oracle = target_oracle(spec);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x = draw_covariates(rng, p, false);
    const double t = positive(target_time_from_uniform(rng.uniform(), x.dot(beta)));
    const double c = std::min(rng.uniform(1.5, 4.0), spec.tau_target);
    study.event_times.push_back(t);
    study.censoring_times.push_back(c);
    study.data.subjects.push_back(Subject{std::min(t, c), t <= c, CovariatePath(x)});
  }
  finish(study, "t");
  return study;
}

GeneratedStudy gen_target(const ScenarioSpec& spec) {
  Rng rng(spec.seed);
  return gen_target(spec, rng, spec.n_target);
}

GeneratedStudy gen_source(const ScenarioSpec& spec, Rng& rng, int n) {
  GeneratedStudy study;
  study.data.covariate_names = covariate_names(2);
  study.oracle = source_oracle(spec.id);
  const bool shifted = spec.covariate_shift == CovariateShift::source_beta;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x = draw_covariates(rng, 2, shifted);
    const double t = draw_source_time(spec.id, rng, x);
    const double c = std::min(rng.uniform(3.5, 7.0), spec.tau_source);
    study.event_times.push_back(t);
    study.censoring_times.push_back(c);
    study.data.subjects.push_back(Subject{std::min(t, c), t <= c, CovariatePath(x)});
  }
  finish(study, "s");
  return study;
}

GeneratedStudy gen_source(const ScenarioSpec& spec) {
  Rng rng(spec.seed);
  return gen_source(spec, rng, spec.n_source);
}

ValidationSet gen_validation(const ScenarioSpec& spec, Rng& rng, int n) {
  const Eigen::VectorXd beta = target_beta(spec);
  const int p = static_cast<int>(beta.size());
  const bool shifted = spec.covariate_shift == CovariateShift::validation_beta;
  ValidationSet val;
  val.oracle = target_oracle(spec);
  val.subjects.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x = draw_covariates(rng, p, shifted);
    const double t = positive(target_time_from_uniform(rng.uniform(), x.dot(beta)));
    val.subjects.push_back(Subject{t, true, CovariatePath(x)});
  }
  return val;
}

SourceFit fit_source(const ScenarioSpec& spec, const Dataset& source, const TuneGrid& grid, const FitConfig& base) {
  SourceFit out;
  FitConfig config = base;
  config.xi = 0.0;
  TargetModel model;
  if (spec.id == ScenarioId::SC4 || spec.id == ScenarioId::SC5) {
    AicResult aic = aic_select_r(source.subjects, grid, config);
    out.r = aic.best_r;
    out.warnings = std::move(aic.warnings);
    model = std::move(aic.best_model);
  } else {
    config.r = 0.0;
    FitResult res = fit(source.subjects, {}, config);
    if (!res.converged) out.warnings.push_back("source fit did not converge");
    model = std::move(res.model);
  }
  out.model = export_model(model, source.covariate_names, static_cast<std::int64_t>(source.size()));
  return out;
}

std::vector<MetricRow> run_replicate(const ScenarioSpec& spec, const ReplicateOptions& options, int replicate) {
  const std::uint64_t seed = substream_seed(spec.seed, static_cast<std::uint64_t>(replicate));
  Rng target_rng(substream_seed(seed, 0));
  Rng source_rng(substream_seed(seed, 1));
  Rng validation_rng(substream_seed(seed, 2));
  Rng noise_rng(substream_seed(seed, 3));
  TuneGrid tune = options.tune;
  tune.seed = substream_seed(seed, 4);

  const GeneratedStudy target = gen_target(spec, target_rng, spec.n_target);
  const ValidationSet validation = gen_validation(spec, validation_rng, options.n_validation);
  const std::string scenario = scenario_name(spec.id);
  std::vector<MetricRow> rows;
  auto emit = [&](const std::string& method, const TargetModel& model) {
    const MetricSet m = evaluate_metrics(ModelPredictor(model), validation, spec.tau_target);
    for (auto [name, value] : {std::pair<const char*, double>{"l2d", m.l2d},
                               {"d_tau", m.d_tau},
                               {"c_index", m.c_index},
                               {"ibs", m.ibs},
                               {"rmst", m.rmst}}) {
      rows.push_back(MetricRow{replicate, scenario, method, name, value});
    }
  };

  FitConfig base = options.base;
  base.r = 0.0;
  if (options.potl) {
    std::vector<PseudoSample> pseudo;
    switch (options.source_mode) {
      case SourceMode::fitted: {
        const GeneratedStudy source = gen_source(spec, source_rng, spec.n_source);
        SourceFit sf = fit_source(spec, source.data, tune, base);
        std::vector<SourcePredictor> components;
        components.push_back(SourcePredictor{std::move(sf.model), spec.n_source});
        const PooledPredictor pooled(std::move(components), target.data.covariate_names);
        pseudo = build_pseudo_samples(target.data, pooled);
        break;
      }
      case SourceMode::exact_truth:
        for (const auto& s : target.data.subjects) {
          pseudo.push_back(make_pseudo_sample(s.time, s.covariates, 1.0, target.oracle(s.time, s.covariates)));
        }
        break;
      case SourceMode::uniform_noise:
        for (const auto& s : target.data.subjects) {
          pseudo.push_back(make_pseudo_sample(s.time, s.covariates, 1.0, noise_rng.uniform()));
        }
        break;
    }
    const CvResult cv = cv_select_xi(target.data.subjects, pseudo, tune, base);
    FitConfig config = base;
    config.xi = cv.best_xi;
    const FitResult res = fit(target.data.subjects, pseudo, config);
    emit("potl", res.model);
    rows.push_back(MetricRow{replicate, scenario, "potl", "xi", cv.best_xi});
  }
  if (options.target_only) {
    FitConfig config = base;
    config.xi = 0.0;
    const FitResult res = fit(target.data.subjects, {}, config);
    emit("target_only", res.model);
  }
  return rows;
}

ReplicateTable run_replicates(const ScenarioSpec& spec, const ReplicateOptions& options) {
  if (options.n_reps < 1) throw std::invalid_argument("n_reps must be at least 1");
  ReplicateTable table;
  for (int rep = 0; rep < options.n_reps; ++rep) {
    try {
      auto rows = run_replicate(spec, options, rep);
      table.rows.insert(table.rows.end(), rows.begin(), rows.end());
    } catch (const std::runtime_error& e) {
      ++table.failed;
      table.warnings.push_back("replicate " + std::to_string(rep) + " failed: " + e.what());
    }
  }
  if (10 * table.failed > options.n_reps) {
    throw NumericError(std::to_string(table.failed) + " of " + std::to_string(options.n_reps) +
                       " replicates failed");
  }
  return table;
}

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const std::size_t h = values.size() / 2;
  return values.size() % 2 == 1 ? values[h] : 0.5 * (values[h - 1] + values[h]);
}

std::vector<MetricSummary> summarize(const std::vector<MetricRow>& rows) {
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  for (const auto& row : rows) {
    auto key = std::make_pair(row.method, row.metric);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(row.value);
  }
  std::vector<MetricSummary> out;
  for (const auto& key : order) {
    const auto& values = groups[key];
    const double med = median(values);
    std::vector<double> dev;
    dev.reserve(values.size());
    for (double v : values) dev.push_back(std::abs(v - med));
    out.push_back(MetricSummary{key.first, key.second, med, median(dev), static_cast<int>(values.size())});
  }
  return out;
}

}  // namespace potl
