#pragma once

// Simulation scenarios SC1-SC5: target, source and validation generators and
// the replicate runner comparing the transfer fit with the target-only fit.

#include "potl/em_fitter.hpp"
#include "potl/metrics.hpp"
#include "potl/rng.hpp"
#include "potl/survival_core.hpp"
#include "potl/transfer.hpp"
#include "potl/tuning.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace potl {

enum class ScenarioId { SC1 = 1, SC2, SC3, SC4, SC5 };
enum class CovariateShift { none, source_beta, validation_beta };

ScenarioId parse_scenario(std::string_view name);
std::string scenario_name(ScenarioId id);
CovariateShift parse_shift(std::string_view name);
std::string shift_name(CovariateShift shift);

struct ScenarioSpec {
  ScenarioId id = ScenarioId::SC1;
  int n_target = 100;
  int n_source = 1000;
  double tau_target = 2.0;
  double tau_source = 5.0;
  CovariateShift covariate_shift = CovariateShift::none;
  bool covariate_mismatch = false;  // 4 target covariates, source keeps x1, x2
  std::uint64_t seed = 1;
};

struct GeneratedStudy {
  Dataset data;
  std::vector<double> event_times;      // latent T
  std::vector<double> censoring_times;  // latent C
  SurvivalFunction oracle;              // true S(t | X); empty when not closed form
};

/// Target-model survival (1 + 0.5 t)^(-exp(eta)) for the scenario's covariates.
SurvivalFunction target_oracle(const ScenarioSpec& spec);

/// Inverse-CDF draws. Target: S(t) = (1 + 0.5 t)^(-exp(eta)).
double target_time_from_uniform(double u, double eta);
/// SC1 to SC4 source event times; SC5 is not a single-uniform inversion.
double source_time_from_uniform(ScenarioId id, double u, double eta);
/// Error term of the SC5 source with S_W(w) = 2 / (2 + e^w).
double sc5_w_from_uniform(double u);

GeneratedStudy gen_target(const ScenarioSpec& spec, Rng& rng, int n);
GeneratedStudy gen_target(const ScenarioSpec& spec);
GeneratedStudy gen_source(const ScenarioSpec& spec, Rng& rng, int n);
GeneratedStudy gen_source(const ScenarioSpec& spec);
/// Uncensored draws from the target population; x2 ~ Beta(1, 2) under validation shift.
ValidationSet gen_validation(const ScenarioSpec& spec, Rng& rng, int n);

/// Source predictor fitted on source data: Cox for SC1-SC3, AIC-selected r
/// for SC4-SC5.
struct SourceFit {
  ExportedModel model;
  double r = 0.0;
  std::vector<std::string> warnings;
};
SourceFit fit_source(const ScenarioSpec& spec, const Dataset& source, const TuneGrid& grid, const FitConfig& base);

enum class SourceMode { fitted, exact_truth, uniform_noise };

struct ReplicateOptions {
  int n_reps = 100;
  bool potl = true;
  bool target_only = true;
  int n_validation = 10000;
  SourceMode source_mode = SourceMode::fitted;
  TuneGrid tune;
  FitConfig base;  // xi and r are set per fit
};

struct MetricRow {
  int replicate = 0;
  std::string scenario;
  std::string method;
  std::string metric;
  double value = 0.0;
};

struct ReplicateTable {
  std::vector<MetricRow> rows;  // ordered by replicate, method, metric
  int failed = 0;
  std::vector<std::string> warnings;
};

/// One replicate's rows; throws on failure.
std::vector<MetricRow> run_replicate(const ScenarioSpec& spec, const ReplicateOptions& options, int replicate);

/// Failed replicates are logged and skipped; more than 10% failures throws
/// NumericError.
ReplicateTable run_replicates(const ScenarioSpec& spec, const ReplicateOptions& options);

struct MetricSummary {
  std::string method;
  std::string metric;
  double median = 0.0;
  double mad = 0.0;  // median absolute deviation
  int count = 0;
};

std::vector<MetricSummary> summarize(const std::vector<MetricRow>& rows);

double median(std::vector<double> values);

}  // namespace potl
