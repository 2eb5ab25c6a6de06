#pragma once

// File formats and the command-line driver.
//
// Subjects CSV (wide):  id,time,status,<covariates...>
// Subjects CSV (long):  id,start,stop,status,<covariates...>, one row per
//                       covariate segment; status is read from the last row.
// Predictions CSV:      id,time,surv[,variance]
// Atoms CSV:            id,time,weight,<covariates...>
// Query CSV:            id,time,<covariates...>
// Model JSON:           {"r": .., "beta": {name: value}, "lambda": [{"t": .., "jump": ..}], "n": ..}

#include "potl/sim_harness.hpp"
#include "potl/survival_core.hpp"
#include "potl/transfer.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace potl {

/// Shortest decimal that parses back to the same double.
std::string format_double(double x);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

Dataset parse_subjects_csv(std::string_view text);
Dataset load_subjects_csv(const std::filesystem::path& path);
std::string subjects_to_csv(const Dataset& data);

PredictionTable parse_prediction_csv(std::string_view text);

std::vector<CustomAtom> parse_atoms_csv(std::string_view text, std::vector<std::string>* covariate_names = nullptr);

struct Query {
  std::string id;
  double time = 0.0;
  CovariatePath covariates;
};
struct QueryTable {
  std::vector<Query> rows;
  std::vector<std::string> covariate_names;
};
QueryTable parse_query_csv(std::string_view text);

ExportedModel parse_model_json(std::string_view text);
std::string model_to_json(const ExportedModel& model);

ScenarioSpec parse_scenario_json(std::string_view text);

std::string metrics_to_csv(const std::vector<MetricRow>& rows);
std::string summary_to_csv(const std::vector<MetricSummary>& rows);

/// Runs the command line; returns the process exit code (0 ok, 1 usage,
/// 2 data error, 3 numeric error or non-convergence).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace potl
