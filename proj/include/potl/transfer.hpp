#pragma once

// Source predictors, size-weighted pooling and pseudo-sample construction.

#include "potl/survival_core.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace potl {

/// Black-box source: survival predictions keyed by (subject id, time).
struct PredictionTable {
  struct Row {
    double time;
    double surv;
  };
  std::map<std::string, std::vector<Row>, std::less<>> rows;  // rows sorted by time per id

  void add(std::string id, double time, double surv);
  /// Throws DataError naming the key when absent.
  [[nodiscard]] double lookup(std::string_view id, double time) const;
};

/// Transformation-model source exported with named covariates.
struct ExportedModel {
  double r = 0.0;
  std::vector<std::string> covariate_names;
  Eigen::VectorXd beta;
  StepIntensity intensity;
  std::int64_t n = 0;

  [[nodiscard]] TargetModel to_model() const { return TargetModel{beta, intensity, TransformationSpec{r}}; }
};

ExportedModel export_model(const TargetModel& model, std::vector<std::string> covariate_names, std::int64_t n);

enum class SourceKind { prediction_table, exported_model };

struct SourcePredictor {
  std::variant<PredictionTable, ExportedModel> source;
  std::int64_t sample_size = 1;

  [[nodiscard]] SourceKind kind() const {
    return std::holds_alternative<PredictionTable>(source) ? SourceKind::prediction_table
                                                           : SourceKind::exported_model;
  }
};

/// Where a source is evaluated: the atom's id (table lookup) and its target-side
/// covariate path, whose columns are named by the target dataset.
struct EvaluationPoint {
  std::string_view id;
  double time;
  const CovariatePath& path;
};

/// Column indices of the exported model's covariates within the target's
/// covariates. Throws DataError naming the first unresolvable covariate.
std::vector<Eigen::Index> resolve_covariates(const ExportedModel& model,
                                             std::span<const std::string> target_names);

/// The path restricted to `columns`, in that order.
CovariatePath project_covariates(const CovariatePath& path, const std::vector<Eigen::Index>& columns);

/// Source survival at the point, clamped to [1e-6, 1 - 1e-6].
double evaluate_source(const SourcePredictor& pred, const EvaluationPoint& point,
                       std::span<const std::string> target_names);

/// c_k = N_k / sum_j N_j.
std::vector<double> pool_weights(std::span<const std::int64_t> sample_sizes);

class PooledPredictor {
 public:
  PooledPredictor(std::vector<SourcePredictor> components, std::vector<std::string> target_names);

  [[nodiscard]] const std::vector<SourcePredictor>& components() const { return components_; }
  [[nodiscard]] const std::vector<double>& weights() const { return weights_; }
  [[nodiscard]] double evaluate(const EvaluationPoint& point) const;

 private:
  std::vector<SourcePredictor> components_;
  std::vector<double> weights_;
  std::vector<std::string> target_names_;
  std::vector<std::vector<Eigen::Index>> column_maps_;
};

/// A user-provided atom: evaluation time, covariates and weight.
struct CustomAtom {
  std::string id;
  double time = 0.0;
  CovariatePath covariates;
  double weight = 1.0;
};

/// Default construction: one atom per subject at (Y_i, X_i) with weight 1.
std::vector<PseudoSample> build_pseudo_samples(const Dataset& target, const PooledPredictor& pooled);

std::vector<PseudoSample> build_pseudo_samples(std::span<const CustomAtom> atoms, const PooledPredictor& pooled);

}  // namespace potl
