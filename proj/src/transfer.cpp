#include "potl/transfer.hpp"

#include "potl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace potl {
namespace {

bool same_time(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)); }

double evaluate_bound(const SourcePredictor& pred, const EvaluationPoint& point,
                      const std::vector<Eigen::Index>& columns) {
  if (const auto* table = std::get_if<PredictionTable>(&pred.source)) {
    return clamp_source_survival(table->lookup(point.id, point.time));
  }
  const auto& model = std::get<ExportedModel>(pred.source);
  const double a = cumulative_intensity(model.beta, model.intensity, project_covariates(point.path, columns), point.time);
  return clamp_source_survival(std::exp(-transform_G(a, model.r)));
}

}  // namespace

CovariatePath project_covariates(const CovariatePath& path, const std::vector<Eigen::Index>& columns) {
  RowMatrix values(path.values().rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    values.col(static_cast<Eigen::Index>(c)) = path.values().col(columns[c]);
  }
  return CovariatePath(path.breakpoints(), std::move(values));
}

void PredictionTable::add(std::string id, double time, double surv) {
  if (!(surv >= 0.0 && surv <= 1.0)) {
    std::ostringstream os;
    os << "prediction for id '" << id << "' at t=" << time << " outside [0, 1]: " << surv;
    throw DataError(os.str());
  }
  auto& list = rows[std::move(id)];
  auto it = std::lower_bound(list.begin(), list.end(), time, [](const Row& r, double t) { return r.time < t; });
  list.insert(it, Row{time, surv});
}

double PredictionTable::lookup(std::string_view id, double time) const {
  if (auto it = rows.find(id); it != rows.end()) {
    for (const auto& row : it->second) {
      if (same_time(row.time, time)) return row.surv;
    }
  }
  std::ostringstream os;
  os << "source prediction missing for key (id=" << id << ", time=" << time << ")";
  throw DataError(os.str());
}

ExportedModel export_model(const TargetModel& model, std::vector<std::string> covariate_names, std::int64_t n) {
  if (static_cast<Eigen::Index>(covariate_names.size()) != model.beta.size()) {
    throw DataError("export needs one covariate name per coefficient");
  }
  return ExportedModel{model.transform.r, std::move(covariate_names), model.beta, model.intensity, n};
}

std::vector<Eigen::Index> resolve_covariates(const ExportedModel& model,
                                             std::span<const std::string> target_names) {
  std::vector<Eigen::Index> columns;
  columns.reserve(model.covariate_names.size());
  for (const auto& name : model.covariate_names) {
    auto it = std::find(target_names.begin(), target_names.end(), name);
    if (it == target_names.end()) {
      throw DataError("source covariate '" + name + "' is not among the target covariates");
    }
    columns.push_back(static_cast<Eigen::Index>(it - target_names.begin()));
  }
  return columns;
}

double evaluate_source(const SourcePredictor& pred, const EvaluationPoint& point,
                       std::span<const std::string> target_names) {
  std::vector<Eigen::Index> columns;
  if (const auto* model = std::get_if<ExportedModel>(&pred.source)) columns = resolve_covariates(*model, target_names);
  return evaluate_bound(pred, point, columns);
}

std::vector<double> pool_weights(std::span<const std::int64_t> sample_sizes) {
  if (sample_sizes.empty()) throw std::invalid_argument("pool_weights needs at least one source");
  double total = 0.0;
  for (auto n : sample_sizes) {
    if (n <= 0) throw std::invalid_argument("source sample sizes must be positive");
    total += static_cast<double>(n);
  }
  std::vector<double> weights;
  weights.reserve(sample_sizes.size());
  for (auto n : sample_sizes) weights.push_back(static_cast<double>(n) / total);
  return weights;
}

PooledPredictor::PooledPredictor(std::vector<SourcePredictor> components, std::vector<std::string> target_names)
    : components_(std::move(components)), target_names_(std::move(target_names)) {
  std::vector<std::int64_t> sizes;
  for (const auto& c : components_) sizes.push_back(c.sample_size);
  weights_ = pool_weights(sizes);
  for (const auto& c : components_) {
    if (const auto* model = std::get_if<ExportedModel>(&c.source)) {
      column_maps_.push_back(resolve_covariates(*model, target_names_));
    } else {
      column_maps_.emplace_back();
    }
  }
}

double PooledPredictor::evaluate(const EvaluationPoint& point) const {
  double total = 0.0;
  for (std::size_t k = 0; k < components_.size(); ++k) {
    total += weights_[k] * evaluate_bound(components_[k], point, column_maps_[k]);
  }
  return clamp_source_survival(std::min(1.0, total));
}

std::vector<PseudoSample> build_pseudo_samples(const Dataset& target, const PooledPredictor& pooled) {
  std::vector<PseudoSample> out;
  out.reserve(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto& s = target.subjects[i];
    const std::string_view id = i < target.ids.size() ? std::string_view(target.ids[i]) : std::string_view();
    try {
      out.push_back(make_pseudo_sample(s.time, s.covariates, 1.0, pooled.evaluate({id, s.time, s.covariates})));
    } catch (const DataError& e) {
      throw DataError("subject '" + std::string(id) + "': " + e.what());
    }
  }
  return out;
}

std::vector<PseudoSample> build_pseudo_samples(std::span<const CustomAtom> atoms, const PooledPredictor& pooled) {
  std::vector<PseudoSample> out;
  out.reserve(atoms.size());
  for (const auto& atom : atoms) {
    try {
      out.push_back(make_pseudo_sample(atom.time, atom.covariates, atom.weight,
                                       pooled.evaluate({atom.id, atom.time, atom.covariates})));
    } catch (const DataError& e) {
      throw DataError("atom '" + atom.id + "': " + e.what());
    }
  }
  return out;
}

}  // namespace potl
