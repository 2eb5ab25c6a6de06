#include "potl/cli_io.hpp"

#include "potl/em_fitter.hpp"
#include "potl/errors.hpp"
#include "potl/metrics.hpp"
#include "potl/tuning.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <system_error>
#include <unistd.h>

namespace potl {
namespace {

using Json = nlohmann::ordered_json;

struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

[[noreturn]] void fail_at(std::size_t line, const std::string& what) {
  throw DataError("line " + std::to_string(line) + ": " + what);
}

std::vector<std::string> split_csv_line(std::string_view line, std::size_t number) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else {
      field += c;
    }
  }
  if (quoted) fail_at(number, "unterminated quoted field");
  fields.push_back(std::move(field));
  for (auto& f : fields) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return fields;
}

// Header plus data rows; blank lines skipped, CRLF and a UTF-8 BOM accepted.
std::vector<CsvRow> read_csv(std::string_view text) {
  if (text.starts_with("\xEF\xBB\xBF")) text.remove_prefix(3);
  std::vector<CsvRow> rows;
  std::size_t number = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view() : text.substr(nl + 1);
    ++number;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    rows.push_back(CsvRow{number, split_csv_line(line, number)});
  }
  if (rows.empty()) throw DataError("empty input: no header row");
  const std::size_t width = rows.front().fields.size();
  for (const auto& row : rows) {
    if (row.fields.size() != width) {
      fail_at(row.line, "expected " + std::to_string(width) + " fields, found " + std::to_string(row.fields.size()));
    }
  }
  return rows;
}

double parse_number(const std::string& s, std::size_t line, std::string_view column) {
  double value = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || s.empty() || !std::isfinite(value)) {
    fail_at(line, "column '" + std::string(column) + "': not a finite number: '" + s + "'");
  }
  return value;
}

bool parse_status(const std::string& s, std::size_t line) {
  if (s == "0") return false;
  if (s == "1") return true;
  fail_at(line, "status must be 0 or 1, found '" + s + "'");
}

void expect_header(const CsvRow& header, std::initializer_list<std::string_view> names) {
  std::size_t k = 0;
  for (auto name : names) {
    if (k >= header.fields.size() || header.fields[k] != name) {
      std::string expected;
      for (auto n : names) expected += (expected.empty() ? "" : ",") + std::string(n);
      fail_at(header.line, "header must start with " + expected);
    }
    ++k;
  }
}

Eigen::VectorXd read_covariates(const CsvRow& row, std::size_t first, const std::vector<std::string>& names) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(names.size()));
  for (std::size_t c = 0; c < names.size(); ++c) {
    x[static_cast<Eigen::Index>(c)] = parse_number(row.fields[first + c], row.line, names[c]);
  }
  return x;
}

Dataset parse_wide(const std::vector<CsvRow>& rows) {
  Dataset data;
  data.covariate_names.assign(rows[0].fields.begin() + 3, rows[0].fields.end());
  std::map<std::string, std::size_t> seen;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& row = rows[k];
    const double time = parse_number(row.fields[1], row.line, "time");
    if (!(time > 0.0)) fail_at(row.line, "time must be positive");
    if (!seen.emplace(row.fields[0], k).second) fail_at(row.line, "duplicate id '" + row.fields[0] + "'");
    data.ids.push_back(row.fields[0]);
    data.subjects.push_back(
        Subject{time, parse_status(row.fields[2], row.line), CovariatePath(read_covariates(row, 3, data.covariate_names))});
  }
  return data;
}

Dataset parse_long(const std::vector<CsvRow>& rows) {
  struct Segment {
    double start, stop;
    bool status;
    Eigen::VectorXd x;
    std::size_t line;
  };
  Dataset data;
  data.covariate_names.assign(rows[0].fields.begin() + 4, rows[0].fields.end());
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<Segment>> segments;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& row = rows[k];
    Segment seg{parse_number(row.fields[1], row.line, "start"), parse_number(row.fields[2], row.line, "stop"),
                parse_status(row.fields[3], row.line), read_covariates(row, 4, data.covariate_names), row.line};
    if (seg.start < 0.0) fail_at(row.line, "start must be nonnegative");
    if (!(seg.stop > seg.start)) fail_at(row.line, "stop must exceed start");
    auto [it, inserted] = index.emplace(row.fields[0], segments.size());
    if (inserted) {
      data.ids.push_back(row.fields[0]);
      segments.emplace_back();
    }
    segments[it->second].push_back(std::move(seg));
  }
  const Eigen::Index p = static_cast<Eigen::Index>(data.covariate_names.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    auto& segs = segments[i];
    std::stable_sort(segs.begin(), segs.end(), [](const Segment& a, const Segment& b) { return a.start < b.start; });
    if (segs.front().start != 0.0) fail_at(segs.front().line, "first segment of id '" + data.ids[i] + "' must start at 0");
    std::vector<double> breaks;
    RowMatrix values(static_cast<Eigen::Index>(segs.size()), p);
    for (std::size_t s = 0; s < segs.size(); ++s) {
      if (s > 0 && segs[s].start != segs[s - 1].stop) {
        fail_at(segs[s].line, "segments of id '" + data.ids[i] + "' must be contiguous");
      }
      if (s + 1 < segs.size() && segs[s].status) {
        fail_at(segs[s].line, "only the last segment of id '" + data.ids[i] + "' may carry status 1");
      }
      breaks.push_back(segs[s].start);
      values.row(static_cast<Eigen::Index>(s)) = segs[s].x.transpose();
    }
    data.subjects.push_back(Subject{segs.back().stop, segs.back().status, CovariatePath(std::move(breaks), std::move(values))});
  }
  return data;
}

void append(std::string& out, double x) { out += format_double(x); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

// ---------------------------------------------------------------------------
// Commands

struct Common {
  std::string out_dir = ".";
  std::uint64_t seed = 1;
  int quad_order = 40;
  double tol = 1e-6;
  int max_iter = 5000;
  std::string log_level = "info";

  [[nodiscard]] FitConfig fit_config(double xi, double r) const {
    FitConfig c;
    c.xi = xi;
    c.r = r;
    c.tol = tol;
    c.max_iter = max_iter;
    c.quad_order = quad_order;
    return c;
  }
};

void add_common(CLI::App* cmd, Common& c, bool fitting) {
  cmd->add_option("--out", c.out_dir, "Output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--log-level", c.log_level, "Warnings on stderr: info or quiet")
      ->check(CLI::IsMember({"info", "quiet"}))
      ->capture_default_str();
  if (fitting) {
    cmd->add_option("--quad-order", c.quad_order, "Gauss-Laguerre order")->check(CLI::Range(2, 400))->capture_default_str();
    cmd->add_option("--tol", c.tol, "Convergence tolerance")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--max-iter", c.max_iter, "Iteration cap")->check(CLI::PositiveNumber)->capture_default_str();
  }
}

struct Sources {
  std::vector<std::string> pred_paths;
  std::vector<std::string> model_paths;
  std::vector<std::int64_t> sizes;
  std::string atoms_path;

  [[nodiscard]] bool any() const { return !pred_paths.empty() || !model_paths.empty(); }
};

void add_sources(CLI::App* cmd, Sources& s) {
  cmd->add_option("--source-pred", s.pred_paths, "Source predictions CSV (id,time,surv); repeatable");
  cmd->add_option("--source-model", s.model_paths, "Source model JSON; repeatable");
  cmd->add_option("--source-n", s.sizes,
                  "Source sample sizes for pooling, prediction tables first then models, in flag order")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--atoms", s.atoms_path, "Custom pseudo-sample atoms CSV (id,time,weight,covariates)");
}

std::filesystem::path out_path(const Common& c, const std::string& name) {
  std::filesystem::path dir(c.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + c.out_dir + "': " + ec.message());
  return dir / name;
}

void log_warnings(const Common& c, std::ostream& err, const std::vector<std::string>& warnings) {
  if (c.log_level == "quiet") return;
  for (const auto& w : warnings) err << "warning: " << w << '\n';
}

PooledPredictor load_pooled(const Sources& s, const std::vector<std::string>& target_names) {
  std::vector<SourcePredictor> components;
  for (const auto& p : s.pred_paths) components.push_back(SourcePredictor{parse_prediction_csv(read_file(p)), 1});
  for (const auto& p : s.model_paths) {
    ExportedModel m = parse_model_json(read_file(p));
    const std::int64_t n = m.n;
    components.push_back(SourcePredictor{std::move(m), n});
  }
  if (!s.sizes.empty()) {
    if (s.sizes.size() != components.size()) {
      throw std::invalid_argument("--source-n needs one value per source");
    }
    for (std::size_t k = 0; k < components.size(); ++k) components[k].sample_size = s.sizes[k];
  }
  return PooledPredictor(std::move(components), target_names);
}

std::vector<PseudoSample> load_pseudo(const Sources& s, const Dataset& target) {
  const PooledPredictor pooled = load_pooled(s, target.covariate_names);
  if (s.atoms_path.empty()) return build_pseudo_samples(target, pooled);
  std::vector<std::string> names;
  const auto atoms = parse_atoms_csv(read_file(s.atoms_path), &names);
  if (names != target.covariate_names) throw DataError("atoms covariate columns must match the target's");
  return build_pseudo_samples(atoms, pooled);
}

Json aic_json(const AicResult& aic) {
  Json rows = Json::array();
  for (const auto& row : aic.table) {
    rows.push_back(Json{{"r", row.r}, {"log_likelihood", row.log_likelihood}, {"aic", row.aic}, {"converged", row.converged}});
  }
  return rows;
}

Json cv_json(const CvResult& cv) {
  Json rows = Json::array();
  for (const auto& row : cv.table) {
    Json folds = Json::array();
    for (double f : row.fold_scores) folds.push_back(std::isfinite(f) ? Json(f) : Json(nullptr));
    rows.push_back(Json{{"xi", row.xi}, {"score", std::isfinite(row.score) ? Json(row.score) : Json(nullptr)}, {"folds", folds}});
  }
  return rows;
}

std::vector<double> parse_grid_list(const std::vector<double>& given, const std::vector<double>& fallback) {
  return given.empty() ? fallback : given;
}

int cmd_fit(const Common& c, const std::string& target_path, const Sources& src, double xi, double r, bool cv,
            bool aic, const std::vector<double>& xi_grid, const std::vector<double>& r_grid, int folds,
            std::ostream& out, std::ostream& err) {
  const Dataset target = load_subjects_csv(target_path);
  std::vector<std::string> warnings;
  Json report;

  TuneGrid grid;
  grid.xi_values = parse_grid_list(xi_grid, grid.xi_values);
  grid.r_values = parse_grid_list(r_grid, grid.r_values);
  grid.folds = folds;
  grid.seed = c.seed;

  if (aic) {
    const AicResult sel = aic_select_r(target.subjects, grid, c.fit_config(0.0, r));
    r = sel.best_r;
    report["aic"] = aic_json(sel);
    warnings.insert(warnings.end(), sel.warnings.begin(), sel.warnings.end());
  }
  std::vector<PseudoSample> pseudo;
  if (src.any()) {
    pseudo = load_pseudo(src, target);
  } else if (cv || xi != 0.0) {
    throw std::invalid_argument("a positive --xi or --cv needs --source-pred or --source-model");
  }
  if (cv) {
    const CvResult sel = cv_select_xi(target.subjects, pseudo, grid, c.fit_config(0.0, r));
    xi = sel.best_xi;
    report["cv"] = cv_json(sel);
    warnings.insert(warnings.end(), sel.warnings.begin(), sel.warnings.end());
  }

  const FitResult res = fit(target.subjects, pseudo, c.fit_config(xi, r));
  warnings.insert(warnings.end(), res.warnings.begin(), res.warnings.end());
  const ExportedModel model =
      export_model(res.model, target.covariate_names, static_cast<std::int64_t>(target.size()));

  Json head;
  head["xi"] = xi;
  head["r"] = r;
  head["iterations"] = res.iterations;
  head["converged"] = res.converged;
  head["objective"] = res.objective_trace.empty() ? 0.0 : res.objective_trace.back();
  head["log_likelihood"] = log_likelihood(target.subjects, res.model);
  head["n"] = target.size();
  head["m"] = pseudo.size();
  head["warnings"] = warnings;
  for (auto& [k, v] : report.items()) head[k] = v;

  write_file_atomic(out_path(c, "model.json"), model_to_json(model));
  write_file_atomic(out_path(c, "report.json"), head.dump(2) + "\n");
  log_warnings(c, err, warnings);
  out << "fit: " << res.iterations << " iterations, converged=" << (res.converged ? "true" : "false")
      << ", xi=" << format_double(xi) << ", r=" << format_double(r) << '\n';
  return res.converged ? 0 : 3;
}

int cmd_predict(const Common& c, const std::string& model_path, const std::string& query_path, bool curve,
                std::ostream& out) {
  const ExportedModel model = parse_model_json(read_file(model_path));
  const QueryTable queries = parse_query_csv(read_file(query_path));
  const auto columns = resolve_covariates(model, queries.covariate_names);
  const TargetModel tm = model.to_model();

  std::string csv = "id,time,surv\n";
  auto emit = [&](const std::string& id, double t, const CovariatePath& path) {
    csv += csv_field(id);
    csv += ',';
    append(csv, t);
    csv += ',';
    append(csv, survival(tm, path, t));
    csv += '\n';
  };
  for (const auto& q : queries.rows) {
    const CovariatePath path = project_covariates(q.covariates, columns);
    if (!curve) {
      emit(q.id, q.time, path);
      continue;
    }
    emit(q.id, 0.0, path);
    for (double t : tm.intensity.times()) {
      if (t > q.time) break;
      emit(q.id, t, path);
    }
    const auto& jt = tm.intensity.times();
    if (q.time > 0.0 && !std::binary_search(jt.begin(), jt.end(), q.time)) {
      emit(q.id, q.time, path);
    }
  }
  write_file_atomic(out_path(c, "predictions.csv"), csv);
  out << "predict: " << queries.rows.size() << " queries\n";
  return 0;
}

struct SimFlags {
  std::string scenario = "SC1";
  std::string config_path;
  int reps = 100;
  int n_target = 100;
  int n_source = 1000;
  int n_validation = 10000;
  std::string shift = "none";
  bool mismatch = false;
  bool emit_data = false;
  std::string source_mode = "fitted";
};

ScenarioSpec scenario_from(const SimFlags& f, const Common& c) {
  ScenarioSpec spec;
  if (!f.config_path.empty()) spec = parse_scenario_json(read_file(f.config_path));
  else {
    spec.id = parse_scenario(f.scenario);
    spec.n_target = f.n_target;
    spec.n_source = f.n_source;
    spec.covariate_shift = parse_shift(f.shift);
    spec.covariate_mismatch = f.mismatch;
  }
  spec.seed = c.seed;
  return spec;
}

int cmd_simulate(const Common& c, const SimFlags& f, const std::vector<double>& xi_grid, std::ostream& out,
                 std::ostream& err) {
  const ScenarioSpec spec = scenario_from(f, c);
  if (f.emit_data) {
    write_file_atomic(out_path(c, "target.csv"), subjects_to_csv(gen_target(spec).data));
    write_file_atomic(out_path(c, "source.csv"), subjects_to_csv(gen_source(spec).data));
  }
  ReplicateOptions options;
  options.n_reps = f.reps;
  options.n_validation = f.n_validation;
  options.base = c.fit_config(0.0, 0.0);
  options.tune.xi_values = parse_grid_list(xi_grid, options.tune.xi_values);
  if (f.source_mode == "exact") options.source_mode = SourceMode::exact_truth;
  if (f.source_mode == "noise") options.source_mode = SourceMode::uniform_noise;
  const ReplicateTable table = run_replicates(spec, options);
  write_file_atomic(out_path(c, "metrics.csv"), metrics_to_csv(table.rows));
  write_file_atomic(out_path(c, "summary.csv"), summary_to_csv(summarize(table.rows)));
  log_warnings(c, err, table.warnings);
  out << "simulate: " << scenario_name(spec.id) << ", " << f.reps - table.failed << " of " << f.reps
      << " replicates\n";
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& model_path, const std::string& data_path,
                 const std::string& scenario, bool truth, std::optional<double> tau_flag, std::ostream& out,
                 std::ostream& err) {
  const Dataset data = load_subjects_csv(data_path);
  ValidationSet val{data.subjects, {}};
  std::string label = "data";
  if (!scenario.empty()) {
    ScenarioSpec spec;
    spec.id = parse_scenario(scenario);
    spec.covariate_mismatch = data.covariate_names.size() == 4;
    if (data.covariate_names.size() != (spec.covariate_mismatch ? 4u : 2u)) {
      throw DataError("scenario oracle needs 2 (or 4, mismatch mode) covariate columns");
    }
    val.oracle = target_oracle(spec);
    label = scenario_name(spec.id);
  }
  double tau = 0.0;
  if (tau_flag) {
    tau = *tau_flag;
  } else {
    for (const auto& s : data.subjects) tau = std::max(tau, s.time);
  }

  MetricSet m;
  std::string method;
  if (truth) {
    if (!val.oracle) throw std::invalid_argument("--truth needs --scenario");
    m = evaluate_metrics(FunctionPredictor(val.oracle), val, tau);
    method = "truth";
  } else {
    if (model_path.empty()) throw std::invalid_argument("evaluate needs --model or --truth");
    const ExportedModel model = parse_model_json(read_file(model_path));
    const auto columns = resolve_covariates(model, data.covariate_names);
    ValidationSet projected = val;
    for (auto& s : projected.subjects) s.covariates = project_covariates(s.covariates, columns);
    if (val.oracle && columns.size() != data.covariate_names.size()) {
      throw DataError("oracle metrics need a model over all covariates");
    }
    const TargetModel tm = model.to_model();
    m = evaluate_metrics(ModelPredictor(tm), projected, tau);
    method = "model";
  }
  std::vector<MetricRow> rows;
  for (auto [name, value] : {std::pair<const char*, double>{"l2d", m.l2d},
                             {"d_tau", m.d_tau},
                             {"c_index", m.c_index},
                             {"ibs", m.ibs},
                             {"rmst", m.rmst}}) {
    if (std::isnan(value)) continue;
    rows.push_back(MetricRow{0, label, method, name, value});
  }
  write_file_atomic(out_path(c, "metrics.csv"), metrics_to_csv(rows));
  if (m.censoring_floor_hit) log_warnings(c, err, {"censoring survival floor 1e-6 reached"});
  out << "evaluate: " << rows.size() << " metrics over " << data.size() << " subjects\n";
  return 0;
}

int cmd_cv(const Common& c, const std::string& target_path, const Sources& src, double r, bool aic,
           const std::vector<double>& xi_grid, const std::vector<double>& r_grid, int folds, std::ostream& out,
           std::ostream& err) {
  const Dataset target = load_subjects_csv(target_path);
  TuneGrid grid;
  grid.xi_values = parse_grid_list(xi_grid, grid.xi_values);
  grid.r_values = parse_grid_list(r_grid, grid.r_values);
  grid.folds = folds;
  grid.seed = c.seed;
  std::vector<std::string> warnings;
  if (aic) {
    const AicResult sel = aic_select_r(target.subjects, grid, c.fit_config(0.0, r));
    r = sel.best_r;
    std::string csv = "r,log_likelihood,aic,converged\n";
    for (const auto& row : sel.table) {
      csv += format_double(row.r) + "," + format_double(row.log_likelihood) + "," + format_double(row.aic) + "," +
             (row.converged ? "1" : "0") + "\n";
    }
    write_file_atomic(out_path(c, "aic.csv"), csv);
    warnings.insert(warnings.end(), sel.warnings.begin(), sel.warnings.end());
  }
  if (!src.any()) throw std::invalid_argument("cv needs --source-pred or --source-model");
  const auto pseudo = load_pseudo(src, target);
  const CvResult sel = cv_select_xi(target.subjects, pseudo, grid, c.fit_config(0.0, r));
  std::string csv = "xi,score";
  for (int k = 0; k < folds; ++k) csv += ",fold" + std::to_string(k + 1);
  csv += ",selected\n";
  for (const auto& row : sel.table) {
    csv += format_double(row.xi) + "," + format_double(row.score);
    for (double f : row.fold_scores) csv += "," + format_double(f);
    csv += row.xi == sel.best_xi ? ",1\n" : ",0\n";
  }
  write_file_atomic(out_path(c, "cv.csv"), csv);
  warnings.insert(warnings.end(), sel.warnings.begin(), sel.warnings.end());
  log_warnings(c, err, warnings);
  out << "cv: selected xi=" << format_double(sel.best_xi) << " at r=" << format_double(r) << '\n';
  return 0;
}

}  // namespace

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream o(tmp, std::ios::binary | std::ios::trunc);
    if (!o) throw DataError("cannot write '" + tmp.string() + "'");
    o.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!o.flush()) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw DataError("cannot rename into '" + path.string() + "': " + ec.message());
  }
}

Dataset parse_subjects_csv(std::string_view text) {
  const auto rows = read_csv(text);
  if (rows.size() < 2) throw DataError("empty input: no subject rows");
  const auto& header = rows.front();
  const bool long_format = header.fields.size() >= 2 && header.fields[1] == "start";
  if (long_format) {
    expect_header(header, {"id", "start", "stop", "status"});
    return parse_long(rows);
  }
  expect_header(header, {"id", "time", "status"});
  return parse_wide(rows);
}

Dataset load_subjects_csv(const std::filesystem::path& path) {
  try {
    return parse_subjects_csv(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string subjects_to_csv(const Dataset& data) {
  const bool fixed = std::all_of(data.subjects.begin(), data.subjects.end(),
                                 [](const Subject& s) { return s.covariates.time_fixed(); });
  std::string csv = fixed ? "id,time,status" : "id,start,stop,status";
  for (const auto& name : data.covariate_names) csv += "," + csv_field(name);
  csv += '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.subjects[i];
    const std::string id = i < data.ids.size() ? data.ids[i] : std::to_string(i + 1);
    const auto& breaks = s.covariates.breakpoints();
    for (std::size_t k = 0; k < breaks.size(); ++k) {
      const double stop = k + 1 < breaks.size() ? breaks[k + 1] : s.time;
      if (!fixed && breaks[k] >= s.time) break;
      csv += csv_field(id);
      if (!fixed) {
        csv += ',';
        append(csv, breaks[k]);
      }
      csv += ',';
      append(csv, fixed ? s.time : std::min(stop, s.time));
      csv += ',';
      const bool last = fixed || k + 1 == breaks.size() || breaks[k + 1] >= s.time;
      csv += last && s.event ? '1' : '0';
      for (Eigen::Index c = 0; c < s.covariates.dim(); ++c) {
        csv += ',';
        append(csv, s.covariates.values()(static_cast<Eigen::Index>(k), c));
      }
      csv += '\n';
      if (fixed) break;
    }
  }
  return csv;
}

PredictionTable parse_prediction_csv(std::string_view text) {
  const auto rows = read_csv(text);
  const auto& header = rows.front();
  expect_header(header, {"id", "time", "surv"});
  if (header.fields.size() > 4 || (header.fields.size() == 4 && header.fields[3] != "variance")) {
    fail_at(header.line, "prediction columns are id,time,surv[,variance]");
  }
  PredictionTable table;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& row = rows[k];
    const double t = parse_number(row.fields[1], row.line, "time");
    const double s = parse_number(row.fields[2], row.line, "surv");
    if (t < 0.0) fail_at(row.line, "time must be nonnegative");
    if (s < 0.0 || s > 1.0) fail_at(row.line, "surv must lie in [0, 1]");
    table.add(row.fields[0], t, s);
  }
  return table;
}

std::vector<CustomAtom> parse_atoms_csv(std::string_view text, std::vector<std::string>* covariate_names) {
  const auto rows = read_csv(text);
  expect_header(rows.front(), {"id", "time", "weight"});
  std::vector<std::string> names(rows.front().fields.begin() + 3, rows.front().fields.end());
  std::vector<CustomAtom> atoms;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& row = rows[k];
    CustomAtom a{row.fields[0], parse_number(row.fields[1], row.line, "time"),
                 CovariatePath(read_covariates(row, 3, names)), parse_number(row.fields[2], row.line, "weight")};
    if (!(a.time > 0.0)) fail_at(row.line, "time must be positive");
    if (a.weight < 0.0) fail_at(row.line, "weight must be nonnegative");
    atoms.push_back(std::move(a));
  }
  if (covariate_names) *covariate_names = std::move(names);
  return atoms;
}

QueryTable parse_query_csv(std::string_view text) {
  const auto rows = read_csv(text);
  expect_header(rows.front(), {"id", "time"});
  QueryTable table;
  table.covariate_names.assign(rows.front().fields.begin() + 2, rows.front().fields.end());
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& row = rows[k];
    const double t = parse_number(row.fields[1], row.line, "time");
    if (t < 0.0) fail_at(row.line, "time must be nonnegative");
    table.rows.push_back(Query{row.fields[0], t, CovariatePath(read_covariates(row, 2, table.covariate_names))});
  }
  return table;
}

ExportedModel parse_model_json(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError(std::string("model JSON: ") + e.what());
  }
  auto number = [](const Json& v, const std::string& what) {
    if (!v.is_number()) throw DataError("model JSON: '" + what + "' must be a number");
    return v.get<double>();
  };
  if (!j.is_object() || !j.contains("r") || !j.contains("beta") || !j.contains("lambda") || !j.contains("n")) {
    throw DataError("model JSON needs r, beta, lambda and n");
  }
  ExportedModel m;
  m.r = number(j["r"], "r");
  if (!(m.r >= 0.0)) throw DataError("model JSON: r must be nonnegative");
  if (!j["beta"].is_object()) throw DataError("model JSON: beta must be an object of name: value");
  m.beta.resize(static_cast<Eigen::Index>(j["beta"].size()));
  Eigen::Index k = 0;
  for (const auto& [name, value] : j["beta"].items()) {
    if (std::find(m.covariate_names.begin(), m.covariate_names.end(), name) != m.covariate_names.end()) {
      throw DataError("model JSON: duplicate covariate '" + name + "'");
    }
    m.covariate_names.push_back(name);
    m.beta[k++] = number(value, "beta." + name);
  }
  if (!j["lambda"].is_array()) throw DataError("model JSON: lambda must be an array");
  std::vector<double> times;
  std::vector<double> jumps;
  for (const auto& e : j["lambda"]) {
    if (!e.is_object() || !e.contains("t") || !e.contains("jump")) {
      throw DataError("model JSON: lambda entries need t and jump");
    }
    times.push_back(number(e["t"], "lambda.t"));
    jumps.push_back(number(e["jump"], "lambda.jump"));
  }
  m.intensity = StepIntensity(std::move(times), std::move(jumps));
  if (!j["n"].is_number_integer() || j["n"].get<std::int64_t>() <= 0) {
    throw DataError("model JSON: n must be a positive integer");
  }
  m.n = j["n"].get<std::int64_t>();
  return m;
}

std::string model_to_json(const ExportedModel& model) {
  Json j;
  j["r"] = model.r;
  Json beta = Json::object();
  for (std::size_t k = 0; k < model.covariate_names.size(); ++k) {
    beta[model.covariate_names[k]] = model.beta[static_cast<Eigen::Index>(k)];
  }
  j["beta"] = beta;
  Json lambda = Json::array();
  for (std::size_t l = 0; l < model.intensity.size(); ++l) {
    lambda.push_back(Json{{"t", model.intensity.times()[l]}, {"jump", model.intensity.jumps()[l]}});
  }
  j["lambda"] = lambda;
  j["n"] = model.n;
  return j.dump(2) + "\n";
}

ScenarioSpec parse_scenario_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("scenario JSON: ") + e.what());
  }
  ScenarioSpec spec;
  try {
    spec.id = parse_scenario(j.at("id").get<std::string>());
    spec.n_target = j.value("n_target", spec.n_target);
    spec.n_source = j.value("n_source", spec.n_source);
    spec.tau_target = j.value("tau_target", spec.tau_target);
    spec.tau_source = j.value("tau_source", spec.tau_source);
    spec.covariate_shift = parse_shift(j.value("covariate_shift", std::string("none")));
    spec.covariate_mismatch = j.value("covariate_mismatch", false);
    spec.seed = j.value("seed", spec.seed);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("scenario JSON: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("scenario JSON: ") + e.what());
  }
  if (spec.n_target < 1 || spec.n_source < 1 || !(spec.tau_target > 0) || !(spec.tau_source > 0)) {
    throw DataError("scenario JSON: sizes and durations must be positive");
  }
  return spec;
}

std::string metrics_to_csv(const std::vector<MetricRow>& rows) {
  std::string csv = "replicate,scenario,method,metric,value\n";
  for (const auto& row : rows) {
    csv += std::to_string(row.replicate) + "," + row.scenario + "," + row.method + "," + row.metric + ",";
    append(csv, row.value);
    csv += '\n';
  }
  return csv;
}

std::string summary_to_csv(const std::vector<MetricSummary>& rows) {
  std::string csv = "method,metric,median,mad,count\n";
  for (const auto& row : rows) {
    csv += row.method + "," + row.metric + ",";
    append(csv, row.median);
    csv += ',';
    append(csv, row.mad);
    csv += "," + std::to_string(row.count) + "\n";
  }
  return csv;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transfer-learning fits of transformation survival models"};
  app.require_subcommand(1);
  Common common;

  std::string target_path;
  std::string model_path;
  std::string query_path;
  std::string scenario;
  Sources sources;
  double xi = 0.0;
  double r = 0.0;
  bool cv = false;
  bool aic = false;
  bool curve = false;
  bool truth = false;
  std::optional<double> tau;
  int folds = 5;
  std::vector<double> xi_grid;
  std::vector<double> r_grid;
  SimFlags sim;

  auto* fit_cmd = app.add_subcommand("fit", "Fit a target model, optionally transferring from sources");
  fit_cmd->add_option("--target", target_path, "Target subjects CSV")->required();
  add_sources(fit_cmd, sources);
  fit_cmd->add_option("--xi", xi, "Penalty weight")->check(CLI::NonNegativeNumber)->capture_default_str();
  fit_cmd->add_option("--r", r, "Transformation index")->check(CLI::NonNegativeNumber)->capture_default_str();
  fit_cmd->add_flag("--cv", cv, "Select xi by cross-validation");
  fit_cmd->add_flag("--aic", aic, "Select r by AIC");
  fit_cmd->add_option("--xi-grid", xi_grid, "Candidate xi values")->check(CLI::NonNegativeNumber);
  fit_cmd->add_option("--r-grid", r_grid, "Candidate r values")->check(CLI::NonNegativeNumber);
  fit_cmd->add_option("--folds", folds, "Cross-validation folds")->check(CLI::Range(2, 1000))->capture_default_str();
  add_common(fit_cmd, common, true);

  auto* predict_cmd = app.add_subcommand("predict", "Survival predictions from a model JSON");
  predict_cmd->add_option("--model", model_path, "Model JSON")->required();
  predict_cmd->add_option("--query", query_path, "Query CSV (id,time,covariates)")->required();
  predict_cmd->add_flag("--curve", curve, "Emit the step curve on [0, time] per query");
  add_common(predict_cmd, common, false);

  auto* sim_cmd = app.add_subcommand("simulate", "Run simulation replicates of a scenario");
  sim_cmd->add_option("--scenario", sim.scenario, "SC1..SC5")->capture_default_str();
  sim_cmd->add_option("--config", sim.config_path, "Scenario JSON (overrides scenario flags)");
  sim_cmd->add_option("--reps", sim.reps, "Replicates")->check(CLI::PositiveNumber)->capture_default_str();
  sim_cmd->add_option("--n-target", sim.n_target, "Target sample size")->check(CLI::PositiveNumber)->capture_default_str();
  sim_cmd->add_option("--n-source", sim.n_source, "Source sample size")->check(CLI::PositiveNumber)->capture_default_str();
  sim_cmd->add_option("--n-validation", sim.n_validation, "Validation sample size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sim_cmd->add_option("--shift", sim.shift, "none, source-beta or validation-beta")->capture_default_str();
  sim_cmd->add_flag("--mismatch", sim.mismatch, "Four target covariates, two source covariates");
  sim_cmd->add_option("--source-mode", sim.source_mode, "fitted, exact or noise")
      ->check(CLI::IsMember({"fitted", "exact", "noise"}))
      ->capture_default_str();
  sim_cmd->add_option("--xi-grid", xi_grid, "Candidate xi values")->check(CLI::NonNegativeNumber);
  sim_cmd->add_flag("--emit-data", sim.emit_data, "Also write target.csv and source.csv for the seed");
  add_common(sim_cmd, common, true);

  auto* eval_cmd = app.add_subcommand("evaluate", "Prediction metrics of a model on a data set");
  eval_cmd->add_option("--model", model_path, "Model JSON");
  eval_cmd->add_option("--target", target_path, "Evaluation subjects CSV")->required();
  eval_cmd->add_option("--scenario", scenario, "Scenario whose true survival enables L2D and D_tau");
  eval_cmd->add_flag("--truth", truth, "Evaluate the scenario's true survival instead of a model");
  eval_cmd->add_option("--tau", tau, "Horizon (default: largest observed time)")->check(CLI::PositiveNumber);
  add_common(eval_cmd, common, false);

  auto* cv_cmd = app.add_subcommand("cv", "Cross-validation table for xi");
  cv_cmd->add_option("--target", target_path, "Target subjects CSV")->required();
  add_sources(cv_cmd, sources);
  cv_cmd->add_option("--r", r, "Transformation index")->check(CLI::NonNegativeNumber)->capture_default_str();
  cv_cmd->add_flag("--aic", aic, "Select r by AIC first");
  cv_cmd->add_option("--xi-grid", xi_grid, "Candidate xi values")->check(CLI::NonNegativeNumber);
  cv_cmd->add_option("--r-grid", r_grid, "Candidate r values")->check(CLI::NonNegativeNumber);
  cv_cmd->add_option("--folds", folds, "Folds")->check(CLI::Range(2, 1000))->capture_default_str();
  add_common(cv_cmd, common, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*fit_cmd) return cmd_fit(common, target_path, sources, xi, r, cv, aic, xi_grid, r_grid, folds, out, err);
    if (*predict_cmd) return cmd_predict(common, model_path, query_path, curve, out);
    if (*sim_cmd) return cmd_simulate(common, sim, xi_grid, out, err);
    if (*eval_cmd) return cmd_evaluate(common, model_path, target_path, scenario, truth, tau, out, err);
    if (*cv_cmd) return cmd_cv(common, target_path, sources, r, aic, xi_grid, r_grid, folds, out, err);
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::domain_error& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace potl
