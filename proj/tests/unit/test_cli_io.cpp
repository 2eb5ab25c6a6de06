#include "fixtures.hpp"

#include "potl/cli_io.hpp"
#include "potl/em_fitter.hpp"
#include "potl/errors.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <sstream>
#include <unistd.h>

using namespace potl;
namespace fs = std::filesystem;
using doctest::Approx;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("potl_unit_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  [[nodiscard]] std::string file(const std::string& name) const { return (path / name).string(); }
};

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "potl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string error_of(std::string_view text) {
  try {
    (void)parse_subjects_csv(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

void write_target(const std::string& path, int n, std::uint64_t seed) {
  ScenarioSpec spec;
  spec.seed = seed;
  spec.n_target = n;
  write_file_atomic(path, subjects_to_csv(gen_target(spec).data));
}

}  // namespace

TEST_CASE("subjects CSV parsing") {
  SUBCASE("minimal wide file") {
    const Dataset d = parse_subjects_csv("id,time,status,x1\na,1.5,1,0.2\nb,2,0,-1\n");
    REQUIRE(d.size() == 2);
    CHECK(d.ids == std::vector<std::string>{"a", "b"});
    CHECK(d.covariate_names == std::vector<std::string>{"x1"});
    CHECK(d.subjects[0].event);
    CHECK(d.subjects[1].time == 2.0);
    CHECK(d.subjects[1].covariates.values()(0, 0) == -1.0);
  }

  SUBCASE("long format builds a piecewise path") {
    const Dataset d = parse_subjects_csv(
        "id,start,stop,status,x1,x2\n"
        "a,0,1,0,0.5,1\n"
        "a,1,2.5,1,0.7,1\n"
        "b,0,3,0,0.1,0\n");
    REQUIRE(d.size() == 2);
    const auto& path = d.subjects[0].covariates;
    CHECK(path.segments() == 2);
    CHECK(path.breakpoints() == std::vector<double>{0.0, 1.0});
    CHECK(path.value_at(1.5)[0] == 0.7);
    CHECK(d.subjects[0].time == 2.5);
    CHECK(d.subjects[0].event);
    CHECK(d.subjects[1].covariates.segments() == 1);
  }

  SUBCASE("errors carry line numbers") {
    CHECK(error_of("") .find("empty input") != std::string::npos);
    CHECK(error_of("id,time,status,x1\n").find("empty input") != std::string::npos);
    CHECK(error_of("id,time,status,x1\na,1,1,0\nb,-2,0,1\n").find("line 3") != std::string::npos);
    CHECK(error_of("id,time,status,x1\na,1,2,0\n").find("line 2: status") != std::string::npos);
    CHECK(error_of("id,time,status,x1\na,1,1,0\nb,1,0\n").find("line 3: expected 4 fields") != std::string::npos);
    CHECK(error_of("id,time,status,x1\na,1,1,zz\n").find("line 2") != std::string::npos);
    CHECK(error_of("id,time,status,x1\na,1,1,0\na,2,1,0\n").find("duplicate id") != std::string::npos);
    CHECK(error_of("id,start,stop,status,x1\na,0,1,1,0\na,1,2,1,0\n").find("line 2") != std::string::npos);
    CHECK(error_of("id,start,stop,status,x1\na,0,1,0,0\na,1.5,2,1,0\n").find("contiguous") != std::string::npos);
    CHECK(error_of("time,id,status\n1,a,1\n").find("header") != std::string::npos);
  }

  SUBCASE("CSV round trip") {
    ScenarioSpec spec;
    const Dataset d = gen_target(spec).data;
    const std::string text = subjects_to_csv(d);
    const Dataset back = parse_subjects_csv(text);
    REQUIRE(back.size() == d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(back.subjects[i].time == d.subjects[i].time);
      CHECK(back.subjects[i].event == d.subjects[i].event);
      CHECK(back.subjects[i].covariates.values() == d.subjects[i].covariates.values());
    }
    CHECK(subjects_to_csv(back) == text);
  }
}

TEST_CASE("prediction, atoms and query CSVs") {
  const PredictionTable t = parse_prediction_csv("id,time,surv\na,1,0.8\na,0.5,0.9\nb,1,0.4\n");
  CHECK(t.lookup("a", 0.5) == 0.9);
  CHECK(t.lookup("b", 1.0) == 0.4);
  CHECK_THROWS_AS(parse_prediction_csv("id,time,surv\na,1,1.2\n"), DataError);
  CHECK_NOTHROW(parse_prediction_csv("id,time,surv,variance\na,1,0.5,0.01\n"));

  std::vector<std::string> names;
  const auto atoms = parse_atoms_csv("id,time,weight,x1,x2\nq,1.5,2,0.1,0.2\n", &names);
  REQUIRE(atoms.size() == 1);
  CHECK(atoms[0].weight == 2.0);
  CHECK(names == std::vector<std::string>{"x1", "x2"});
  CHECK_THROWS_AS(parse_atoms_csv("id,time,weight,x1\nq,0,1,0\n"), DataError);

  const QueryTable q = parse_query_csv("id,time,x1\na,0,1\nb,2.5,0\n");
  REQUIRE(q.rows.size() == 2);
  CHECK(q.covariate_names == std::vector<std::string>{"x1"});
  CHECK(q.rows[1].time == 2.5);
}

TEST_CASE("model JSON round trip is byte-identical") {
  const auto subjects = fixture::target_sample(80, 2);
  const FitResult res = fit(subjects, {}, FitConfig{.r = 0.5});
  const ExportedModel m = export_model(res.model, {"x1", "x2"}, 80);
  const std::string a = model_to_json(m);
  const ExportedModel back = parse_model_json(a);
  CHECK(model_to_json(back) == a);
  CHECK(back.beta == m.beta);
  CHECK(back.intensity.jumps() == m.intensity.jumps());
  CHECK(back.covariate_names == m.covariate_names);

  const auto j = nlohmann::json::parse(a);
  CHECK(j["r"] == 0.5);
  CHECK(j["beta"].contains("x2"));
  CHECK(j["lambda"][0].contains("jump"));
  CHECK(j["n"] == 80);

  CHECK_THROWS_AS(parse_model_json("{"), DataError);
  CHECK_THROWS_AS(parse_model_json(R"({"r":0,"beta":{},"lambda":[]})"), DataError);
  CHECK_THROWS_AS(parse_model_json(R"({"r":-1,"beta":{},"lambda":[],"n":1})"), DataError);
}

TEST_CASE("format_double round-trips") {
  for (double x : {0.1, 1.0 / 3.0, 1e-300, 123456.789, -2.5}) CHECK(std::stod(format_double(x)) == x);
  CHECK(format_double(std::nan("")) == "nan");
}

TEST_CASE("scenario JSON") {
  const ScenarioSpec s = parse_scenario_json(R"({"id":"SC4","n_target":50,"covariate_shift":"source-beta","seed":3})");
  CHECK(s.id == ScenarioId::SC4);
  CHECK(s.n_target == 50);
  CHECK(s.n_source == 1000);
  CHECK(s.covariate_shift == CovariateShift::source_beta);
  CHECK(s.seed == 3);
  CHECK_THROWS_AS(parse_scenario_json(R"({"id":"SC9"})"), DataError);
  CHECK_THROWS_AS(parse_scenario_json(R"({"id":"SC1","n_target":0})"), DataError);
}

TEST_CASE("cli fit and predict") {
  TempDir dir("fit");
  write_target(dir.file("target.csv"), 120, 5);

  SUBCASE("xi = 0 equals the target-only fit and predictions are valid") {
    REQUIRE(cli({"fit", "--target", dir.file("target.csv"), "--xi", "0", "--out", dir.file("a"), "--log-level", "quiet"})
                .code == 0);
    const ExportedModel m = parse_model_json(read_file(dir.file("a/model.json")));
    const Dataset data = load_subjects_csv(dir.file("target.csv"));
    const FitResult direct = fit(data.subjects, {}, FitConfig{});
    CHECK(m.beta == direct.model.beta);
    CHECK(m.intensity.jumps() == direct.model.intensity.jumps());
    const auto report = nlohmann::json::parse(read_file(dir.file("a/report.json")));
    CHECK(report["converged"] == true);

    std::string query = "id,time,x1,x2\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& x = data.subjects[i].covariates.values();
      query += data.ids[i] + "," + format_double(data.subjects[i].time) + "," + format_double(x(0, 0)) + "," +
               format_double(x(0, 1)) + "\n";
      query += data.ids[i] + "_0,0," + format_double(x(0, 0)) + "," + format_double(x(0, 1)) + "\n";
    }
    write_file_atomic(dir.file("query.csv"), query);
    REQUIRE(cli({"predict", "--model", dir.file("a/model.json"), "--query", dir.file("query.csv"), "--out",
                 dir.file("p")})
                .code == 0);
    const PredictionTable preds = parse_prediction_csv(read_file(dir.file("p/predictions.csv")));
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double s = preds.lookup(data.ids[i], data.subjects[i].time);
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
      CHECK(preds.lookup(data.ids[i] + "_0", 0.0) == 1.0);
    }
  }

  SUBCASE("predict with a proportional-odds export has the closed form") {
    ExportedModel m{1.0, {"x1"}, (Eigen::VectorXd(1) << 0.4).finished(), StepIntensity({1.0, 2.0}, {0.5, 0.7}), 10};
    write_file_atomic(dir.file("po.json"), model_to_json(m));
    write_file_atomic(dir.file("q.csv"), "id,time,x1,x9\na,2.5,1.0,7\n");
    REQUIRE(cli({"predict", "--model", dir.file("po.json"), "--query", dir.file("q.csv"), "--out", dir.file("po")}).code ==
            0);
    const PredictionTable preds = parse_prediction_csv(read_file(dir.file("po/predictions.csv")));
    const double a = 1.2 * std::exp(0.4);
    CHECK(preds.lookup("a", 2.5) == Approx(1.0 / (1.0 + a)).epsilon(1e-14));

    write_file_atomic(dir.file("bad.csv"), "id,time,z\na,1,0\n");
    CHECK(cli({"predict", "--model", dir.file("po.json"), "--query", dir.file("bad.csv"), "--out", dir.file("po")})
              .code == 2);
  }

  SUBCASE("transfer from a source model") {
    ScenarioSpec spec;
    const GeneratedStudy source = gen_source(spec);
    const FitResult sfit = fit(source.data.subjects, {}, FitConfig{});
    write_file_atomic(dir.file("source.json"), model_to_json(export_model(sfit.model, {"x1", "x2"}, 1000)));
    const CliRun run = cli({"fit", "--target", dir.file("target.csv"), "--source-model", dir.file("source.json"),
                            "--cv", "--xi-grid", "0", "0.5", "--out", dir.file("t"), "--log-level", "quiet"});
    REQUIRE(run.code == 0);
    const auto report = nlohmann::json::parse(read_file(dir.file("t/report.json")));
    CHECK(report["m"] == 120);
    CHECK(report.contains("cv"));
  }

  SUBCASE("exit codes") {
    CHECK(cli({"fit"}).code == 1);
    CHECK(cli({"bogus"}).code == 1);
    CHECK(cli({"fit", "--target", dir.file("missing.csv"), "--out", dir.file("x")}).code == 2);
    write_file_atomic(dir.file("ragged.csv"), "id,time,status,x1\na,1,1\n");
    const CliRun ragged = cli({"fit", "--target", dir.file("ragged.csv"), "--out", dir.file("x")});
    CHECK(ragged.code == 2);
    CHECK(ragged.err.find("line 2") != std::string::npos);
    const CliRun capped = cli({"fit", "--target", dir.file("target.csv"), "--r", "1", "--max-iter", "1", "--out",
                               dir.file("cap"), "--log-level", "quiet"});
    CHECK(capped.code == 3);
    CHECK(fs::exists(dir.file("cap/report.json")));
  }
}

TEST_CASE("cli simulate, evaluate and cv") {
  TempDir dir("sim");

  SUBCASE("simulate is byte-deterministic") {
    const std::vector<std::string> args{"simulate", "--scenario", "SC1", "--reps", "1", "--seed", "7",
                                        "--n-validation", "300", "--xi-grid", "0", "0.5", "--log-level", "quiet"};
    auto a = args;
    a.insert(a.end(), {"--out", dir.file("a")});
    auto b = args;
    b.insert(b.end(), {"--out", dir.file("b")});
    REQUIRE(cli(a).code == 0);
    REQUIRE(cli(b).code == 0);
    CHECK(read_file(dir.file("a/metrics.csv")) == read_file(dir.file("b/metrics.csv")));
    CHECK(read_file(dir.file("a/summary.csv")) == read_file(dir.file("b/summary.csv")));
    CHECK(read_file(dir.file("a/metrics.csv")).rfind("replicate,scenario,method,metric,value\n", 0) == 0);
  }

  SUBCASE("evaluate the truth gives zero L2D") {
    write_target(dir.file("val.csv"), 200, 3);
    REQUIRE(cli({"evaluate", "--truth", "--scenario", "SC1", "--target", dir.file("val.csv"), "--tau", "2", "--out",
                 dir.file("e"), "--log-level", "quiet"})
                .code == 0);
    const std::string csv = read_file(dir.file("e/metrics.csv"));
    CHECK(csv.find("l2d,0\n") != std::string::npos);
    CHECK(csv.find("d_tau,0\n") != std::string::npos);
  }

  SUBCASE("cv selects 0.5 with an exact source") {
    ScenarioSpec spec;
    spec.seed = 11;
    const GeneratedStudy target = gen_target(spec);
    write_file_atomic(dir.file("target.csv"), subjects_to_csv(target.data));
    std::string preds = "id,time,surv\n";
    for (std::size_t i = 0; i < target.data.size(); ++i) {
      const auto& s = target.data.subjects[i];
      preds += target.data.ids[i] + "," + format_double(s.time) + "," + format_double(target.oracle(s.time, s.covariates)) +
               "\n";
    }
    write_file_atomic(dir.file("truth.csv"), preds);
    REQUIRE(cli({"cv", "--target", dir.file("target.csv"), "--source-pred", dir.file("truth.csv"), "--xi-grid", "0",
                 "0.5", "--out", dir.file("cv"), "--log-level", "quiet"})
                .code == 0);
    const std::string table = read_file(dir.file("cv/cv.csv"));
    CHECK(table.rfind("xi,score,fold1,fold2,fold3,fold4,fold5,selected\n", 0) == 0);
    const auto last = table.find_last_of('\n', table.size() - 2);
    CHECK(table.substr(last + 1, 4) == "0.5,");
    CHECK(table.substr(table.size() - 3) == ",1\n");
  }
}

TEST_CASE("cli fit is consistent at large n") {
  TempDir dir("large");
  write_target(dir.file("target.csv"), 2000, 31);
  REQUIRE(cli({"fit", "--target", dir.file("target.csv"), "--xi", "0", "--out", dir.file("f"), "--log-level", "quiet"})
              .code == 0);
  const ExportedModel m = parse_model_json(read_file(dir.file("f/model.json")));

  // Monte Carlo spread of the estimator from independent replicates.
  Eigen::MatrixXd draws(20, 2);
  for (int k = 0; k < 20; ++k) {
    const FitResult res = fit(fixture::target_sample(2000, 500 + static_cast<std::uint64_t>(k)), {}, FitConfig{});
    draws.row(k) = res.model.beta.transpose();
  }
  const Eigen::RowVectorXd mean = draws.colwise().mean();
  const Eigen::RowVectorXd sd = ((draws.rowwise() - mean).array().square().colwise().sum() / 19.0).sqrt();
  CHECK(std::abs(m.beta[0] - 0.5) < 3.0 * sd[0]);
  CHECK(std::abs(m.beta[1] + 0.5) < 3.0 * sd[1]);
}
