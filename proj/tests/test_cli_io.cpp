#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "loop/cli.hpp"
#include "support.hpp"

using Catch::Approx;
using loop::ErrorKind;
namespace fs = std::filesystem;
using json = nlohmann::json;

#ifndef LOOP_CLI_PATH
#define LOOP_CLI_PATH "loop"
#endif
#ifndef LOOP_DATA_DIR
#define LOOP_DATA_DIR "data"
#endif

namespace {

const fs::path data_dir = LOOP_DATA_DIR;

loop::io::CsvTable csv(const std::string& text) {
  std::istringstream in(text);
  return loop::io::parse_csv(in);
}

loop::io::ExperimentColumns half() {
  loop::io::ExperimentColumns cols;
  cols.p = 0.5;
  return cols;
}

std::pair<ErrorKind, std::string> failure(const std::function<void()>& f) {
  try {
    f();
  } catch (const loop::Error& e) {
    return {e.kind(), e.what()};
  }
  FAIL("expected a loop::Error");
  return {ErrorKind::Io, ""};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Scratch {
  fs::path dir;
  Scratch() {
    dir = fs::temp_directory_path() / ("loop_cli_test_" + std::to_string(::getpid()) + "_" +
                                       std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(dir);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  fs::path file(const std::string& name, const std::string& content) const {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  }
};

struct Run {
  int code;
  std::string out, err;
};

Run run_cli(const Scratch& s, const std::string& args) {
  const auto out = s.dir / "stdout.txt", err = s.dir / "stderr.txt";
  const std::string cmd = std::string("\"") + LOOP_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

}  // namespace

TEST_CASE("reading experiments", "[io]") {
  SECTION("five-unit file") {
    const auto data = loop::io::read_experiment(data_dir / "five_units.csv", half());
    CHECK(data.exp.size() == 5);
    CHECK(data.exp.n_treated() == 2);
    CHECK(data.exp.y == std::vector<double>{3, 5, 1, 2, 3});
    CHECK(data.exp.n_covariates() == 0);
    CHECK(data.exp.p == std::vector<double>(5, 0.5));
  }
  SECTION("non-binary treatment names its row") {
    const auto [kind, msg] = failure([] { loop::io::read_experiment(csv("y,t\n1,0\n2,1\n3,2\n4,0\n"), half()); });
    CHECK(kind == ErrorKind::NonBinaryTreatment);
    CHECK(msg.find("row 3") != std::string::npos);
  }
  SECTION("probabilities must lie strictly inside (0,1)") {
    auto cols = half();
    cols.p.reset();
    cols.probability_column = "p";
    const auto [kind, msg] =
        failure([&] { loop::io::read_experiment(csv("y,t,p\n1,0,0.5\n2,1,1.0\n3,1,0.5\n"), cols); });
    CHECK(kind == ErrorKind::ProbabilityOutOfRange);
    CHECK(msg.find("row 2") != std::string::npos);
    auto constant = half();
    constant.p = 1.0;
    CHECK(failure([&] { loop::io::read_experiment(csv("y,t\n1,0\n"), constant); }).first ==
          ErrorKind::ProbabilityOutOfRange);
    const auto ok = loop::io::read_experiment(csv("y,t,p\n1,0,0.25\n2,1,0.75\n"), cols);
    CHECK(ok.exp.p == std::vector<double>{0.25, 0.75});
    CHECK(ok.covariates.empty());
  }
  SECTION("parse errors carry row and column") {
    const auto [kind, msg] = failure([] { loop::io::read_experiment(csv("y,t\n1,0\nabc,1\n"), half()); });
    CHECK(kind == ErrorKind::ParseError);
    CHECK(msg.find("row 2, column 'y'") != std::string::npos);
    CHECK(failure([] { csv("y,t\n1,0,3\n"); }).first == ErrorKind::ParseError);
    CHECK(failure([] { csv(""); }).first == ErrorKind::ParseError);
    CHECK(failure([] { csv("y,y\n1,2\n"); }).first == ErrorKind::ParseError);
  }
  SECTION("missing values list every offending row") {
    const auto [kind, msg] =
        failure([] { loop::io::read_experiment(csv("y,t,z\n1,0,1\n,1,2\n3,1,NA\n4,0,\n5,1,1\n"), half()); });
    CHECK(kind == ErrorKind::ParseError);
    CHECK(msg.find("rows 2, 3, 4") != std::string::npos);
  }
  SECTION("missing columns") {
    auto cols = half();
    cols.outcome = "response";
    CHECK(failure([&] { loop::io::read_experiment(csv("y,t\n1,0\n"), cols); }).first == ErrorKind::MissingColumn);
    cols = half();
    cols.covariates = std::vector<std::string>{"age"};
    CHECK(failure([&] { loop::io::read_experiment(csv("y,t\n1,0\n"), cols); }).first == ErrorKind::MissingColumn);
  }
  SECTION("covariates default to the remaining numeric columns") {
    const auto t = csv("name,y,t,a,b,block\nx,1,0,0.5,2,1\ny,2,1,1.5,3,1\n");
    auto cols = half();
    cols.label_columns = {"block"};
    const auto data = loop::io::read_experiment(t, cols);
    CHECK(data.covariates == std::vector<std::string>{"a", "b"});
    CHECK(data.exp.z(1, 0) == 1.5);
    CHECK(data.labels.at("block") == std::vector<std::int64_t>{1, 1});
    cols.covariates = std::vector<std::string>{"b"};
    CHECK(loop::io::read_experiment(t, cols).covariates == std::vector<std::string>{"b"});
  }
  SECTION("dialect details") {
    const auto t = csv("\xEF\xBB\xBFy,t,\"note, quoted\"\r\n1.5,0,\"a \"\"b\"\"\"\r\n\r\n+2e0, 1 ,c\r\n");
    CHECK(t.header == std::vector<std::string>{"y", "t", "note, quoted"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0][2] == "a \"b\"");
    const auto data = loop::io::read_experiment(t, half());
    CHECK(data.exp.y == std::vector<double>{1.5, 2.0});
    CHECK(data.exp.t == std::vector<std::uint8_t>{0, 1});
  }
  SECTION("potential-outcome tables") {
    const auto po =
        loop::io::read_table(loop::io::read_csv(data_dir / "eight_units.csv"), "y1", "y0", half());
    CHECK(po.size() == 8);
    CHECK(po.z.cols() == 1);
    CHECK(po.t[0] == 3.244);
    CHECK(po.c[0] == 2.058);
  }
}

TEST_CASE("numbers round-trip through text", "[io]") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  for (int k = 0; k < 1000; ++k) {
    const double v = normal(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
    CHECK(*loop::io::detail::to_number(loop::io::format_number(v)) == v);
  }
  CHECK(loop::io::format_number(2.0) == "2");
  CHECK(loop::io::csv_field("a,b") == "\"a,b\"");
}

TEST_CASE("outputs are atomic and roll back", "[io]") {
  Scratch s;
  loop::io::OutputSet out;
  out.write(s.dir / "a.txt", "alpha");
  out.write(s.dir / "b.txt", "beta");
  CHECK(slurp(s.dir / "a.txt") == "alpha");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(s.dir)) files += e.is_regular_file();
  CHECK(files == 2);
  CHECK_THROWS_AS(out.write(s.dir / "missing" / "c.txt", "x"), loop::Error);
  out.rollback();
  CHECK(!fs::exists(s.dir / "a.txt"));
  CHECK(!fs::exists(s.dir / "b.txt"));
}

TEST_CASE("configuration", "[io]") {
  using loop::cli::config_from_json;
  const auto cfg = config_from_json(
      loop::cli::json::parse(R"({"input": "x.csv", "p": 0.5, "imputer": "forest", "trees": 50, "per-unit": true,
                                  "covariates": ["a", "b"]})"),
      "estimate");
  CHECK(*cfg.input == "x.csv");
  CHECK(*cfg.p == 0.5);
  CHECK(cfg.trees == 50);
  CHECK(cfg.per_unit);
  CHECK(*cfg.covariates == std::vector<std::string>{"a", "b"});
  CHECK(cfg.ci_level == 0.95);

  auto kind = [](const std::string& text, const std::string& command) {
    return failure([&] { config_from_json(loop::cli::json::parse(text), command); }).first;
  };
  CHECK(kind(R"({"tres": 5})", "estimate") == ErrorKind::InvalidConfig);
  CHECK(kind(R"({"trees": "many"})", "estimate") == ErrorKind::InvalidConfig);
  CHECK(kind(R"({"trees": -1})", "estimate") == ErrorKind::InvalidConfig);
  CHECK(kind(R"({"reps": 5})", "estimate") == ErrorKind::InvalidConfig);
  CHECK(kind(R"({"command": "oracle"})", "estimate") == ErrorKind::InvalidConfig);
  CHECK(kind(R"({})", "plot") == ErrorKind::InvalidConfig);

  CHECK(loop::cli::coerce_flag("trees", {"12"}) == 12);
  CHECK(loop::cli::coerce_flag("values", {"1", "2.5"}) == loop::cli::json::array({1.0, 2.5}));
  CHECK(failure([] { loop::cli::coerce_flag("p", {"half"}); }).first == ErrorKind::InvalidConfig);
}

TEST_CASE("estimate command", "[cli]") {
  Scratch s;
  const auto input = (data_dir / "five_units.csv").string();
  SECTION("five-unit report") {
    const auto r = run_cli(s, "estimate --input \"" + input + "\" --p 0.5 --per-unit --output \"" +
                                  (s.dir / "r.json").string() + "\" --units-output \"" +
                                  (s.dir / "u.csv").string() + "\"");
    REQUIRE(r.code == 0);
    CHECK(r.out.rfind("tau_hat=2 ", 0) == 0);
    const auto report = json::parse(slurp(s.dir / "r.json"));
    CHECK(report["schema_version"] == 1);
    CHECK(report["seed"] == 0);
    CHECK(report["tau_hat"].get<double>() == Approx(2.0).epsilon(1e-14));
    CHECK(report["var_hat"].get<double>() == Approx(1.1 + 0.4 * std::sqrt(6.0)).epsilon(1e-12));
    CHECK(std::abs(report["var_hat"].get<double>() - 2.07980) < 5e-6);
    CHECK(report["m_t_hat"].get<double>() == Approx(4.0));
    CHECK(report["m_c_hat"].get<double>() == Approx(1.5));
    CHECK(report["caveats"].empty());

    // The per-unit CSV parses back into the JSON values.
    const auto units = loop::io::read_csv(s.dir / "u.csv");
    REQUIRE(units.rows.size() == 5);
    const auto col = units.require("tau_hat");
    for (std::size_t i = 0; i < 5; ++i)
      CHECK(*loop::io::detail::to_number(units.rows[i][col]) == report["tau_units"][i].get<double>());
  }
  SECTION("config file matches flags, and flags override it") {
    const auto config = s.file("cfg.json", "{\"input\": " + json(input).dump() + ", \"p\": 0.5, \"ci-level\": 0.9}");
    const auto a = run_cli(s, "estimate --config \"" + config.string() + "\"");
    const auto b = run_cli(s, "estimate --input \"" + input + "\" --p 0.5 --ci-level 0.9");
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    const auto c = run_cli(s, "estimate --config \"" + config.string() + "\" --ci-level 0.8");
    CHECK(json::parse(c.out)["ci"]["level"] == 0.8);
  }
  SECTION("reports are reproducible") {
    const std::string args = "estimate --input \"" + (data_dir / "experiment.csv").string() +
                             "\" --p 0.5 --imputer forest --trees 60 --seed 3 --strata-column stratum";
    const auto a = run_cli(s, args);
    const auto b = run_cli(s, args + " --threads 1");
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(json::parse(a.out)["covariates"] == json::array({"age", "income"}));
    CHECK(json::parse(a.out)["seed"] == 3);
  }
  SECTION("dependent designs get random drop") {
    const auto r = run_cli(s, "estimate --input \"" + (data_dir / "experiment.csv").string() +
                                  "\" --p 0.5 --design complete --covariates age,income");
    REQUIRE(r.code == 0);
    const auto report = json::parse(r.out);
    CHECK(report["random_drop"]["mode"] == "expectation");
    CHECK(report["design"] == "complete");
    const auto off = run_cli(s, "estimate --input \"" + (data_dir / "experiment.csv").string() +
                                    "\" --p 0.5 --design complete --random-drop none");
    const auto caveats = json::parse(off.out)["caveats"];
    CHECK(std::find(caveats.begin(), caveats.end(), "dependent_design_without_random_drop") != caveats.end());
  }
  SECTION("non-constant probabilities suppress the variance and say so") {
    const auto in = s.file("np.csv", "y,t,p\n1,1,0.5\n2,1,0.4\n3,0,0.5\n4,0,0.5\n5,1,0.5\n0,0,0.5\n");
    const auto r = run_cli(s, "estimate --input \"" + in.string() + "\" --probability-column p");
    REQUIRE(r.code == 0);
    const auto report = json::parse(r.out);
    CHECK(report["var_hat"].is_null());
    CHECK(report["caveats"] == json::array({"variance_unavailable_nonconstant_p"}));
  }
  SECTION("failures") {
    const auto bad = s.file("bad.csv", "y,t\n1,0\n2,1\n3,2\n4,0\n");
    auto r = run_cli(s, "estimate --input \"" + bad.string() + "\" --p 0.5");
    CHECK(r.code == 2);
    const auto err = json::parse(r.err);
    CHECK(err["error"]["kind"] == "NonBinaryTreatment");
    CHECK(err["error"]["exit_code"] == 2);
    CHECK(err["error"]["message"].get<std::string>().find("row 3") != std::string::npos);

    CHECK(run_cli(s, "estimate --input \"" + input + "\" --p 1.0").code == 2);
    CHECK(run_cli(s, "estimate --input \"" + input + "\" --p 0.5 --imputer magic").code == 2);
    CHECK(run_cli(s, "estimate --input \"" + input + "\" --p 0.5 --trees x").code == 2);
    CHECK(run_cli(s, "estimate --input \"" + input + "\" --p 0.5 --no-such-flag").code == 2);
    CHECK(run_cli(s, "estimate --input \"" + (s.dir / "absent.csv").string() + "\" --p 0.5").code == 3);

    // The units file is written first; the report path is unwritable, so both disappear.
    r = run_cli(s, "estimate --input \"" + input + "\" --p 0.5 --units-output \"" + (s.dir / "u.csv").string() +
                       "\" --output \"" + (s.dir / "nope" / "r.json").string() + "\"");
    CHECK(r.code == 3);
    CHECK(json::parse(r.err)["error"]["kind"] == "Io");
    CHECK(!fs::exists(s.dir / "u.csv"));
  }
}

TEST_CASE("simulate command", "[cli]") {
  Scratch s;
  fs::create_directories(s.dir / "a");
  fs::create_directories(s.dir / "b");
  const auto a = run_cli(s, "simulate --sim 1 --reps 1000 --seed 7 --out-dir \"" + (s.dir / "a").string() + "\"");
  const auto b = run_cli(s, "simulate --sim 1 --reps 1000 --seed 7 --out-dir \"" + (s.dir / "b").string() + "\"");
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(slurp(s.dir / "a" / "sim1.csv") == slurp(s.dir / "b" / "sim1.csv"));
  CHECK(slurp(s.dir / "a" / "sim1.json") == slurp(s.dir / "b" / "sim1.json"));
  CHECK(!slurp(s.dir / "a" / "sim1.csv").empty());

  // CSV values equal the JSON summary.
  const auto table = loop::io::read_csv(s.dir / "a" / "sim1.csv");
  const auto doc = json::parse(slurp(s.dir / "a" / "sim1.json"));
  REQUIRE(table.rows.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto& est = doc["summary"]["estimators"][e];
    CHECK(table.rows[e][table.require("estimator")] == est["name"].get<std::string>());
    for (const char* field : {"bias", "true_se", "mean_nominal_se", "bias_mc_se"})
      CHECK(*loop::io::detail::to_number(table.rows[e][table.require(field)]) == est[field].get<double>());
  }
  CHECK(doc["seed"] == 7);

  const auto sweep = run_cli(s, "simulate --sim 2 --sweep c --values 1,3 --trials 10 --n-units 40 --k 3 --trees 20 "
                                "--out-dir \"" + (s.dir / "a").string() + "\"");
  REQUIRE(sweep.code == 0);
  const auto sweep_csv = loop::io::read_csv(s.dir / "a" / "sim2_c.csv");
  CHECK(sweep_csv.rows.size() == 6);
  const auto sweep_doc = json::parse(slurp(s.dir / "a" / "sim2_c.json"));
  CHECK(*loop::io::detail::to_number(sweep_csv.rows[4][sweep_csv.require("relative_true_se")]) ==
        sweep_doc["points"][1]["relative_true_se"][1].get<double>());
  const auto svg = slurp(s.dir / "a" / "sim2_c.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("signal strength c") != std::string::npos);

  CHECK(run_cli(s, "simulate --sim 3").code == 2);
  CHECK(run_cli(s, "simulate --sim 2 --values 1,2").code == 2);
}

TEST_CASE("oracle command", "[cli]") {
  Scratch s;
  const auto r = run_cli(s, "oracle --input \"" + (data_dir / "eight_units.csv").string() +
                                "\" --p 0.5 --imputers mean,ols --output \"" + (s.dir / "o.csv").string() +
                                "\" --units-output \"" + (s.dir / "u.csv").string() + "\"");
  REQUIRE(r.code == 0);
  const auto table = loop::io::read_csv(s.dir / "o.csv");
  REQUIRE(table.rows.size() == 2);
  const auto po = loop::io::read_table(loop::io::read_csv(data_dir / "eight_units.csv"), "y1", "y0", half());
  for (const auto& row : table.rows) {
    const double exact = *loop::io::detail::to_number(row[table.require("exact_mean_tau_hat")]);
    const double tau_bar = *loop::io::detail::to_number(row[table.require("tau_bar")]);
    CHECK(exact == Approx(tau_bar).margin(1e-12));
    CHECK(tau_bar == po.tau_bar());
    CHECK(row[table.require("support_size")] == "256");
  }
  CHECK(loop::io::read_csv(s.dir / "u.csv").rows.size() == 16);

  // Complete randomization takes n = pN and enumerates every drop.
  const auto complete = run_cli(s, "oracle --input \"" + (data_dir / "eight_units.csv").string() +
                                       "\" --p 0.5 --design complete --imputers ols --output \"" +
                                       (s.dir / "c.csv").string() + "\"");
  REQUIRE(complete.code == 0);
  const auto ct = loop::io::read_csv(s.dir / "c.csv");
  CHECK(ct.rows[0][ct.require("imputer")] == "ols+drop(exhaustive)");
  CHECK(ct.rows[0][ct.require("support_size")] == "70");
  CHECK(std::abs(*loop::io::detail::to_number(ct.rows[0][ct.require("exact_bias")])) < 1e-12);

  const auto undefined = run_cli(s, "oracle --input \"" + (data_dir / "eight_units.csv").string() +
                                        "\" --p 0.5 --imputers mean --empty-arm error --output \"" +
                                        (s.dir / "x.csv").string() + "\"");
  CHECK(undefined.code == 3);
  CHECK(json::parse(undefined.err)["error"]["kind"] == "UndefinedOnAssignment");
  CHECK(!fs::exists(s.dir / "x.csv"));
}
