#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iternas/cli.hpp"
#include "iternas/config.hpp"
#include "support/flat_cost_oracle.hpp"
#include "support/rank_correlation.hpp"
#include "support/test_spaces.hpp"

using namespace iternas;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("iternas_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
    ::unsetenv("ITERNAS_OUTPUT_DIR");
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

nlohmann::json reduced_space_json() {
  return {{"num_stages", 2},
          {"depth_min", 2},
          {"depth_max", 3},
          {"width_multipliers", {0.8, 1.5}},
          {"expansion_ratios", {0.20, 0.55}},
          {"stage_base_widths", {16, 32}},
          {"head_blocks", {{{"slot_id", 0}, {"role", "yolo_head"}, {"base_width", 16}}}},
          {"input_resolution", 64}};
}

nlohmann::json small_run_config(const fs::path& out_dir) {
  nlohmann::json j;
  j["space"] = reduced_space_json();
  j["hardware"] = "unconstrained";
  j["oracle"] = {{"kind", "synthetic_rugged"}, {"weight_seed", 5},
                 {"interaction_scale", 0.4},  {"coupling_scale", 0.8}};
  j["search"] = {{"population_size", 16}, {"generations_per_swap", 3},
                 {"max_module_swaps", 6},  {"patience_swaps", 6},
                 {"seed", 11}};
  j["output_dir"] = out_dir.string();
  return j;
}

fs::path write_config(const TempDir& tmp, const nlohmann::json& j, const std::string& name) {
  const fs::path p = tmp.path / name;
  std::ofstream out(p);
  out << j.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("run header echoes the reference search settings", "[cli]") {
  TempDir tmp;
  nlohmann::json j;
  j["space"] = reduced_space_json();
  j["oracle"] = {{"kind", "synthetic_linear"}, {"weight_seed", 2}};
  j["output_dir"] = (tmp.path / "run").string();
  // No "search" section: defaults must match the published settings.
  const fs::path cfg = write_config(tmp, j, "config.json");

  std::ostringstream out, err;
  REQUIRE(cli::run_search(cfg, std::nullopt, 1, out, err) == cli::exit_ok);

  std::istringstream lines(out.str());
  std::string header_line;
  std::getline(lines, header_line);
  const auto header = nlohmann::json::parse(header_line);
  REQUIRE(header.at("event") == "header");
  const auto& s = header.at("search");
  CHECK(s.at("population_size") == 100);
  CHECK(s.at("mutation_prob") == 0.1);
  CHECK(s.at("parent_ratio") == 0.25);
  CHECK(s.at("mutation_ratio") == 0.5);
  CHECK(s.at("passthrough_ratio") == 0.5);
  CHECK(s.at("generations_per_swap") == 10);
  CHECK(s.at("max_module_swaps") == 50);
}

TEST_CASE("inconsistent budgets exit distinctly with no output files", "[cli]") {
  TempDir tmp;
  auto j = small_run_config(tmp.path / "run");
  j["budgets"] = {{"total", {{"params", 1000}}},
                  {"backbone", {{"params", 800}}},
                  {"head", {{"params", 800}}}};
  const fs::path cfg = write_config(tmp, j, "config.json");
  std::ostringstream out, err;
  CHECK(cli::run_search(cfg, std::nullopt, 1, out, err) == cli::exit_budget);
  CHECK_FALSE(fs::exists(tmp.path / "run"));
  CHECK(err.str().find("budget") != std::string::npos);
}

TEST_CASE("config errors exit with the config code", "[cli]") {
  TempDir tmp;
  std::ostringstream out, err;
  SECTION("missing file") {
    CHECK(cli::run_search(tmp.path / "nope.json", std::nullopt, 1, out, err) ==
          cli::exit_config);
  }
  SECTION("unknown key") {
    auto j = small_run_config(tmp.path / "run");
    j["serach"] = nlohmann::json::object();
    const fs::path cfg = write_config(tmp, j, "config.json");
    CHECK(cli::run_search(cfg, std::nullopt, 1, out, err) == cli::exit_config);
  }
  SECTION("invalid search value") {
    auto j = small_run_config(tmp.path / "run");
    j["search"]["mutation_prob"] = 1.5;
    const fs::path cfg = write_config(tmp, j, "config.json");
    CHECK(cli::run_search(cfg, std::nullopt, 1, out, err) == cli::exit_config);
  }
}

TEST_CASE("unsatisfiable budgets exit with the infeasible code", "[cli]") {
  TempDir tmp;
  auto j = small_run_config(tmp.path / "run");
  j["budgets"] = {{"total", {{"params", 3}}},
                  {"backbone", {{"params", 1}}},
                  {"head", {{"params", 1}}}};
  j["search"]["resample_limit"] = 4;
  const fs::path cfg = write_config(tmp, j, "config.json");
  std::ostringstream out, err;
  CHECK(cli::run_search(cfg, std::nullopt, 1, out, err) == cli::exit_infeasible);
}

TEST_CASE("identical config and seed reproduce every output byte", "[cli]") {
  TempDir tmp;
  const fs::path dir_a = tmp.path / "a";
  const fs::path dir_b = tmp.path / "b";
  auto ja = small_run_config(dir_a);
  auto jb = small_run_config(dir_b);
  const fs::path cfg_a = write_config(tmp, ja, "a.json");
  const fs::path cfg_b = write_config(tmp, jb, "b.json");

  std::ostringstream out, err;
  REQUIRE(cli::run_search(cfg_a, std::nullopt, 1, out, err) == cli::exit_ok);
  REQUIRE(cli::run_search(cfg_b, std::nullopt, 4, out, err) == cli::exit_ok);

  for (const char* name : {"best_genome.txt", "history.jsonl", "evals.jsonl",
                           "calibration.csv"}) {
    INFO(name);
    CHECK(slurp(dir_a / name) == slurp(dir_b / name));
  }
}

TEST_CASE("the output dir environment override wins", "[cli]") {
  TempDir tmp;
  const fs::path override_dir = tmp.path / "override";
  auto j = small_run_config(tmp.path / "ignored");
  const fs::path cfg = write_config(tmp, j, "config.json");
  ::setenv("ITERNAS_OUTPUT_DIR", override_dir.string().c_str(), 1);
  std::ostringstream out, err;
  const int rc = cli::run_search(cfg, std::nullopt, 1, out, err);
  ::unsetenv("ITERNAS_OUTPUT_DIR");
  REQUIRE(rc == cli::exit_ok);
  CHECK(fs::exists(override_dir / "best_genome.txt"));
  CHECK_FALSE(fs::exists(tmp.path / "ignored"));
}

TEST_CASE("eval reports violations without gating the exit status", "[cli]") {
  TempDir tmp;
  nlohmann::json j;
  auto space = reduced_space_json();
  space["stage_base_widths"] = {1366, 32};
  j["space"] = space;
  j["hardware"] = "max78002";
  j["oracle"] = {{"kind", "synthetic_linear"}, {"weight_seed", 2}};
  j["output_dir"] = (tmp.path / "run").string();
  const fs::path cfg = write_config(tmp, j, "config.json");

  // width 1.5 * base 1366 = 2049 channels
  const fs::path genome_path = tmp.path / "genome.txt";
  {
    std::ofstream g(genome_path);
    g << "head.0.exp=0 head.0.width=0 stage.0.depth=2 stage.0.exp=0,0 stage.0.width=1 "
         "stage.1.depth=2 stage.1.exp=0,0 stage.1.width=0\n";
  }
  std::ostringstream out, err;
  REQUIRE(cli::run_eval(cfg, genome_path, out, err) == cli::exit_ok);
  const auto report = nlohmann::json::parse(out.str());
  bool found = false;
  for (const auto& v : report.at("violations"))
    if (v.at("constraint") == "max_channels" && v.at("limit") == 2048 && v.at("measured") == 2049)
      found = true;
  CHECK(found);
}

TEST_CASE("eval's parameter count matches the flat enumeration oracle", "[cli]") {
  TempDir tmp;
  auto j = small_run_config(tmp.path / "run");
  const fs::path cfg = write_config(tmp, j, "config.json");

  const SearchSpace space = testing::reduced_space();
  Genome minimal;
  minimal.backbone = {{2, 0, {0, 0}}, {2, 0, {0, 0}}};
  minimal.head = {{0, 0}};
  const fs::path genome_path = tmp.path / "genome.txt";
  {
    std::ofstream g(genome_path);
    g << genome_to_canonical_text(minimal) << "\n";
  }
  std::ostringstream out, err;
  REQUIRE(cli::run_eval(cfg, genome_path, out, err) == cli::exit_ok);
  const auto report = nlohmann::json::parse(out.str());
  CHECK(report.at("cost").at("total").at("params") ==
        testing::oracle_params(minimal, space));
}

TEST_CASE("eval distinguishes missing files from bad genomes", "[cli]") {
  TempDir tmp;
  auto j = small_run_config(tmp.path / "run");
  const fs::path cfg = write_config(tmp, j, "config.json");
  std::ostringstream out, err;
  CHECK(cli::run_eval(cfg, tmp.path / "absent.txt", out, err) == cli::exit_missing);

  const fs::path bad = tmp.path / "bad.txt";
  {
    std::ofstream g(bad);
    g << "stage.0.depth=2\n";
  }
  CHECK(cli::run_eval(cfg, bad, out, err) == cli::exit_config);
}

namespace {

EvalRecord oracle_record(const std::string& genome, std::int64_t params, double fitness) {
  EvalRecord r;
  r.canonical_genome = genome;
  r.fitness = fitness;
  r.source = FitnessSource::oracle;
  r.cost = {params, 0, 0};
  return r;
}

}  // namespace

TEST_CASE("pareto front follows the domination definition", "[cli]") {
  SECTION("dominated point drops") {
    const auto front = cli::pareto_front(
        {oracle_record("a", 10, 1.0), oracle_record("b", 20, 0.9)});
    REQUIRE(front.size() == 1);
    CHECK(front[0].genome == "a");
  }
  SECTION("mutually non-dominated points all stay") {
    const auto front =
        cli::pareto_front({oracle_record("a", 10, 0.5), oracle_record("b", 20, 0.8),
                           oracle_record("c", 30, 0.9)});
    REQUIRE(front.size() == 3);
    CHECK(front[0].params == 10);
    CHECK(front[2].params == 30);
  }
  SECTION("predictor records are ignored") {
    EvalRecord p = oracle_record("p", 1, 99.0);
    p.source = FitnessSource::predictor;
    const auto front = cli::pareto_front({p, oracle_record("a", 10, 1.0)});
    REQUIRE(front.size() == 1);
    CHECK(front[0].genome == "a");
  }
}

TEST_CASE("pareto front matches a quadratic domination oracle on random logs", "[cli]") {
  Rng rng(40);
  std::vector<EvalRecord> records;
  for (int i = 0; i < 1000; ++i)
    records.push_back(oracle_record("g" + std::to_string(i),
                                    static_cast<std::int64_t>(rng.uniform_index(500)) + 1,
                                    std::round(rng.uniform_real(0.0, 4.0) * 8.0) / 8.0));

  const auto front = cli::pareto_front(records);

  // O(n^2) reference: a point stays iff nothing dominates it.
  std::vector<const EvalRecord*> expected;
  for (const auto& a : records) {
    bool dominated = false;
    for (const auto& b : records) {
      if (b.cost.params <= a.cost.params && b.fitness >= a.fitness &&
          (b.cost.params < a.cost.params || b.fitness > a.fitness))
        dominated = true;
    }
    if (!dominated) expected.push_back(&a);
  }
  std::set<std::string> expected_names;
  for (const auto* e : expected) expected_names.insert(e->canonical_genome);
  std::set<std::string> got_names;
  for (const auto& p : front) got_names.insert(p.genome);
  CHECK(got_names == expected_names);
}

TEST_CASE("pareto command reads a log and emits quoted CSV", "[cli]") {
  TempDir tmp;
  const fs::path log = tmp.path / "evals.jsonl";
  {
    std::ofstream out(log, std::ios::binary);
    append_record(out, oracle_record("stage.0.exp=0,1 stage.0.width=0", 10, 1.0));
    append_record(out, oracle_record("stage.0.exp=1,1 stage.0.width=1", 20, 0.9));
  }
  std::ostringstream out, err;
  REQUIRE(cli::run_pareto(log, out, err) == cli::exit_ok);
  CHECK(out.str() == "params,fitness,genome\n10,1.0,\"stage.0.exp=0,1 stage.0.width=0\"\n");

  SECTION("missing log") {
    CHECK(cli::run_pareto(tmp.path / "none.jsonl", out, err) == cli::exit_missing);
  }
  SECTION("empty log") {
    const fs::path empty = tmp.path / "empty.jsonl";
    std::ofstream(empty).close();
    CHECK(cli::run_pareto(empty, out, err) == cli::exit_error);
    CHECK_FALSE(err.str().empty());
  }
}

TEST_CASE("report summarizes a run and cross-checks the rank statistic", "[cli]") {
  TempDir tmp;
  const fs::path run_dir = tmp.path / "run";

  SECTION("oracle-only run marks calibration absent") {
    auto j = small_run_config(run_dir);
    const fs::path cfg = write_config(tmp, j, "config.json");
    std::ostringstream out, err;
    REQUIRE(cli::run_search(cfg, std::nullopt, 1, out, err) == cli::exit_ok);
    std::ostringstream rout;
    REQUIRE(cli::run_report(run_dir, rout, err) == cli::exit_ok);
    const auto report = nlohmann::json::parse(rout.str());
    CHECK(report.at("calibration").is_null());
    const auto& curve = report.at("best_fitness_curve");
    REQUIRE(curve.size() >= 2);
    for (std::size_t i = 1; i < curve.size(); ++i)
      CHECK(curve[i].get<double>() >= curve[i - 1].get<double>());
    CHECK(report.at("predictor_records") == 0);
    CHECK(report.at("oracle_records") > 0);
  }

  SECTION("hybrid run reports a Spearman matching the reference statistic") {
    auto j = small_run_config(run_dir);
    j["predictor"] = {{"min_training_records", 30},
                      {"oracle_fraction", 0.25},
                      {"refresh_interval", 1}};
    j["search"]["max_module_swaps"] = 8;
    const fs::path cfg = write_config(tmp, j, "config.json");
    std::ostringstream out, err;
    REQUIRE(cli::run_search(cfg, std::nullopt, 1, out, err) == cli::exit_ok);

    std::ostringstream rout;
    REQUIRE(cli::run_report(run_dir, rout, err) == cli::exit_ok);
    const auto report = nlohmann::json::parse(rout.str());
    REQUIRE_FALSE(report.at("calibration").is_null());

    // Independent recomputation from calibration.csv.
    std::ifstream calib(run_dir / "calibration.csv");
    std::string line;
    std::getline(calib, line);  // header
    std::vector<double> predicted, truth;
    while (std::getline(calib, line)) {
      if (line.empty()) continue;
      const auto c1 = line.find(',');
      const auto c2 = line.find(',', c1 + 1);
      predicted.push_back(std::strtod(line.substr(0, c1).c_str(), nullptr));
      truth.push_back(std::strtod(line.substr(c1 + 1, c2 - c1 - 1).c_str(), nullptr));
    }
    REQUIRE(predicted.size() == report.at("calibration").at("pairs").get<std::size_t>());
    const double expected = testing::reference_spearman(predicted, truth);
    CHECK(std::fabs(report.at("calibration").at("spearman").get<double>() - expected) <= 1e-9);
  }

  SECTION("missing artifacts with the missing-artifact code") {
    std::ostringstream rout, err;
    CHECK(cli::run_report(tmp.path / "nothing", rout, err) == cli::exit_missing);
  }
}

TEST_CASE("an external-command oracle drives a full search deterministically", "[cli]") {
  TempDir tmp;
  const fs::path dir_a = tmp.path / "ext_a";
  const fs::path dir_b = tmp.path / "ext_b";

  // Deterministic stand-in evaluator: fitness = length of the canonical
  // genome text (favors deeper genomes), read from stdin per the protocol.
  auto make = [&](const fs::path& out_dir) {
    nlohmann::json j;
    j["space"] = reduced_space_json();
    j["oracle"] = {{"kind", "external_command"},
                   {"command", "read line; echo ${#line}"},
                   {"timeout_ms", 5000}};
    j["search"] = {{"seed", 3},       {"population_size", 8}, {"generations_per_swap", 2},
                   {"max_module_swaps", 2}, {"patience_swaps", 2}};
    j["output_dir"] = out_dir.string();
    return j;
  };
  const fs::path cfg_a = write_config(tmp, make(dir_a), "ext_a.json");
  const fs::path cfg_b = write_config(tmp, make(dir_b), "ext_b.json");

  std::ostringstream out, err;
  REQUIRE(cli::run_search(cfg_a, std::nullopt, 1, out, err) == cli::exit_ok);
  REQUIRE(cli::run_search(cfg_b, std::nullopt, 3, out, err) == cli::exit_ok);
  for (const char* name : {"best_genome.txt", "history.jsonl", "evals.jsonl"}) {
    INFO(name);
    CHECK(slurp(dir_a / name) == slurp(dir_b / name));
  }
  // Depth 3 on both stages maximizes text length; the winner must reflect it.
  const std::string best = slurp(dir_a / "best_genome.txt");
  CHECK(best.find("stage.0.depth=3") != std::string::npos);
  CHECK(best.find("stage.1.depth=3") != std::string::npos);
}

TEST_CASE("the installed binary wires the subcommands end to end", "[cli]") {
  TempDir tmp;
  const fs::path run_dir = tmp.path / "run";
  auto j = small_run_config(run_dir);
  const fs::path cfg = write_config(tmp, j, "config.json");

  const std::string cli_path = ITERNAS_CLI_PATH;
  REQUIRE(fs::exists(cli_path));

  auto run = [&](const std::string& args) {
    const std::string cmd = cli_path + " " + args + " > " + (tmp.path / "stdout").string() +
                            " 2> " + (tmp.path / "stderr").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };

  CHECK(run("search --config " + cfg.string() + " --seed 11 --jobs 2") == cli::exit_ok);
  CHECK(fs::exists(run_dir / "best_genome.txt"));
  CHECK(run("eval --config " + cfg.string() + " --genome " +
            (run_dir / "best_genome.txt").string()) == cli::exit_ok);
  CHECK(run("pareto --evals " + (run_dir / "evals.jsonl").string()) == cli::exit_ok);
  CHECK(run("report --dir " + run_dir.string()) == cli::exit_ok);
  CHECK(run("definitely-not-a-subcommand") != cli::exit_ok);
}
