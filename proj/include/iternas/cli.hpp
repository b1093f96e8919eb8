#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iternas/config.hpp"
#include "iternas/controller.hpp"
#include "iternas/cost_model.hpp"
#include "iternas/errors.hpp"
#include "iternas/evaluator.hpp"
#include "iternas/predictor.hpp"
#include "iternas/search_space.hpp"

namespace iternas::cli {

// Documented exit codes.
constexpr int exit_ok = 0;
constexpr int exit_error = 1;       // generic failure / empty input
constexpr int exit_config = 2;      // config or genome parse/validation error
constexpr int exit_budget = 3;      // tau_backbone + tau_head > tau_total
constexpr int exit_infeasible = 4;  // budgets unsatisfiable over the space
constexpr int exit_missing = 5;     // missing file or artifact

namespace detail {

inline std::string module_string(ModuleKind m) { return module_name(m); }

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  out += '"';
  return out;
}

/// Shortest round-trip decimal text for a double (JSON number grammar).
inline std::string number_text(double x) { return nlohmann::json(x).dump(); }

}  // namespace detail

inline nlohmann::ordered_json scored_genome_to_json(const ScoredGenome& g) {
  nlohmann::ordered_json j;
  j["genome"] = g.canonical_text;
  j["fitness"] = g.fitness;
  j["params"] = g.cost.total.params;
  j["act_bytes"] = g.cost.total.activation_bytes;
  j["layers"] = g.cost.total.primal_layers;
  j["ctx"] = iternas::detail::hex16(g.context_hash);
  j["source"] = fitness_source_name(g.source);
  return j;
}

inline std::string swap_record_to_json_line(const SwapRecord& r) {
  nlohmann::ordered_json j;
  j["swap"] = r.swap_index;
  j["module"] = detail::module_string(r.module);
  j["best"] = scored_genome_to_json(r.best);
  j["swap_winner_fitness"] = r.swap_winner_fitness;
  j["generations"] = r.generations_run;
  j["evals"] = r.evaluations_used;
  j["pass_elites"] = r.pass_elites;
  j["pass_fresh"] = r.pass_fresh;
  j["buffer_before"] = static_cast<std::int64_t>(r.buffer_size_before);
  return j.dump();
}

/// Ranks with ties averaged (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation (average ranks, Pearson over ranks).
/// Returns 0 when either input has zero rank variance.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return 0.0;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - ma;
    const double db = rb[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

struct ParetoPoint {
  std::int64_t params = 0;
  double fitness = 0.0;
  std::string genome;
};

/// Non-dominated set under (maximize fitness, minimize params) over
/// oracle-sourced records, deduplicated by genome. Sorted by params
/// ascending.
inline std::vector<ParetoPoint> pareto_front(const std::vector<EvalRecord>& records) {
  std::vector<ParetoPoint> points;
  {
    std::set<std::string> seen;
    for (const auto& r : records) {
      if (r.source != FitnessSource::oracle) continue;
      if (!seen.insert(r.canonical_genome).second) continue;
      points.push_back({r.cost.params, r.fitness, r.canonical_genome});
    }
  }
  std::sort(points.begin(), points.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
    if (a.params != b.params) return a.params < b.params;
    if (a.fitness != b.fitness) return a.fitness > b.fitness;
    return a.genome < b.genome;
  });
  std::vector<ParetoPoint> front;
  double best_fitness = -std::numeric_limits<double>::infinity();
  std::int64_t best_fitness_params = 0;
  for (const auto& p : points) {
    if (p.fitness > best_fitness) {
      best_fitness = p.fitness;
      best_fitness_params = p.params;
      front.push_back(p);
    } else if (p.fitness == best_fitness && p.params == best_fitness_params) {
      front.push_back(p);  // identical objectives: mutually non-dominated
    }
  }
  return front;
}

/// `search --config PATH [--seed N] [--jobs K]`: runs the iterative search
/// and writes best_genome.txt, history.jsonl, evals.jsonl, calibration.csv
/// and run_meta.json under output_dir. Timestamps live only in
/// run_meta.json; everything else is a pure function of (config, seed).
inline int run_search(const std::filesystem::path& config_path,
                      std::optional<std::uint64_t> seed_override, int jobs, std::ostream& out,
                      std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const BudgetError& e) {
    err << "budget error: " << e.what() << "\n";
    return exit_budget;
  } catch (const Error& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  }
  if (seed_override) cfg.search.seed = *seed_override;
  if (const char* env_dir = std::getenv("ITERNAS_OUTPUT_DIR")) cfg.output_dir = env_dir;

  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec) {
    err << "cannot create output dir '" << cfg.output_dir.string() << "': " << ec.message()
        << "\n";
    return exit_error;
  }

  std::ofstream evals(cfg.output_dir / "evals.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream history(cfg.output_dir / "history.jsonl", std::ios::binary | std::ios::trunc);
  if (!evals || !history) {
    err << "cannot open output files under '" << cfg.output_dir.string() << "'\n";
    return exit_error;
  }

  HybridFitness scorer(make_oracle(cfg.oracle, cfg.space), cfg.space, cfg.predictor,
                       cfg.search.seed, jobs,
                       [&evals](const EvalRecord& r) { append_record(evals, r); });

  {
    nlohmann::ordered_json header;
    header["event"] = "header";
    header["config"] = config_path.string();
    header["search"] = search_config_to_json(cfg.search);
    header["jobs"] = jobs;
    out << header.dump() << "\n";
  }

  const auto wall_start = std::chrono::steady_clock::now();
  const auto started_at = std::chrono::system_clock::now();
  SearchResult result;
  try {
    result = run_iterative_search(cfg.search, cfg.space, cfg.hardware, cfg.budgets, scorer,
                                  [&history](const SwapRecord& r) {
                                    history << swap_record_to_json_line(r) << '\n';
                                  });
  } catch (const InfeasibleSpaceError& e) {
    err << "infeasible space: " << e.what() << "\n";
    return exit_infeasible;
  } catch (const BudgetError& e) {
    err << "budget error: " << e.what() << "\n";
    return exit_budget;
  } catch (const Error& e) {
    err << "search failed: " << e.what() << "\n";
    return exit_error;
  }
  const double wall_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();

  {
    std::ofstream best(cfg.output_dir / "best_genome.txt", std::ios::binary | std::ios::trunc);
    best << result.best.canonical_text << "\n";
  }
  {
    std::ofstream calib(cfg.output_dir / "calibration.csv", std::ios::binary | std::ios::trunc);
    calib << "predicted,true,swap,generation\n";
    for (const auto& row : scorer.calibration())
      calib << detail::number_text(row.predicted) << ',' << detail::number_text(row.truth) << ','
            << row.swap << ',' << row.gen << '\n';
  }
  {
    // The only artifact holding timestamps; keeps the rest byte-stable.
    nlohmann::ordered_json meta;
    meta["started_at_unix"] =
        std::chrono::duration_cast<std::chrono::seconds>(started_at.time_since_epoch()).count();
    meta["wall_time_s"] = wall_s;
    meta["jobs"] = jobs;
    meta["seed"] = cfg.search.seed;
    meta["oracle_calls"] = result.oracle_calls;
    meta["scoring_events"] = scorer.scoring_events();
    meta["swaps_run"] = result.history.size();
    std::ofstream metaf(cfg.output_dir / "run_meta.json", std::ios::binary | std::ios::trunc);
    metaf << meta.dump(2) << "\n";
  }

  nlohmann::ordered_json summary;
  summary["event"] = "summary";
  summary["best_fitness"] = result.best.fitness;
  summary["oracle_calls"] = result.oracle_calls;
  summary["swaps"] = result.history.size();
  summary["wall_time_s"] = wall_s;
  out << summary.dump() << "\n";
  return exit_ok;
}

/// `eval --config PATH --genome PATH`: prints the cost report, budget
/// pass/fail and oracle fitness as JSON. Violations are reported, not
/// gated: the exit status stays 0.
inline int run_eval(const std::filesystem::path& config_path,
                    const std::filesystem::path& genome_path, std::ostream& out,
                    std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const BudgetError& e) {
    err << "budget error: " << e.what() << "\n";
    return exit_budget;
  } catch (const Error& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  }
  std::ifstream in(genome_path, std::ios::binary);
  if (!in) {
    err << "genome file not found: '" << genome_path.string() << "'\n";
    return exit_missing;
  }
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Genome genome;
  try {
    genome = genome_from_canonical_text(text, cfg.space);
  } catch (const Error& e) {
    err << "genome error: " << e.what() << "\n";
    return exit_config;
  }

  const CostReport report = genome_cost(genome, cfg.space, cfg.hardware);
  const std::string canonical = genome_to_canonical_text(genome);
  const auto oracle = make_oracle(cfg.oracle, cfg.space);
  double fitness = 0.0;
  try {
    fitness = oracle(genome, canonical, context_digest(genome, ModuleKind::backbone));
  } catch (const OracleError& e) {
    err << "oracle error: " << e.what() << "\n";
    return exit_error;
  }

  auto vec_json = [](const CostVector& v) {
    nlohmann::ordered_json j;
    j["params"] = v.params;
    j["act_bytes"] = v.activation_bytes;
    j["layers"] = v.primal_layers;
    return j;
  };
  nlohmann::ordered_json j;
  j["genome"] = canonical;
  j["cost"] = {{"backbone", vec_json(report.backbone)},
               {"head", vec_json(report.head)},
               {"total", vec_json(report.total)}};
  j["violations"] = nlohmann::json::array();
  for (const auto& v : report.violations)
    j["violations"].push_back(
        {{"constraint", v.constraint}, {"limit", v.limit}, {"measured", v.measured}});
  j["budget"] = {{"backbone_ok", is_feasible(report, cfg.budgets, BudgetScope::backbone)},
                 {"head_ok", is_feasible(report, cfg.budgets, BudgetScope::head)},
                 {"total_ok", is_feasible(report, cfg.budgets, BudgetScope::both)}};
  j["fitness"] = fitness;
  out << j.dump(2) << "\n";
  return exit_ok;
}

/// `pareto --evals PATH`: CSV of the non-dominated (params, fitness) set
/// over oracle-sourced records, params ascending.
inline int run_pareto(const std::filesystem::path& evals_path, std::ostream& out,
                      std::ostream& err) {
  if (!std::filesystem::exists(evals_path)) {
    err << "evaluation log not found: '" << evals_path.string() << "'\n";
    return exit_missing;
  }
  std::vector<EvalRecord> records;
  try {
    records = load_records(evals_path);
  } catch (const Error& e) {
    err << "cannot load records: " << e.what() << "\n";
    return exit_config;
  }
  const auto front = pareto_front(records);
  if (front.empty()) {
    err << "no oracle-sourced records in '" << evals_path.string() << "'\n";
    return exit_error;
  }
  out << "params,fitness,genome\n";
  for (const auto& p : front)
    out << p.params << ',' << detail::number_text(p.fitness) << ',' << detail::csv_quote(p.genome)
        << "\n";
  return exit_ok;
}

namespace detail {

struct HistoryLine {
  int swap = 0;
  double best_fitness = 0.0;
};

inline std::vector<HistoryLine> load_history(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open history '" + path.string() + "'");
  std::vector<HistoryLine> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      lines.push_back({j.at("swap").get<int>(), j.at("best").at("fitness").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad history line: ") + e.what(), line_no);
    }
  }
  return lines;
}

struct Calibration {
  std::vector<double> predicted;
  std::vector<double> truth;
};

inline std::optional<Calibration> load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::string line;
  if (!std::getline(in, line)) return std::nullopt;  // empty file
  Calibration c;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t c1 = line.find(',');
    const std::size_t c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) continue;
    c.predicted.push_back(std::strtod(line.substr(0, c1).c_str(), nullptr));
    c.truth.push_back(std::strtod(line.substr(c1 + 1, c2 - c1 - 1).c_str(), nullptr));
  }
  if (c.predicted.empty()) return std::nullopt;
  return c;
}

}  // namespace detail

/// `report --dir PATH`: summary JSON with the per-swap best-fitness curve,
/// oracle-record counts, predictor calibration (when a predictor ran) and
/// the final Pareto front.
inline int run_report(const std::filesystem::path& run_dir, std::ostream& out,
                      std::ostream& err) {
  const auto history_path = run_dir / "history.jsonl";
  const auto evals_path = run_dir / "evals.jsonl";
  if (!std::filesystem::exists(history_path) || !std::filesystem::exists(evals_path)) {
    err << "missing run artifacts under '" << run_dir.string()
        << "' (need history.jsonl and evals.jsonl)\n";
    return exit_missing;
  }
  std::vector<detail::HistoryLine> history;
  std::vector<EvalRecord> records;
  try {
    history = detail::load_history(history_path);
    records = load_records(evals_path);
  } catch (const Error& e) {
    err << "cannot load artifacts: " << e.what() << "\n";
    return exit_config;
  }

  std::int64_t oracle_records = 0, predictor_records = 0;
  for (const auto& r : records)
    (r.source == FitnessSource::oracle ? oracle_records : predictor_records) += 1;

  nlohmann::ordered_json j;
  j["best_fitness_curve"] = nlohmann::json::array();
  for (const auto& h : history) j["best_fitness_curve"].push_back(h.best_fitness);
  j["swaps"] = history.size();
  j["oracle_records"] = oracle_records;
  j["predictor_records"] = predictor_records;

  const auto calib = detail::load_calibration(run_dir / "calibration.csv");
  if (calib) {
    j["calibration"] = {{"pairs", calib->predicted.size()},
                        {"spearman", spearman(calib->predicted, calib->truth)}};
  } else {
    j["calibration"] = nullptr;
  }

  j["pareto_front"] = nlohmann::json::array();
  for (const auto& p : pareto_front(records))
    j["pareto_front"].push_back({{"params", p.params}, {"fitness", p.fitness}});

  out << j.dump(2) << "\n";
  return exit_ok;
}

}  // namespace iternas::cli
