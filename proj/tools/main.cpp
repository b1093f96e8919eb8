#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "iternas/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"iternas - iterative hardware-constrained evolutionary architecture search"};
  app.require_subcommand(1);

  std::string config_path;
  std::string genome_path;
  std::string evals_path;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  int jobs = 1;

  auto* search = app.add_subcommand("search", "Run the iterative evolutionary search");
  search->add_option("--config", config_path, "Run configuration file (JSON)")->required();
  search->add_option("--seed", seed, "Override search.seed from the config");
  search->add_option("--jobs", jobs, "Parallel fitness evaluation workers")
      ->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Cost report and oracle fitness for one genome");
  eval->add_option("--config", config_path, "Run configuration file (JSON)")->required();
  eval->add_option("--genome", genome_path, "Genome canonical text file")->required();

  auto* pareto = app.add_subcommand("pareto", "Non-dominated (params, fitness) set as CSV");
  pareto->add_option("--evals", evals_path, "Evaluation log (evals.jsonl)")->required();

  auto* report = app.add_subcommand("report", "Summary JSON for a finished run directory");
  report->add_option("--dir", run_dir, "Run output directory")->required();

  CLI11_PARSE(app, argc, argv);

  if (search->parsed())
    return iternas::cli::run_search(config_path, seed, jobs, std::cout, std::cerr);
  if (eval->parsed()) return iternas::cli::run_eval(config_path, genome_path, std::cout, std::cerr);
  if (pareto->parsed()) return iternas::cli::run_pareto(evals_path, std::cout, std::cerr);
  return iternas::cli::run_report(run_dir, std::cout, std::cerr);
}
