#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "iternas/cost_model.hpp"
#include "iternas/errors.hpp"
#include "iternas/evolution.hpp"
#include "iternas/rng.hpp"
#include "iternas/search_space.hpp"

namespace iternas {

namespace detail {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kPassthroughTag = 0x9a55;
constexpr std::uint64_t kGenerationTag = 0x6e6e;

}  // namespace detail

/// Per-module elite store persisting across module swaps. Entries are kept
/// sorted best-first and deduplicated by the canonical text of the active
/// module's genes; only oracle-verified scores are admitted.
struct MemoryBuffer {
  ModuleKind module = ModuleKind::backbone;
  std::size_t capacity = 0;
  std::vector<ScoredGenome> entries;
};

/// Merges candidates into the buffer: per module-genes key the best entry
/// wins, then the buffer is re-sorted and truncated to capacity.
inline void merge_into_buffer(MemoryBuffer& buffer, const std::vector<ScoredGenome>& candidates) {
  std::map<std::string, ScoredGenome> by_key;
  for (const auto& e : buffer.entries)
    by_key.emplace(canonical_module_text(e.genome, buffer.module), e);
  for (const auto& c : candidates) {
    assert(c.source == FitnessSource::oracle);
    const std::string key = canonical_module_text(c.genome, buffer.module);
    auto [it, inserted] = by_key.emplace(key, c);
    if (!inserted && better(c, it->second)) it->second = c;
  }
  buffer.entries.clear();
  buffer.entries.reserve(by_key.size());
  for (auto& [key, e] : by_key) buffer.entries.push_back(std::move(e));
  std::stable_sort(buffer.entries.begin(), buffer.entries.end(),
                   [](const ScoredGenome& a, const ScoredGenome& b) { return better(a, b); });
  if (buffer.entries.size() > buffer.capacity) buffer.entries.resize(buffer.capacity);
}

struct PassthroughStats {
  int elites = 0;
  int fresh = 0;
};

namespace detail {

inline Genome graft_module(const Genome& context, const Genome& donor, ModuleKind module) {
  Genome g = context;
  if (module == ModuleKind::backbone)
    g.backbone = donor.backbone;
  else
    g.head = donor.head;
  return g;
}

inline Candidate make_candidate(Genome g, const SearchSpace& s, const HardwareProfile& hw) {
  Candidate c;
  c.canonical_text = genome_to_canonical_text(g);
  c.cost = genome_cost(g, s, hw);
  c.genome = std::move(g);
  return c;
}

}  // namespace detail

/// Builds a swap-start population: the top min(floor(rho*N), |buffer|)
/// buffer entries pass through (grafted onto the current fixed context and
/// re-scored when the context changed since they were stored), and the
/// remaining slots are filled with feasibility-filtered uniform samples of
/// the module genes. Throws InfeasibleSpaceError when a fresh slot cannot
/// be filled within resample_limit*10 draws.
inline std::vector<ScoredGenome> passthrough_init(
    const MemoryBuffer& buffer, double rho, int population_size, ModuleKind module,
    const Genome& context, const SearchSpace& s, const HardwareProfile& hw,
    const CostProfile& profile, const SearchConfig& cfg, BatchScorer& scorer,
    const EvalContext& ctx, Rng& rng, PassthroughStats* stats = nullptr) {
  const std::size_t n = static_cast<std::size_t>(population_size);
  const std::size_t target =
      std::min(static_cast<std::size_t>(std::floor(rho * population_size)), buffer.entries.size());

  std::vector<ScoredGenome> population;
  population.reserve(n);
  std::vector<Candidate> stale;              // elites needing re-scores
  std::vector<int> stale_slots;              // their population indices

  for (const auto& entry : buffer.entries) {
    if (population.size() >= target) break;
    Genome grafted = detail::graft_module(context, entry.genome, module);
    CostReport cost = genome_cost(grafted, s, hw);
    if (!is_feasible(cost, profile, module)) continue;  // feasibility closure under new context
    const int slot = static_cast<int>(population.size());
    if (entry.context_hash == ctx.context_hash) {
      // Same fixed context as at storage time: the stored score is current.
      ScoredGenome e;
      e.genome = std::move(grafted);
      e.canonical_text = genome_to_canonical_text(e.genome);
      e.fitness = entry.fitness;
      e.source = entry.source;
      e.cost = std::move(cost);
      e.context_hash = ctx.context_hash;
      population.push_back(std::move(e));
    } else {
      Candidate c;
      c.canonical_text = genome_to_canonical_text(grafted);
      c.cost = std::move(cost);
      c.genome = std::move(grafted);
      stale.push_back(std::move(c));
      stale_slots.push_back(slot);
      population.emplace_back();  // placeholder, filled after scoring
    }
  }

  const int elites = static_cast<int>(population.size());
  if (stats) {
    stats->elites = elites;
    stats->fresh = population_size - elites;
  }

  if (!stale.empty()) {
    const auto scores = scorer.score(stale, ctx, stale_slots);
    for (std::size_t i = 0; i < stale.size(); ++i)
      population[static_cast<std::size_t>(stale_slots[i])] =
          detail::make_scored(std::move(stale[i].genome), std::move(stale[i].canonical_text),
                              std::move(stale[i].cost), scores[i], ctx.context_hash);
  }

  std::vector<Candidate> fresh;
  std::vector<int> fresh_slots;
  for (std::size_t slot = population.size(); slot < n; ++slot) {
    bool found = false;
    for (int draw = 0; draw < cfg.resample_limit * 10; ++draw) {
      Genome g = sample_module_uniform(context, module, s, rng);
      CostReport cost = genome_cost(g, s, hw);
      if (!is_feasible(cost, profile, module)) continue;
      Candidate c;
      c.canonical_text = genome_to_canonical_text(g);
      c.cost = std::move(cost);
      c.genome = std::move(g);
      fresh.push_back(std::move(c));
      fresh_slots.push_back(static_cast<int>(slot));
      found = true;
      break;
    }
    if (!found)
      throw InfeasibleSpaceError("no feasible " + std::string(module_name(module)) +
                                 " sample found in " + std::to_string(cfg.resample_limit * 10) +
                                 " uniform draws; budgets appear unsatisfiable");
  }
  if (!fresh.empty()) {
    const auto scores = scorer.score(fresh, ctx, fresh_slots);
    for (std::size_t i = 0; i < fresh.size(); ++i)
      population.push_back(detail::make_scored(std::move(fresh[i].genome),
                                               std::move(fresh[i].canonical_text),
                                               std::move(fresh[i].cost), scores[i],
                                               ctx.context_hash));
  }
  return population;
}

struct InnerSearchResult {
  ScoredGenome winner;  // oracle-verified best of the final population
  PassthroughStats passthrough;
  int generations_run = 0;
  std::int64_t evaluations_used = 0;  // oracle calls during this swap
  std::size_t buffer_size_before = 0;
};

/// One module swap: passthrough-initialize, evolve generations_per_swap
/// generations, oracle-verify the winner, and merge the final population's
/// oracle-scored members into the buffer.
inline InnerSearchResult run_inner_search(ModuleKind module, const Genome& context,
                                          MemoryBuffer& buffer, const SearchSpace& s,
                                          const HardwareProfile& hw, const CostProfile& profile,
                                          const SearchConfig& cfg, BatchScorer& scorer,
                                          int swap_index) {
  InnerSearchResult result;
  result.buffer_size_before = buffer.entries.size();
  const std::int64_t calls_before = scorer.oracle_calls();

  EvalContext ctx;
  ctx.swap = swap_index;
  ctx.gen = 0;
  ctx.module = module;
  ctx.context_hash = context_digest(context, module);

  Rng pass_rng(derive_seed(cfg.seed, {detail::kPassthroughTag,
                                      static_cast<std::uint64_t>(swap_index)}));
  scorer.begin_generation(swap_index, 0);
  auto population =
      passthrough_init(buffer, cfg.passthrough_ratio, cfg.population_size, module, context, s, hw,
                       profile, cfg, scorer, ctx, pass_rng, &result.passthrough);

  double prev_best = best_of(population).fitness;
  for (int gen = 1; gen <= cfg.generations_per_swap; ++gen) {
    ctx.gen = gen;
    Rng gen_rng(derive_seed(cfg.seed, {detail::kGenerationTag,
                                       static_cast<std::uint64_t>(swap_index),
                                       static_cast<std::uint64_t>(gen)}));
    scorer.begin_generation(swap_index, gen);
    population = evolve_generation(population, module, context, s, hw, profile, cfg, scorer, ctx,
                                   gen_rng);
    ++result.generations_run;
    const double now_best = best_of(population).fitness;
    // Elite retention; only holds when at least one parent survives.
    assert(cfg.parent_ratio == 0.0 || now_best >= prev_best);
    prev_best = now_best;
  }
  (void)prev_best;

  ScoredGenome winner = best_of(population);
  if (winner.source != FitnessSource::oracle) {
    ctx.gen = cfg.generations_per_swap + 1;
    Candidate c;
    c.genome = winner.genome;
    c.canonical_text = winner.canonical_text;
    c.cost = winner.cost;
    const Score verified = scorer.verify_oracle(c, ctx, 0);
    winner.fitness = verified.fitness;
    winner.source = verified.source;
    // Verification may deflate a predictor-favored candidate below an
    // already ground-truth-scored member; the argmax over verified scores
    // wins.
    for (const auto& m : population)
      if (m.source == FitnessSource::oracle && better(m, winner)) winner = m;
  }

  std::vector<ScoredGenome> oracle_scored;
  for (const auto& m : population)
    if (m.source == FitnessSource::oracle) oracle_scored.push_back(m);
  oracle_scored.push_back(winner);
  merge_into_buffer(buffer, oracle_scored);

  result.winner = std::move(winner);
  result.evaluations_used = scorer.oracle_calls() - calls_before;
  return result;
}

/// Audit line for one module swap. `best` is the best full genome observed
/// so far (a running maximum, so per-swap best fitness is non-decreasing);
/// swap_winner_fitness is this swap's own verified winner, whose module
/// genes become the fixed context either way.
struct SwapRecord {
  int swap_index = 0;
  ModuleKind module = ModuleKind::backbone;
  ScoredGenome best;
  double swap_winner_fitness = 0.0;
  int generations_run = 0;
  std::int64_t evaluations_used = 0;
  int pass_elites = 0;
  int pass_fresh = 0;
  std::size_t buffer_size_before = 0;
};

struct SearchResult {
  ScoredGenome best;
  std::vector<SwapRecord> history;
  std::int64_t oracle_calls = 0;
};

using SwapCallback = std::function<void(const SwapRecord&)>;

/// Outer coordinate-descent loop: alternates Backbone, Head, Backbone, ...
/// for up to max_module_swaps swaps, maintaining one memory buffer per
/// module. Stops early when the best fitness fails to improve (relative
/// improvement <= improvement_tol) for patience_swaps consecutive swaps.
/// Requires tau_backbone + tau_head <= tau_total.
inline SearchResult run_iterative_search(const SearchConfig& cfg, const SearchSpace& s,
                                         const HardwareProfile& hw, const CostProfile& profile,
                                         BatchScorer& scorer, const SwapCallback& on_swap = {}) {
  validate_space(s);
  validate_hardware(hw);
  validate_search_config(cfg);
  validate_budgets(profile);

  const std::int64_t calls_at_start = scorer.oracle_calls();

  // Seed the loop with a random full genome feasible for both module
  // budgets (which implies the total budget, since tau_b + tau_h <= tau);
  // its genes seed the fixed contexts, so total-only feasibility would not
  // be enough.
  Rng init_rng(derive_seed(cfg.seed, {detail::kInitTag}));
  Genome initial;
  bool found = false;
  for (int draw = 0; draw < cfg.resample_limit * 10; ++draw) {
    Genome g = sample_uniform(s, init_rng);
    const CostReport cost = genome_cost(g, s, hw);
    if (is_feasible(cost, profile, BudgetScope::backbone) &&
        is_feasible(cost, profile, BudgetScope::head)) {
      initial = std::move(g);
      found = true;
      break;
    }
  }
  if (!found)
    throw InfeasibleSpaceError("no feasible full genome found in " +
                               std::to_string(cfg.resample_limit * 10) +
                               " uniform draws; budgets appear unsatisfiable");

  EvalContext init_ctx;
  init_ctx.swap = -1;
  init_ctx.gen = 0;
  init_ctx.module = ModuleKind::backbone;
  init_ctx.context_hash = context_digest(initial, ModuleKind::backbone);
  scorer.begin_generation(-1, 0);
  auto init_candidate = detail::make_candidate(initial, s, hw);
  const auto init_scores = scorer.score({init_candidate}, init_ctx, {0});
  ScoredGenome incumbent = detail::make_scored(std::move(init_candidate.genome),
                                               std::move(init_candidate.canonical_text),
                                               std::move(init_candidate.cost), init_scores[0],
                                               init_ctx.context_hash);

  MemoryBuffer backbone_buffer{ModuleKind::backbone,
                               static_cast<std::size_t>(2 * cfg.population_size),
                               {}};
  MemoryBuffer head_buffer{ModuleKind::head, static_cast<std::size_t>(2 * cfg.population_size),
                           {}};

  SearchResult result;
  result.best = incumbent;
  int stale_swaps = 0;

  for (int swap = 0; swap < cfg.max_module_swaps; ++swap) {
    const ModuleKind module = swap % 2 == 0 ? ModuleKind::backbone : ModuleKind::head;
    MemoryBuffer& buffer = module == ModuleKind::backbone ? backbone_buffer : head_buffer;

    InnerSearchResult inner =
        run_inner_search(module, incumbent.genome, buffer, s, hw, profile, cfg, scorer, swap);

    const double prev_best = result.best.fitness;
    if (better(inner.winner, result.best)) result.best = inner.winner;
    // The winning module genes become the fixed context for the other
    // module regardless of whether they beat the running best.
    incumbent = inner.winner;

    SwapRecord record;
    record.swap_index = swap;
    record.module = module;
    record.best = result.best;
    record.swap_winner_fitness = inner.winner.fitness;
    record.generations_run = inner.generations_run;
    record.evaluations_used = inner.evaluations_used;
    record.pass_elites = inner.passthrough.elites;
    record.pass_fresh = inner.passthrough.fresh;
    record.buffer_size_before = inner.buffer_size_before;
    assert(is_feasible(record.best.cost, profile, BudgetScope::both));
    result.history.push_back(record);
    if (on_swap) on_swap(record);

    const double improvement = result.best.fitness - prev_best;
    if (improvement <= cfg.improvement_tol * std::max(1.0, std::fabs(prev_best)))
      ++stale_swaps;
    else
      stale_swaps = 0;
    if (stale_swaps >= cfg.patience_swaps) break;
  }

  result.oracle_calls = scorer.oracle_calls() - calls_at_start;
  return result;
}

}  // namespace iternas
