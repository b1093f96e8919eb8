#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iternas/cost_model.hpp"
#include "iternas/errors.hpp"
#include "iternas/rng.hpp"
#include "iternas/search_space.hpp"

namespace iternas {

/// Evolutionary search settings. Defaults follow the reference settings:
/// mutation probability 0.1, population 100, parent ratio 0.25, mutation
/// ratio 0.5, 10 generations per module swap, up to 50 swaps, passthrough
/// ratio 0.5. mutation_ratio is the probability that an offspring is
/// produced by mutation only rather than crossover followed by mutation.
struct SearchConfig {
  int population_size = 100;
  double mutation_prob = 0.1;
  double parent_ratio = 0.25;
  double mutation_ratio = 0.5;
  int tournament_size = 2;
  int generations_per_swap = 10;
  int max_module_swaps = 50;
  double passthrough_ratio = 0.5;
  int resample_limit = 32;
  std::uint64_t seed = 0;
  // Outer-loop convergence: stop after this many consecutive swaps whose
  // relative best-fitness improvement is at most improvement_tol.
  int patience_swaps = 6;
  double improvement_tol = 1e-9;
};

inline void validate_search_config(const SearchConfig& c) {
  auto in01 = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (c.population_size < 2) throw ConfigError("population_size must be >= 2");
  if (!in01(c.mutation_prob)) throw ConfigError("mutation_prob must be in [0, 1]");
  if (!in01(c.parent_ratio)) throw ConfigError("parent_ratio must be in [0, 1]");
  if (!in01(c.mutation_ratio)) throw ConfigError("mutation_ratio must be in [0, 1]");
  if (!in01(c.passthrough_ratio)) throw ConfigError("passthrough_ratio must be in [0, 1]");
  if (c.tournament_size < 2) throw ConfigError("tournament_size must be >= 2");
  if (c.generations_per_swap < 1) throw ConfigError("generations_per_swap must be >= 1");
  if (c.max_module_swaps < 1) throw ConfigError("max_module_swaps must be >= 1");
  if (c.resample_limit < 1) throw ConfigError("resample_limit must be >= 1");
  if (c.patience_swaps < 1) throw ConfigError("patience_swaps must be >= 1");
}

enum class FitnessSource { oracle, predictor };

inline const char* fitness_source_name(FitnessSource s) {
  return s == FitnessSource::oracle ? "oracle" : "predictor";
}

/// A genome with its score and provenance. canonical_text is cached since
/// it is both the dedup key and the final comparator tie-break.
struct ScoredGenome {
  Genome genome;
  std::string canonical_text;
  double fitness = 0.0;
  FitnessSource source = FitnessSource::oracle;
  CostReport cost;
  std::uint64_t context_hash = 0;  // digest of the fixed module at scoring time
};

/// Strict ordering used everywhere a "best" candidate is picked: higher
/// fitness, then lower total params, then canonical text. The text
/// tie-break makes selection fully deterministic.
inline bool better(const ScoredGenome& a, const ScoredGenome& b) {
  if (a.fitness != b.fitness) return a.fitness > b.fitness;
  if (a.cost.total.params != b.cost.total.params)
    return a.cost.total.params < b.cost.total.params;
  return a.canonical_text < b.canonical_text;
}

namespace detail {

/// Uniform redraw over a legal set of size `size`, excluding the current
/// value, so a triggered mutation always changes the gene. Size-1 sets
/// cannot change.
inline int resample_excluding(std::size_t size, int current, Rng& rng) {
  if (size <= 1) return current;
  const int r = static_cast<int>(rng.uniform_index(size - 1));
  return r >= current ? r + 1 : r;
}

}  // namespace detail

/// Mutates only the genes of `module`; the fixed module's genes are copied
/// bit-identically. Each gene (stage depth, stage width index, each active
/// expansion index; or per-slot head width/expansion) independently mutates
/// with probability mutation_prob, redrawing uniformly over the other legal
/// values. A depth increase appends freshly sampled expansion indices; a
/// decrease truncates the trailing entries.
inline Genome mutate_module(const Genome& g, ModuleKind module, const SearchSpace& s,
                            double mutation_prob, Rng& rng) {
  Genome out = g;
  if (module == ModuleKind::backbone) {
    for (auto& sg : out.backbone) {
      const int old_depth = sg.depth;
      int depth = old_depth;
      if (rng.bernoulli(mutation_prob)) {
        const std::size_t span = static_cast<std::size_t>(s.depth_max - s.depth_min + 1);
        depth = s.depth_min + detail::resample_excluding(span, old_depth - s.depth_min, rng);
      }
      if (rng.bernoulli(mutation_prob))
        sg.width_index =
            detail::resample_excluding(s.width_multipliers.size(), sg.width_index, rng);
      std::vector<int> exps(static_cast<std::size_t>(depth));
      for (int j = 0; j < depth; ++j) {
        if (j < old_depth) {
          int e = sg.expansion_indices[static_cast<std::size_t>(j)];
          if (rng.bernoulli(mutation_prob))
            e = detail::resample_excluding(s.expansion_ratios.size(), e, rng);
          exps[static_cast<std::size_t>(j)] = e;
        } else {
          exps[static_cast<std::size_t>(j)] =
              static_cast<int>(rng.uniform_index(s.expansion_ratios.size()));
        }
      }
      sg.depth = depth;
      sg.expansion_indices = std::move(exps);
    }
  } else {
    for (auto& hg : out.head) {
      if (rng.bernoulli(mutation_prob))
        hg.width_index =
            detail::resample_excluding(s.width_multipliers.size(), hg.width_index, rng);
      if (rng.bernoulli(mutation_prob))
        hg.expansion_index =
            detail::resample_excluding(s.expansion_ratios.size(), hg.expansion_index, rng);
    }
  }
  return out;
}

/// Stage-level uniform crossover: the child inherits the fixed module's
/// genes verbatim from parent `a`; each active-module gene group (whole
/// StageGene or HeadGene) is taken wholesale from `a` or `b` with
/// probability 1/2, keeping depth and expansion list consistent.
inline Genome crossover_module(const Genome& a, const Genome& b, ModuleKind module, Rng& rng) {
  Genome child = a;
  if (module == ModuleKind::backbone) {
    for (std::size_t i = 0; i < child.backbone.size(); ++i)
      if (rng.bernoulli(0.5)) child.backbone[i] = b.backbone[i];
  } else {
    for (std::size_t i = 0; i < child.head.size(); ++i)
      if (rng.bernoulli(0.5)) child.head[i] = b.head[i];
  }
  return child;
}

/// Tournament selection: draws tournament_size members uniformly without
/// replacement (with replacement when the population is smaller) and
/// returns the best under the documented ordering.
inline const ScoredGenome& tournament_select(std::span<const ScoredGenome> population,
                                             int tournament_size, Rng& rng) {
  assert(!population.empty());
  const std::size_t n = population.size();
  const std::size_t t = static_cast<std::size_t>(tournament_size);
  std::size_t best = n;  // sentinel
  if (n >= t) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t j = 0; j < t; ++j) {
      std::swap(idx[j], idx[j + rng.uniform_index(n - j)]);
      if (best == n || better(population[idx[j]], population[best])) best = idx[j];
    }
  } else {
    for (std::size_t j = 0; j < t; ++j) {
      const std::size_t k = rng.uniform_index(n);
      if (best == n || better(population[k], population[best])) best = k;
    }
  }
  return population[best];
}

/// Counters for auditing the variation operator.
struct VariationStats {
  std::int64_t crossover_branches = 0;
  std::int64_t mutation_only_branches = 0;
  std::int64_t infeasible_retries = 0;
  std::int64_t fallback_samples = 0;
};

/// Constraint-aware variation: produces one offspring feasible for the
/// active module. With probability mutation_ratio the offspring comes from
/// mutation of one tournament-selected parent; otherwise from crossover of
/// two tournament-selected parents followed by mutation. Infeasible
/// offspring are re-drawn up to resample_limit times, then the operator
/// falls back to feasibility-filtered uniform samples of the module genes
/// (the fixed module stays pinned to `context`). Throws
/// InfeasibleSpaceError after resample_limit*10 failed uniform draws.
inline Genome make_feasible_offspring(std::span<const ScoredGenome> parents, const Genome& context,
                                      ModuleKind module, const SearchSpace& s,
                                      const HardwareProfile& hw, const CostProfile& profile,
                                      const SearchConfig& cfg, Rng& rng,
                                      VariationStats* stats = nullptr) {
  assert(!parents.empty());
  const auto feasible = [&](const Genome& g) {
    return is_feasible(genome_cost(g, s, hw), profile, module);
  };
  for (int attempt = 0; attempt <= cfg.resample_limit; ++attempt) {
    Genome child;
    if (rng.bernoulli(cfg.mutation_ratio)) {
      if (stats) ++stats->mutation_only_branches;
      const ScoredGenome& p = tournament_select(parents, cfg.tournament_size, rng);
      child = mutate_module(p.genome, module, s, cfg.mutation_prob, rng);
    } else {
      if (stats) ++stats->crossover_branches;
      const ScoredGenome& pa = tournament_select(parents, cfg.tournament_size, rng);
      const ScoredGenome& pb = tournament_select(parents, cfg.tournament_size, rng);
      child = mutate_module(crossover_module(pa.genome, pb.genome, module, rng), module, s,
                            cfg.mutation_prob, rng);
    }
    if (feasible(child)) return child;
    if (stats) ++stats->infeasible_retries;
  }
  for (int draw = 0; draw < cfg.resample_limit * 10; ++draw) {
    if (stats) ++stats->fallback_samples;
    Genome g = sample_module_uniform(context, module, s, rng);
    if (feasible(g)) return g;
  }
  throw InfeasibleSpaceError("no feasible " + std::string(module_name(module)) + " found in " +
                             std::to_string(cfg.resample_limit * 10) +
                             " uniform draws; budgets appear unsatisfiable");
}

/// Identifies a scoring batch: which swap/generation it belongs to, the
/// active module, and the digest of the fixed module's genes.
struct EvalContext {
  int swap = 0;
  int gen = 0;
  ModuleKind module = ModuleKind::backbone;
  std::uint64_t context_hash = 0;
};

/// An unscored candidate handed to a scorer.
struct Candidate {
  Genome genome;
  std::string canonical_text;
  CostReport cost;
};

struct Score {
  double fitness = 0.0;
  FitnessSource source = FitnessSource::oracle;
};

/// Fitness evaluation seam. Implementations must be deterministic given
/// (run seed, swap, gen, slot): candidates may be evaluated concurrently,
/// so any per-candidate randomness has to key off the slot index rather
/// than arrival order.
class BatchScorer {
 public:
  virtual ~BatchScorer() = default;

  /// Called once before each scored batch of a generation (gen 0 is the
  /// swap-start population build). Model refreshes happen here, never
  /// mid-batch.
  virtual void begin_generation(int /*swap*/, int /*gen*/) {}

  /// Scores candidates; slots[i] is candidate i's population slot.
  virtual std::vector<Score> score(const std::vector<Candidate>& candidates,
                                   const EvalContext& ctx, const std::vector<int>& slots) = 0;

  /// Forces a ground-truth (oracle) score for one candidate.
  virtual Score verify_oracle(const Candidate& candidate, const EvalContext& ctx, int slot) = 0;

  /// Number of actual oracle invocations so far (cache hits excluded).
  virtual std::int64_t oracle_calls() const = 0;
};

namespace detail {

inline ScoredGenome make_scored(Genome g, std::string text, CostReport cost, const Score& sc,
                                std::uint64_t ctx_hash) {
  ScoredGenome out;
  out.genome = std::move(g);
  out.canonical_text = std::move(text);
  out.fitness = sc.fitness;
  out.source = sc.source;
  out.cost = std::move(cost);
  out.context_hash = ctx_hash;
  return out;
}

inline std::vector<const ScoredGenome*> sorted_view(const std::vector<ScoredGenome>& pop) {
  std::vector<const ScoredGenome*> v;
  v.reserve(pop.size());
  for (const auto& p : pop) v.push_back(&p);
  std::stable_sort(v.begin(), v.end(),
                   [](const ScoredGenome* a, const ScoredGenome* b) { return better(*a, *b); });
  return v;
}

}  // namespace detail

inline const ScoredGenome& best_of(const std::vector<ScoredGenome>& pop) {
  assert(!pop.empty());
  const ScoredGenome* best = &pop.front();
  for (const auto& p : pop)
    if (better(p, *best)) best = &p;
  return *best;
}

/// One generation of the module-scoped evolutionary cycle: the top
/// ceil(parent_ratio * N) candidates survive as elites, and the remaining
/// slots are filled with feasible offspring scored by `scorer`. Genes of
/// the fixed module are identical across every member (asserted via the
/// context digest).
inline std::vector<ScoredGenome> evolve_generation(const std::vector<ScoredGenome>& population,
                                                   ModuleKind module, const Genome& context,
                                                   const SearchSpace& s, const HardwareProfile& hw,
                                                   const CostProfile& profile,
                                                   const SearchConfig& cfg, BatchScorer& scorer,
                                                   const EvalContext& ctx, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(cfg.population_size);
  assert(population.size() == n);

  const auto view = detail::sorted_view(population);
  const std::size_t n_parents = std::min<std::size_t>(
      n, static_cast<std::size_t>(
             std::ceil(cfg.parent_ratio * static_cast<double>(cfg.population_size))));

  std::vector<ScoredGenome> next;
  next.reserve(n);
  for (std::size_t i = 0; i < n_parents; ++i) next.push_back(*view[i]);

  std::vector<Candidate> offspring;
  std::vector<int> slots;
  offspring.reserve(n - n_parents);
  for (std::size_t i = n_parents; i < n; ++i) {
    Genome g = make_feasible_offspring(population, context, module, s, hw, profile, cfg, rng);
    Candidate c;
    c.canonical_text = genome_to_canonical_text(g);
    c.cost = genome_cost(g, s, hw);
    c.genome = std::move(g);
    offspring.push_back(std::move(c));
    slots.push_back(static_cast<int>(i));
  }

  const auto scores = scorer.score(offspring, ctx, slots);
  assert(scores.size() == offspring.size());
  for (std::size_t i = 0; i < offspring.size(); ++i)
    next.push_back(detail::make_scored(std::move(offspring[i].genome),
                                       std::move(offspring[i].canonical_text),
                                       std::move(offspring[i].cost), scores[i],
                                       ctx.context_hash));

#ifndef NDEBUG
  for (const auto& m : next) assert(context_digest(m.genome, module) == ctx.context_hash);
#endif
  return next;
}

}  // namespace iternas
