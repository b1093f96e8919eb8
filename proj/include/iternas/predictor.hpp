#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "iternas/errors.hpp"
#include "iternas/evaluator.hpp"
#include "iternas/evolution.hpp"
#include "iternas/rng.hpp"
#include "iternas/search_space.hpp"

namespace iternas {

/// Ridge-regression accuracy predictor over the fixed-length genome
/// encoding. Features are standardized at fit time; zero-variance features
/// keep scale 1. weights[0] is the intercept.
struct PredictorModel {
  std::vector<double> weights;
  double ridge_lambda = 0.0;
  std::vector<double> feature_means;
  std::vector<double> feature_scales;
  std::size_t training_count = 0;
};

namespace detail {

/// Solves A x = b by Gaussian elimination with partial pivoting. A is
/// modified in place. Dimensions here are tiny (feature length + 1).
inline std::vector<double> solve_linear(std::vector<std::vector<double>>& A,
                                        std::vector<double>& b) {
  const std::size_t m = A.size();
  for (std::size_t col = 0; col < m; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < m; ++r)
      if (std::fabs(A[r][col]) > std::fabs(A[pivot][col])) pivot = r;
    if (A[pivot][col] == 0.0) continue;  // singular direction; leave weight at 0
    std::swap(A[col], A[pivot]);
    std::swap(b[col], b[pivot]);
    for (std::size_t r = col + 1; r < m; ++r) {
      const double f = A[r][col] / A[col][col];
      if (f == 0.0) continue;
      for (std::size_t c = col; c < m; ++c) A[r][c] -= f * A[col][c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(m, 0.0);
  for (std::size_t ri = m; ri-- > 0;) {
    double acc = b[ri];
    for (std::size_t c = ri + 1; c < m; ++c) acc -= A[ri][c] * x[c];
    x[ri] = A[ri][ri] != 0.0 ? acc / A[ri][ri] : 0.0;
  }
  return x;
}

}  // namespace detail

/// Fits the regularized linear model in closed form via the normal
/// equations; deterministic for a fixed input order. The intercept is not
/// penalized. Throws InsufficientDataError below `min_required` rows
/// (default: feature length / 4, rounded up).
inline PredictorModel fit_predictor(const std::vector<std::vector<double>>& features,
                                    const std::vector<double>& targets, double ridge_lambda,
                                    std::optional<std::size_t> min_required = std::nullopt) {
  const std::size_t n = features.size();
  if (n != targets.size()) throw ConfigError("feature/target row count mismatch");
  const std::size_t dim = n == 0 ? 0 : features.front().size();
  const std::size_t required = min_required.value_or((dim + 3) / 4);
  if (n < required || n == 0)
    throw InsufficientDataError("predictor needs at least " + std::to_string(required) +
                                " records, got " + std::to_string(n));
  if (ridge_lambda < 0.0) throw ConfigError("ridge_lambda must be >= 0");

  PredictorModel model;
  model.ridge_lambda = ridge_lambda;
  model.training_count = n;
  model.feature_means.assign(dim, 0.0);
  model.feature_scales.assign(dim, 1.0);
  for (const auto& row : features)
    for (std::size_t j = 0; j < dim; ++j) model.feature_means[j] += row[j];
  for (auto& mu : model.feature_means) mu /= static_cast<double>(n);
  for (std::size_t j = 0; j < dim; ++j) {
    double ss = 0.0;
    for (const auto& row : features) {
      const double d = row[j] - model.feature_means[j];
      ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    model.feature_scales[j] = sd > 0.0 ? sd : 1.0;
  }

  // Normal equations over the design matrix [1 | Z] with Z standardized.
  const std::size_t m = dim + 1;
  std::vector<std::vector<double>> A(m, std::vector<double>(m, 0.0));
  std::vector<double> b(m, 0.0);
  std::vector<double> z(dim);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < dim; ++j)
      z[j] = (features[r][j] - model.feature_means[j]) / model.feature_scales[j];
    A[0][0] += 1.0;
    b[0] += targets[r];
    for (std::size_t i = 0; i < dim; ++i) {
      A[0][i + 1] += z[i];
      A[i + 1][0] += z[i];
      b[i + 1] += z[i] * targets[r];
      for (std::size_t j = i; j < dim; ++j) {
        A[i + 1][j + 1] += z[i] * z[j];
        if (j != i) A[j + 1][i + 1] += z[i] * z[j];
      }
    }
  }
  for (std::size_t i = 1; i < m; ++i) A[i][i] += ridge_lambda;

  model.weights = detail::solve_linear(A, b);
  for (double w : model.weights)
    if (!std::isfinite(w)) throw InsufficientDataError("predictor fit produced non-finite weights");
  return model;
}

inline double predict(const PredictorModel& model, std::span<const double> features) {
  double y = model.weights[0];
  for (std::size_t j = 0; j < features.size(); ++j)
    y += model.weights[j + 1] * (features[j] - model.feature_means[j]) / model.feature_scales[j];
  return y;
}

inline double predict(const PredictorModel& model, const Genome& g, const SearchSpace& space) {
  const auto enc = encode(g, space);
  return predict(model, enc);
}

/// Fits from evaluation records (canonical genomes are parsed against the
/// space and encoded).
inline PredictorModel fit_predictor_records(std::span<const EvalRecord> records,
                                            const SearchSpace& space, double ridge_lambda,
                                            std::optional<std::size_t> min_required = std::nullopt) {
  std::vector<std::vector<double>> X;
  std::vector<double> y;
  X.reserve(records.size());
  y.reserve(records.size());
  for (const auto& r : records) {
    X.push_back(encode(genome_from_canonical_text(r.canonical_genome, space), space));
    y.push_back(r.fitness);
  }
  return fit_predictor(X, y, ridge_lambda, min_required);
}

/// When the surrogate may stand in for the oracle. oracle_fraction is the
/// per-candidate probability of a ground-truth evaluation once the model is
/// trained; 1.0 disables the predictor entirely. The oracle is never fully
/// bypassed: the fraction must stay positive, warm-up always uses the
/// oracle, and per-swap winners are always oracle-verified.
struct PredictorPolicy {
  std::size_t min_training_records = 100;
  double oracle_fraction = 1.0;
  int refresh_interval = 5;
  double ridge_lambda = 1e-3;
};

inline void validate_policy(const PredictorPolicy& p) {
  if (p.min_training_records < 1) throw ConfigError("min_training_records must be >= 1");
  if (!(p.oracle_fraction > 0.0 && p.oracle_fraction <= 1.0))
    throw ConfigError("oracle_fraction must be in (0, 1]");
  if (p.refresh_interval < 1) throw ConfigError("refresh_interval must be >= 1");
  if (p.ridge_lambda < 0.0) throw ConfigError("ridge_lambda must be >= 0");
}

/// One (predicted, true) pair for an actual oracle evaluation made while a
/// model was active; the source of predictor-calibration reporting.
struct CalibrationRow {
  double predicted = 0.0;
  double truth = 0.0;
  int swap = 0;
  int gen = 0;
};

/// Hybrid oracle/predictor fitness engine.
///
/// Scoring pipeline per batch (identical results for any thread count):
///   1. sequential: memo lookups and the per-slot oracle/predictor decision
///      (the decision stream is derived from (seed, swap, gen, slot));
///   2. parallel: actual oracle invocations for distinct uncached genomes;
///   3. sequential in slot order: memo/training-store inserts, record
///      emission, calibration rows.
/// Every oracle result is appended to the training store; the model refits
/// at generation boundaries every refresh_interval generations once
/// min_training_records unique oracle evaluations exist.
class HybridFitness : public BatchScorer {
 public:
  using RecordSink = std::function<void(const EvalRecord&)>;

  HybridFitness(OracleFn oracle, SearchSpace space, PredictorPolicy policy,
                std::uint64_t run_seed, int jobs = 1, RecordSink sink = nullptr)
      : oracle_(std::move(oracle)),
        space_(std::move(space)),
        policy_(policy),
        run_seed_(run_seed),
        jobs_(jobs < 1 ? 1 : jobs),
        sink_(std::move(sink)) {
    validate_policy(policy_);
  }

  void begin_generation(int /*swap*/, int /*gen*/) override {
    ++generation_counter_;
    if (!predictor_enabled()) return;
    if (train_y_.size() < policy_.min_training_records) return;
    if (model_ && generation_counter_ - last_fit_generation_ < policy_.refresh_interval) return;
    model_ = fit_predictor(train_x_, train_y_, policy_.ridge_lambda, train_y_.size());
    last_fit_generation_ = generation_counter_;
  }

  std::vector<Score> score(const std::vector<Candidate>& candidates, const EvalContext& ctx,
                           const std::vector<int>& slots) override {
    struct Plan {
      enum { memo_hit, predicted, compute } kind;
      double value = 0.0;
      std::size_t compute_index = 0;
    };
    const std::size_t n = candidates.size();
    std::vector<Plan> plans(n);
    std::vector<std::size_t> compute_rep;            // candidate index per distinct compute
    std::map<std::string, std::size_t> batch_dedup;  // memo key -> compute slot

    for (std::size_t i = 0; i < n; ++i) {
      const std::string key = memo_key(candidates[i].canonical_text, ctx.context_hash);
      if (auto it = memo_.find(key); it != memo_.end()) {
        plans[i] = {Plan::memo_hit, it->second, 0};
        continue;
      }
      if (auto it = predictor_memo_.find(key); it != predictor_memo_.end()) {
        // The oracle/predictor decision is made once per candidate, not per
        // re-encounter; otherwise recurring candidates would drift to the
        // oracle with probability 1 over the run.
        plans[i] = {Plan::predicted, it->second, 0};
        continue;
      }
      if (auto it = batch_dedup.find(key); it != batch_dedup.end()) {
        plans[i] = {Plan::compute, 0.0, it->second};
        continue;
      }
      if (model_ && !oracle_draw(ctx, slots[i])) {
        const double value = predict(*model_, candidates[i].genome, space_);
        predictor_memo_.emplace(key, value);
        plans[i] = {Plan::predicted, value, 0};
        continue;
      }
      plans[i] = {Plan::compute, 0.0, compute_rep.size()};
      batch_dedup.emplace(key, compute_rep.size());
      compute_rep.push_back(i);
    }

    std::vector<double> computed(compute_rep.size(), 0.0);
    run_oracle_batch(candidates, ctx, compute_rep, computed);

    std::vector<Score> out(n);
    std::vector<bool> counted(compute_rep.size(), false);
    for (std::size_t i = 0; i < n; ++i) {
      double fitness = 0.0;
      FitnessSource source = FitnessSource::oracle;
      switch (plans[i].kind) {
        case Plan::memo_hit:
          fitness = plans[i].value;
          break;
        case Plan::predicted:
          fitness = plans[i].value;
          source = FitnessSource::predictor;
          break;
        case Plan::compute: {
          const std::size_t c = plans[i].compute_index;
          fitness = computed[c];
          if (!counted[c]) {
            counted[c] = true;
            ++oracle_calls_;
            admit_oracle_result(candidates[i], ctx, fitness);
          }
          break;
        }
      }
      if (!std::isfinite(fitness))
        throw OracleError("non-finite fitness for genome " + candidates[i].canonical_text);
      out[i] = {fitness, source};
      emit_record(candidates[i], ctx, fitness, source);
    }
    return out;
  }

  Score verify_oracle(const Candidate& candidate, const EvalContext& ctx, int /*slot*/) override {
    const std::string key = memo_key(candidate.canonical_text, ctx.context_hash);
    double fitness = 0.0;
    if (auto it = memo_.find(key); it != memo_.end()) {
      fitness = it->second;
    } else {
      fitness = oracle_(candidate.genome, candidate.canonical_text, ctx.context_hash);
      if (!std::isfinite(fitness))
        throw OracleError("non-finite oracle fitness for genome " + candidate.canonical_text);
      ++oracle_calls_;
      admit_oracle_result(candidate, ctx, fitness);
    }
    emit_record(candidate, ctx, fitness, FitnessSource::oracle);
    return {fitness, FitnessSource::oracle};
  }

  std::int64_t oracle_calls() const override { return oracle_calls_; }
  std::int64_t scoring_events() const { return scoring_events_; }
  std::size_t training_size() const { return train_y_.size(); }
  const PredictorModel* model() const { return model_ ? &*model_ : nullptr; }
  const std::vector<CalibrationRow>& calibration() const { return calibration_; }

 private:
  bool predictor_enabled() const { return policy_.oracle_fraction < 1.0; }

  static std::string memo_key(const std::string& canonical, std::uint64_t ctx) {
    return canonical + "#" + detail::hex16(ctx);
  }

  bool oracle_draw(const EvalContext& ctx, int slot) {
    Rng rng(derive_seed(run_seed_, {0xE7A1u, static_cast<std::uint64_t>(ctx.swap + 1),
                                    static_cast<std::uint64_t>(ctx.gen),
                                    static_cast<std::uint64_t>(slot)}));
    return rng.bernoulli(policy_.oracle_fraction);
  }

  void run_oracle_batch(const std::vector<Candidate>& candidates, const EvalContext& ctx,
                        const std::vector<std::size_t>& reps, std::vector<double>& out) {
    if (reps.empty()) return;
    const int workers = std::min<int>(jobs_, static_cast<int>(reps.size()));
    if (workers <= 1) {
      for (std::size_t c = 0; c < reps.size(); ++c)
        out[c] = oracle_(candidates[reps[c]].genome, candidates[reps[c]].canonical_text,
                         ctx.context_hash);
      return;
    }
    std::atomic<std::size_t> cursor{0};
    std::vector<std::exception_ptr> errors(reps.size());
    auto work = [&] {
      for (;;) {
        const std::size_t c = cursor.fetch_add(1);
        if (c >= reps.size()) return;
        try {
          out[c] = oracle_(candidates[reps[c]].genome, candidates[reps[c]].canonical_text,
                           ctx.context_hash);
        } catch (...) {
          errors[c] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  void admit_oracle_result(const Candidate& candidate, const EvalContext& ctx, double fitness) {
    memo_.emplace(memo_key(candidate.canonical_text, ctx.context_hash), fitness);
    if (model_)
      calibration_.push_back(
          {predict(*model_, candidate.genome, space_), fitness, ctx.swap, ctx.gen});
    if (predictor_enabled() && training_seen_.emplace(candidate.canonical_text).second) {
      train_x_.push_back(encode(candidate.genome, space_));
      train_y_.push_back(fitness);
    }
  }

  void emit_record(const Candidate& candidate, const EvalContext& ctx, double fitness,
                   FitnessSource source) {
    ++scoring_events_;
    if (!sink_) return;
    EvalRecord r;
    r.canonical_genome = candidate.canonical_text;
    r.fitness = fitness;
    r.source = source;
    r.cost = candidate.cost.total;
    r.context_hash = ctx.context_hash;
    r.swap = ctx.swap;
    r.gen = ctx.gen;
    r.seed = run_seed_;
    sink_(r);
  }

  OracleFn oracle_;
  SearchSpace space_;
  PredictorPolicy policy_;
  std::uint64_t run_seed_;
  int jobs_;
  RecordSink sink_;

  std::map<std::string, double> memo_;
  std::map<std::string, double> predictor_memo_;
  std::set<std::string> training_seen_;
  std::vector<std::vector<double>> train_x_;
  std::vector<double> train_y_;
  std::optional<PredictorModel> model_;
  std::vector<CalibrationRow> calibration_;

  std::int64_t oracle_calls_ = 0;
  std::int64_t scoring_events_ = 0;
  long long generation_counter_ = 0;
  long long last_fit_generation_ = 0;
};

}  // namespace iternas
