#pragma once

#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "iternas/cost_model.hpp"
#include "iternas/errors.hpp"
#include "iternas/evolution.hpp"
#include "iternas/rng.hpp"
#include "iternas/search_space.hpp"

namespace iternas {

enum class OracleKind { synthetic_linear, synthetic_rugged, external_command };

/// Fitness oracle description. The synthetic oracles are deterministic
/// stand-ins for detector validation: a seed-derived linear landscape over
/// the genome encoding, optionally penalized by parameter count and, for
/// the rugged kind, augmented with pairwise interactions between gene
/// groups (interaction_scale within a module, coupling_scale across the
/// backbone/head split). Noise, when enabled, is keyed by
/// (noise_seed, canonical genome) so repeat evaluations return the
/// identical value. Higher fitness is better everywhere.
struct OracleSpec {
  OracleKind kind = OracleKind::synthetic_linear;
  std::uint64_t weight_seed = 1;
  double weight_scale = 1.0;
  double lambda_c = 0.0;
  double params_scale = 1.0e6;
  double interaction_scale = 0.0;
  double coupling_scale = 0.0;
  double noise_std = 0.0;
  std::uint64_t noise_seed = 0;
  std::string command;    // external_command only
  int timeout_ms = 10000; // external_command only
};

inline void validate_oracle(const OracleSpec& spec) {
  if (spec.noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
  if (spec.kind == OracleKind::external_command) {
    if (spec.command.empty()) throw ConfigError("external_command oracle requires a command");
    if (spec.timeout_ms <= 0) throw ConfigError("timeout_ms must be > 0");
  }
}

namespace detail {

constexpr std::uint64_t kLinearWeightTag = 0x11;
constexpr std::uint64_t kGroupWeightTag = 0x22;
constexpr std::uint64_t kPairWeightTag = 0x33;

inline std::vector<double> linear_weights(const OracleSpec& spec, const SearchSpace& space) {
  Rng rng(derive_seed(spec.weight_seed, {kLinearWeightTag}));
  std::vector<double> w(encoded_length(space));
  for (auto& x : w) x = spec.weight_scale * rng.uniform_real(-1.0, 1.0);
  return w;
}

inline double keyed_noise(const OracleSpec& spec, const std::string& canonical) {
  if (spec.noise_std == 0.0) return 0.0;
  Rng rng(splitmix64(spec.noise_seed) ^ fnv1a64(canonical));
  return rng.normal() * spec.noise_std;
}

inline double params_penalty(const OracleSpec& spec, const Genome& g, const SearchSpace& space) {
  if (spec.lambda_c == 0.0) return 0.0;
  const auto total = genome_cost(g, space, unconstrained_profile()).total.params;
  return spec.lambda_c * static_cast<double>(total) / spec.params_scale;
}

/// Offset/length of each gene group (stages, then head slots) inside the
/// encoding, plus whether the group belongs to the backbone.
struct GroupLayout {
  std::size_t offset;
  std::size_t length;
  bool backbone;
};

inline std::vector<GroupLayout> group_layout(const SearchSpace& space) {
  std::vector<GroupLayout> groups;
  const std::size_t stage_len = 3 + space.width_multipliers.size();
  for (int i = 0; i < space.num_stages; ++i)
    groups.push_back({static_cast<std::size_t>(i) * stage_len, stage_len, true});
  const std::size_t head_base = static_cast<std::size_t>(space.num_stages) * stage_len;
  for (std::size_t j = 0; j < space.head_blocks.size(); ++j)
    groups.push_back({head_base + 2 * j, 2, false});
  return groups;
}

}  // namespace detail

/// Linear synthetic fitness: dot(weights, encode(g)) minus the parameter
/// penalty, plus keyed noise.
inline double synthetic_linear_fitness(const Genome& g, const SearchSpace& space,
                                       const OracleSpec& spec) {
  const auto enc = encode(g, space);
  const auto w = detail::linear_weights(spec, space);
  double fit = 0.0;
  for (std::size_t i = 0; i < enc.size(); ++i) fit += w[i] * enc[i];
  fit -= detail::params_penalty(spec, g, space);
  return fit + detail::keyed_noise(spec, genome_to_canonical_text(g));
}

/// Rugged synthetic fitness: the linear landscape plus seed-derived
/// pairwise interactions between per-group scalar summaries. With both
/// interaction scales at zero this reduces exactly to
/// synthetic_linear_fitness.
inline double synthetic_rugged_fitness(const Genome& g, const SearchSpace& space,
                                       const OracleSpec& spec) {
  const auto enc = encode(g, space);
  const auto w = detail::linear_weights(spec, space);
  double fit = 0.0;
  for (std::size_t i = 0; i < enc.size(); ++i) fit += w[i] * enc[i];
  fit -= detail::params_penalty(spec, g, space);

  if (spec.interaction_scale != 0.0 || spec.coupling_scale != 0.0) {
    const auto groups = detail::group_layout(space);
    std::vector<double> u(groups.size(), 0.0);
    for (std::size_t i = 0; i < groups.size(); ++i) {
      Rng rng(derive_seed(spec.weight_seed, {detail::kGroupWeightTag, i}));
      for (std::size_t k = 0; k < groups[i].length; ++k)
        u[i] += rng.uniform_real(-1.0, 1.0) * enc[groups[i].offset + k];
    }
    for (std::size_t i = 0; i < groups.size(); ++i) {
      for (std::size_t j = i + 1; j < groups.size(); ++j) {
        const double scale = groups[i].backbone == groups[j].backbone ? spec.interaction_scale
                                                                      : spec.coupling_scale;
        if (scale == 0.0) continue;
        Rng rng(derive_seed(spec.weight_seed, {detail::kPairWeightTag, i, j}));
        fit += rng.uniform_real(-1.0, 1.0) * scale * u[i] * u[j];
      }
    }
  }
  return fit + detail::keyed_noise(spec, genome_to_canonical_text(g));
}

/// Fitness oracle over full genomes. Arguments: genome, its canonical
/// text, and the context digest of the fixed module at evaluation time.
using OracleFn = std::function<double(const Genome&, const std::string&, std::uint64_t)>;

/// Runs an external command per evaluation: canonical genome text on the
/// child's stdin, a single decimal fitness on its stdout, exit 0. Results
/// are cached by (canonical genome, context digest).
class ExternalCommandOracle {
 public:
  ExternalCommandOracle(std::string command, int timeout_ms)
      : command_(std::move(command)), timeout_ms_(timeout_ms) {}

  double evaluate(const std::string& canonical, std::uint64_t context_hash) {
    const auto key = std::make_pair(canonical, context_hash);
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    const double fitness = run_once(canonical);
    std::lock_guard<std::mutex> lock(mutex_);
    cache_.emplace(key, fitness);
    return fitness;
  }

  /// Child processes actually launched (cache hits excluded).
  std::int64_t launches() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return launches_;
  }

 private:
  static std::string genome_id(const std::string& canonical) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canonical)));
    return std::string(buf);
  }

  double run_once(const std::string& canonical) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      ++launches_;
    }
    const std::string id = genome_id(canonical);
    int in_pipe[2], out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0)
      throw OracleError("pipe() failed for genome " + id + ": " + std::strerror(errno));
    const pid_t pid = ::fork();
    if (pid < 0) throw OracleError("fork() failed for genome " + id);
    if (pid == 0) {
      ::setpgid(0, 0);  // own process group so a timeout kill reaps helpers too
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      ::close(out_pipe[0]);
      ::close(out_pipe[1]);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);

    const std::string input = canonical + "\n";
    std::size_t written = 0;
    while (written < input.size()) {
      const ssize_t n = ::write(in_pipe[1], input.data() + written, input.size() - written);
      if (n <= 0) break;  // child may exit without reading; not an error by itself
      written += static_cast<std::size_t>(n);
    }
    ::close(in_pipe[1]);

    std::string output;
    const auto deadline_ok = read_with_timeout(out_pipe[0], output);
    ::close(out_pipe[0]);
    if (!deadline_ok) {
      ::setpgid(pid, pid);
      ::kill(-pid, SIGKILL);
      ::kill(pid, SIGKILL);
      int status = 0;
      ::waitpid(pid, &status, 0);
      throw OracleError("oracle timeout after " + std::to_string(timeout_ms_) +
                        " ms for genome " + id);
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
      throw OracleError("oracle command exited with status " + std::to_string(code) +
                        " for genome " + id);
    }
    char* end = nullptr;
    errno = 0;
    const double fitness = std::strtod(output.c_str(), &end);
    if (end == output.c_str() || errno != 0 || !std::isfinite(fitness))
      throw OracleError("oracle produced unparseable fitness '" + output + "' for genome " + id);
    while (*end != '\0') {
      if (!std::isspace(static_cast<unsigned char>(*end)))
        throw OracleError("oracle produced trailing garbage '" + output + "' for genome " + id);
      ++end;
    }
    return fitness;
  }

  bool read_with_timeout(int fd, std::string& output) const {
    int remaining = timeout_ms_;
    char buf[4096];
    for (;;) {
      struct pollfd pfd {fd, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, remaining);
      if (rc == 0) return false;  // timeout
      if (rc < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      const ssize_t n = ::read(fd, buf, sizeof buf);
      if (n < 0) {
        if (errno == EINTR) continue;
        return true;
      }
      if (n == 0) return true;  // EOF
      output.append(buf, static_cast<std::size_t>(n));
    }
  }

  std::string command_;
  int timeout_ms_;
  mutable std::mutex mutex_;
  std::map<std::pair<std::string, std::uint64_t>, double> cache_;
  std::int64_t launches_ = 0;
};

/// Builds an OracleFn from a spec. Synthetic oracles are pure and
/// thread-safe; the external oracle serializes cache access internally.
inline OracleFn make_oracle(const OracleSpec& spec, const SearchSpace& space) {
  validate_oracle(spec);
  switch (spec.kind) {
    case OracleKind::synthetic_linear:
      return [spec, space](const Genome& g, const std::string&, std::uint64_t) {
        return synthetic_linear_fitness(g, space, spec);
      };
    case OracleKind::synthetic_rugged:
      return [spec, space](const Genome& g, const std::string&, std::uint64_t) {
        return synthetic_rugged_fitness(g, space, spec);
      };
    default: {
      auto oracle = std::make_shared<ExternalCommandOracle>(spec.command, spec.timeout_ms);
      return [oracle](const Genome&, const std::string& canonical, std::uint64_t ctx) {
        return oracle->evaluate(canonical, ctx);
      };
    }
  }
}

/// One evaluation event: the unit of persistence and predictor training
/// data. Every oracle invocation anywhere in the engine produces exactly
/// one record; predictor-scored candidates are recorded as well with
/// source = predictor.
struct EvalRecord {
  std::string canonical_genome;
  double fitness = 0.0;
  FitnessSource source = FitnessSource::oracle;
  CostVector cost;  // total cost of the full genome
  std::uint64_t context_hash = 0;
  int swap = 0;
  int gen = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string hex16(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return std::string(buf);
}

inline std::uint64_t parse_hex16(const std::string& s, std::size_t line_no) {
  if (s.empty()) throw ParseError("empty ctx digest", line_no);
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 16);
  if (errno != 0 || end != s.c_str() + s.size())
    throw ParseError("bad ctx digest '" + s + "'", line_no);
  return static_cast<std::uint64_t>(v);
}

}  // namespace detail

/// Serializes one record as a single JSON line (no trailing newline).
inline std::string record_to_json_line(const EvalRecord& r) {
  nlohmann::ordered_json j;
  j["genome"] = r.canonical_genome;
  j["fitness"] = r.fitness;
  j["source"] = fitness_source_name(r.source);
  j["cost"] = {{"params", r.cost.params},
               {"act_bytes", r.cost.activation_bytes},
               {"layers", r.cost.primal_layers}};
  j["ctx"] = detail::hex16(r.context_hash);
  j["swap"] = r.swap;
  j["gen"] = r.gen;
  j["seed"] = r.seed;
  return j.dump();
}

inline void append_record(std::ostream& out, const EvalRecord& r) {
  out << record_to_json_line(r) << '\n';
}

inline void append_record(const std::filesystem::path& path, const EvalRecord& r) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot open evaluation log '" + path.string() + "' for append");
  append_record(out, r);
}

/// Parses one JSON-line record; line_no is used in error messages only.
inline EvalRecord record_from_json_line(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad record JSON: ") + e.what(), line_no);
  }
  auto need = [&](const char* key) -> const nlohmann::json& {
    auto it = j.find(key);
    if (it == j.end())
      throw ParseError(std::string("record missing key '") + key + "'", line_no);
    return *it;
  };
  EvalRecord r;
  try {
    r.canonical_genome = need("genome").get<std::string>();
    r.fitness = need("fitness").get<double>();
    const std::string source = need("source").get<std::string>();
    if (source == "oracle")
      r.source = FitnessSource::oracle;
    else if (source == "predictor")
      r.source = FitnessSource::predictor;
    else
      throw ParseError("unknown fitness source '" + source + "'", line_no);
    const auto& cost = need("cost");
    r.cost.params = cost.at("params").get<std::int64_t>();
    r.cost.activation_bytes = cost.at("act_bytes").get<std::int64_t>();
    r.cost.primal_layers = cost.at("layers").get<std::int64_t>();
    r.context_hash = detail::parse_hex16(need("ctx").get<std::string>(), line_no);
    r.swap = need("swap").get<int>();
    r.gen = need("gen").get<int>();
    r.seed = need("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("record field type error: ") + e.what(), line_no);
  }
  if (!std::isfinite(r.fitness)) throw ParseError("non-finite fitness", line_no);
  return r;
}

/// Loads an append-only JSON-lines evaluation log. A trailing partial line
/// (crash remnant) is discarded; when `warning` is non-null it receives a
/// note about the discard. Malformed complete lines raise ParseError with
/// their line number.
inline std::vector<EvalRecord> load_records(const std::filesystem::path& path,
                                            std::string* warning = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open evaluation log '" + path.string() + "'");
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::vector<EvalRecord> records;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < content.size()) {
    const std::size_t nl = content.find('\n', start);
    ++line_no;
    if (nl == std::string::npos) {
      // Unterminated final segment: keep it when it still parses as a full
      // record, otherwise treat it as a crash-truncated write.
      const std::string tail = content.substr(start);
      try {
        records.push_back(record_from_json_line(tail, line_no));
      } catch (const ParseError&) {
        if (warning)
          *warning = "discarded partial trailing line " + std::to_string(line_no);
      }
      break;
    }
    const std::string line = content.substr(start, nl - start);
    start = nl + 1;
    if (line.empty()) continue;
    records.push_back(record_from_json_line(line, line_no));
  }
  return records;
}

}  // namespace iternas
