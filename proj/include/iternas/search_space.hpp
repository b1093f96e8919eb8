#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "iternas/errors.hpp"
#include "iternas/rng.hpp"

namespace iternas {

/// The two alternately optimized architecture modules. The head includes
/// the neck (FPN/PAN) blocks.
enum class ModuleKind { backbone, head };

inline ModuleKind other_module(ModuleKind m) {
  return m == ModuleKind::backbone ? ModuleKind::head : ModuleKind::backbone;
}

inline const char* module_name(ModuleKind m) {
  return m == ModuleKind::backbone ? "backbone" : "head";
}

enum class HeadRole { fpn, pan, yolo_head };

inline const char* head_role_name(HeadRole r) {
  switch (r) {
    case HeadRole::fpn: return "fpn";
    case HeadRole::pan: return "pan";
    default: return "yolo_head";
  }
}

/// One fixed-depth residual block slot in the neck/head. Slots participate
/// in the search only through width and expansion choices.
struct HeadBlockSlot {
  int slot_id = 0;
  HeadRole role = HeadRole::fpn;
  int base_width = 0;

  bool operator==(const HeadBlockSlot&) const = default;
};

/// Legal value sets for every genome dimension.
struct SearchSpace {
  int num_stages = 0;
  int depth_min = 0;
  int depth_max = 0;
  std::vector<double> width_multipliers;
  std::vector<double> expansion_ratios;
  std::vector<int> stage_base_widths;  // one per stage
  std::vector<HeadBlockSlot> head_blocks;
  int input_resolution = 0;  // square side, pixels

  bool operator==(const SearchSpace&) const = default;
};

/// Per-stage backbone genes. All blocks in a stage share one width index;
/// expansion_indices holds exactly one entry per active block, so its
/// length always equals depth.
struct StageGene {
  int depth = 0;
  int width_index = 0;
  std::vector<int> expansion_indices;

  bool operator==(const StageGene&) const = default;
};

/// Per-slot head genes.
struct HeadGene {
  int width_index = 0;
  int expansion_index = 0;

  bool operator==(const HeadGene&) const = default;
};

/// A complete architecture configuration: backbone and head module genes.
struct Genome {
  std::vector<StageGene> backbone;
  std::vector<HeadGene> head;

  bool operator==(const Genome&) const = default;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

inline bool strictly_increasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i - 1] < v[i])) return false;
  return true;
}

}  // namespace detail

/// Checks SearchSpace invariants; throws ConfigError on violation.
inline void validate_space(const SearchSpace& s) {
  detail::require(s.num_stages >= 1, "num_stages must be >= 1");
  detail::require(s.depth_min >= 1, "depth_min must be >= 1");
  detail::require(s.depth_min <= s.depth_max, "depth_min must be <= depth_max");
  detail::require(!s.width_multipliers.empty(), "width_multipliers must be non-empty");
  detail::require(!s.expansion_ratios.empty(), "expansion_ratios must be non-empty");
  detail::require(detail::strictly_increasing(s.width_multipliers),
                  "width_multipliers must be strictly increasing");
  detail::require(detail::strictly_increasing(s.expansion_ratios),
                  "expansion_ratios must be strictly increasing");
  detail::require(s.width_multipliers.front() > 0.0, "width multipliers must be positive");
  detail::require(s.expansion_ratios.front() > 0.0, "expansion ratios must be positive");
  detail::require(static_cast<int>(s.stage_base_widths.size()) == s.num_stages,
                  "stage_base_widths must have one entry per stage");
  for (int w : s.stage_base_widths) detail::require(w > 0, "stage base widths must be > 0");
  detail::require(s.input_resolution >= 1, "input_resolution must be >= 1");
  std::vector<int> ids;
  for (const auto& h : s.head_blocks) {
    detail::require(h.base_width > 0, "head slot base widths must be > 0");
    ids.push_back(h.slot_id);
  }
  std::sort(ids.begin(), ids.end());
  detail::require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(),
                  "head slot ids must be unique");
}

/// The default search space: stage depths in [2, 8], width multipliers
/// {0.8, 1.0, 1.25, 1.5} and expansion ratios {0.20, 0.25, 0.35, 0.45, 0.55}.
/// Stage count (4), base widths (64/128/256/512), the five-slot head layout
/// and the 640 px input are conventions; all are plain fields, so callers
/// can reconfigure them freely.
inline SearchSpace default_space() {
  SearchSpace s;
  s.num_stages = 4;
  s.depth_min = 2;
  s.depth_max = 8;
  s.width_multipliers = {0.8, 1.0, 1.25, 1.5};
  s.expansion_ratios = {0.20, 0.25, 0.35, 0.45, 0.55};
  s.stage_base_widths = {64, 128, 256, 512};
  s.head_blocks = {
      {0, HeadRole::fpn, 256},
      {1, HeadRole::fpn, 128},
      {2, HeadRole::pan, 128},
      {3, HeadRole::pan, 256},
      {4, HeadRole::yolo_head, 256},
  };
  s.input_resolution = 640;
  return s;
}

/// Checks that a genome is well-formed for the space: shapes line up and
/// every index addresses a valid position. Throws ValidationError naming
/// the offending field (e.g. "stage.0.width").
inline void validate_genome(const Genome& g, const SearchSpace& s) {
  const auto nw = static_cast<int>(s.width_multipliers.size());
  const auto ne = static_cast<int>(s.expansion_ratios.size());
  if (static_cast<int>(g.backbone.size()) != s.num_stages)
    throw ValidationError("stage", "expected " + std::to_string(s.num_stages) + " stages, got " +
                                       std::to_string(g.backbone.size()));
  if (g.head.size() != s.head_blocks.size())
    throw ValidationError("head", "expected " + std::to_string(s.head_blocks.size()) +
                                      " head genes, got " + std::to_string(g.head.size()));
  for (std::size_t i = 0; i < g.backbone.size(); ++i) {
    const auto& sg = g.backbone[i];
    const std::string key = "stage." + std::to_string(i);
    if (sg.depth < s.depth_min || sg.depth > s.depth_max)
      throw ValidationError(key + ".depth", "depth " + std::to_string(sg.depth) +
                                                " outside [" + std::to_string(s.depth_min) + ", " +
                                                std::to_string(s.depth_max) + "]");
    if (sg.width_index < 0 || sg.width_index >= nw)
      throw ValidationError(key + ".width", "width index " + std::to_string(sg.width_index) +
                                                " outside [0, " + std::to_string(nw) + ")");
    if (static_cast<int>(sg.expansion_indices.size()) != sg.depth)
      throw ValidationError(key + ".exp",
                            "expected one expansion index per active block (" +
                                std::to_string(sg.depth) + "), got " +
                                std::to_string(sg.expansion_indices.size()));
    for (int e : sg.expansion_indices)
      if (e < 0 || e >= ne)
        throw ValidationError(key + ".exp", "expansion index " + std::to_string(e) +
                                                " outside [0, " + std::to_string(ne) + ")");
  }
  for (std::size_t i = 0; i < g.head.size(); ++i) {
    const auto& hg = g.head[i];
    const std::string key = "head." + std::to_string(i);
    if (hg.width_index < 0 || hg.width_index >= nw)
      throw ValidationError(key + ".width", "width index " + std::to_string(hg.width_index) +
                                                " outside [0, " + std::to_string(nw) + ")");
    if (hg.expansion_index < 0 || hg.expansion_index >= ne)
      throw ValidationError(key + ".exp", "expansion index " + std::to_string(hg.expansion_index) +
                                              " outside [0, " + std::to_string(ne) + ")");
  }
}

/// Draws every dimension independently and uniformly from its legal set.
///
/// Draw order is fixed and part of the determinism contract: for each stage
/// in order, depth, then width index, then one expansion index per active
/// block; then width and expansion for each head slot in order.
inline Genome sample_uniform(const SearchSpace& s, Rng& rng) {
  Genome g;
  g.backbone.reserve(s.num_stages);
  for (int i = 0; i < s.num_stages; ++i) {
    StageGene sg;
    sg.depth = static_cast<int>(rng.uniform_int(s.depth_min, s.depth_max));
    sg.width_index = static_cast<int>(rng.uniform_index(s.width_multipliers.size()));
    sg.expansion_indices.resize(sg.depth);
    for (int j = 0; j < sg.depth; ++j)
      sg.expansion_indices[j] = static_cast<int>(rng.uniform_index(s.expansion_ratios.size()));
    g.backbone.push_back(std::move(sg));
  }
  g.head.reserve(s.head_blocks.size());
  for (std::size_t i = 0; i < s.head_blocks.size(); ++i) {
    HeadGene hg;
    hg.width_index = static_cast<int>(rng.uniform_index(s.width_multipliers.size()));
    hg.expansion_index = static_cast<int>(rng.uniform_index(s.expansion_ratios.size()));
    g.head.push_back(hg);
  }
  return g;
}

/// Resamples only the genes of `module` uniformly; the other module's genes
/// are copied verbatim from `context`. Used for diversity augmentation and
/// feasibility-fallback sampling inside a module-scoped search.
inline Genome sample_module_uniform(const Genome& context, ModuleKind module, const SearchSpace& s,
                                    Rng& rng) {
  Genome fresh = sample_uniform(s, rng);
  Genome g = context;
  if (module == ModuleKind::backbone)
    g.backbone = std::move(fresh.backbone);
  else
    g.head = std::move(fresh.head);
  return g;
}

/// Length of the feature vector produced by encode(); a pure function of
/// the space.
inline std::size_t encoded_length(const SearchSpace& s) {
  return static_cast<std::size_t>(s.num_stages) * (3 + s.width_multipliers.size()) +
         s.head_blocks.size() * 2;
}

/// Fixed-length numeric encoding, independent of depth: per stage
/// [normalized depth, width multiplier value, mean expansion value over
/// active blocks, one-hot width index]; per head slot [width value,
/// expansion value]. Values (not indices) are emitted so the predictor
/// sees monotone physical quantities.
inline std::vector<double> encode(const Genome& g, const SearchSpace& s) {
  validate_genome(g, s);
  std::vector<double> v;
  v.reserve(encoded_length(s));
  const double depth_span = std::max(1, s.depth_max - s.depth_min);
  for (const auto& sg : g.backbone) {
    v.push_back(static_cast<double>(sg.depth - s.depth_min) / depth_span);
    v.push_back(s.width_multipliers[sg.width_index]);
    double mean_exp = 0.0;
    for (int e : sg.expansion_indices) mean_exp += s.expansion_ratios[e];
    mean_exp /= static_cast<double>(sg.expansion_indices.size());
    v.push_back(mean_exp);
    for (std::size_t w = 0; w < s.width_multipliers.size(); ++w)
      v.push_back(w == static_cast<std::size_t>(sg.width_index) ? 1.0 : 0.0);
  }
  for (const auto& hg : g.head) {
    v.push_back(s.width_multipliers[hg.width_index]);
    v.push_back(s.expansion_ratios[hg.expansion_index]);
  }
  return v;
}

namespace detail {

inline void append_stage_pairs(std::vector<std::string>& pairs, const Genome& g) {
  for (std::size_t i = 0; i < g.backbone.size(); ++i) {
    const auto& sg = g.backbone[i];
    const std::string key = "stage." + std::to_string(i);
    pairs.push_back(key + ".depth=" + std::to_string(sg.depth));
    pairs.push_back(key + ".width=" + std::to_string(sg.width_index));
    std::string exps;
    for (std::size_t j = 0; j < sg.expansion_indices.size(); ++j) {
      if (j) exps += ',';
      exps += std::to_string(sg.expansion_indices[j]);
    }
    pairs.push_back(key + ".exp=" + exps);
  }
}

inline void append_head_pairs(std::vector<std::string>& pairs, const Genome& g) {
  for (std::size_t i = 0; i < g.head.size(); ++i) {
    const std::string key = "head." + std::to_string(i);
    pairs.push_back(key + ".width=" + std::to_string(g.head[i].width_index));
    pairs.push_back(key + ".exp=" + std::to_string(g.head[i].expansion_index));
  }
}

inline std::string join_sorted(std::vector<std::string> pairs) {
  std::sort(pairs.begin(), pairs.end());
  std::string out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (i) out += ' ';
    out += pairs[i];
  }
  return out;
}

}  // namespace detail

/// Canonical text form: `key=value` pairs sorted lexicographically and
/// joined by single spaces, e.g. `stage.0.depth=3 stage.0.exp=2,0,4 ...`.
/// Equal genomes always produce byte-identical text; the text is the
/// deduplication key for evaluation caching.
inline std::string genome_to_canonical_text(const Genome& g) {
  std::vector<std::string> pairs;
  detail::append_stage_pairs(pairs, g);
  detail::append_head_pairs(pairs, g);
  return detail::join_sorted(std::move(pairs));
}

/// Canonical text of one module's genes only; the deduplication key used
/// by the per-module memory buffers.
inline std::string canonical_module_text(const Genome& g, ModuleKind module) {
  std::vector<std::string> pairs;
  if (module == ModuleKind::backbone)
    detail::append_stage_pairs(pairs, g);
  else
    detail::append_head_pairs(pairs, g);
  return detail::join_sorted(std::move(pairs));
}

/// Digest of the fixed module's genes; recorded with every evaluation so
/// stale fitness (measured against a different fixed context) is detectable.
inline std::uint64_t context_digest(const Genome& g, ModuleKind active_module) {
  return fnv1a64(canonical_module_text(g, other_module(active_module)));
}

namespace detail {

struct Token {
  std::string key;
  std::string value;
  std::size_t offset;  // 1-based offset of the token start
};

inline std::vector<Token> tokenize_kv(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::string_view tok = text.substr(start, i - start);
    const std::size_t eq = tok.find('=');
    if (eq == std::string_view::npos || eq == 0 || eq == tok.size() - 1)
      throw ParseError("expected key=value, got '" + std::string(tok) + "'", start + 1);
    tokens.push_back(
        {std::string(tok.substr(0, eq)), std::string(tok.substr(eq + 1)), start + 1});
  }
  return tokens;
}

inline int parse_int_field(const std::string& value, const std::string& key, std::size_t offset) {
  if (value.empty()) throw ParseError("empty value for '" + key + "'", offset);
  std::size_t pos = 0;
  int out = 0;
  try {
    out = std::stoi(value, &pos);
  } catch (const std::exception&) {
    throw ParseError("non-numeric value '" + value + "' for '" + key + "'", offset);
  }
  if (pos != value.size())
    throw ParseError("trailing characters in value '" + value + "' for '" + key + "'", offset);
  return out;
}

inline std::vector<int> parse_int_list(const std::string& value, const std::string& key,
                                       std::size_t offset) {
  std::vector<int> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = value.find(',', start);
    const std::string part = value.substr(start, comma == std::string::npos ? std::string::npos
                                                                            : comma - start);
    out.push_back(parse_int_field(part, key, offset));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

/// Parses canonical (or any whitespace-separated key=value) genome text and
/// validates it against the space. Throws ParseError with a character
/// offset for malformed text and ValidationError naming the field for
/// out-of-range indices.
inline Genome genome_from_canonical_text(std::string_view text, const SearchSpace& space) {
  const auto tokens = detail::tokenize_kv(text);
  std::map<std::string, detail::Token> by_key;
  for (const auto& t : tokens) {
    if (!by_key.emplace(t.key, t).second)
      throw ParseError("duplicate key '" + t.key + "'", t.offset);
  }
  auto take = [&](const std::string& key) -> const detail::Token& {
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ParseError("missing key '" + key + "'", text.size() + 1);
    return it->second;
  };

  Genome g;
  g.backbone.resize(static_cast<std::size_t>(space.num_stages));
  for (int i = 0; i < space.num_stages; ++i) {
    const std::string key = "stage." + std::to_string(i);
    const auto& d = take(key + ".depth");
    const auto& w = take(key + ".width");
    const auto& e = take(key + ".exp");
    StageGene sg;
    sg.depth = detail::parse_int_field(d.value, d.key, d.offset);
    sg.width_index = detail::parse_int_field(w.value, w.key, w.offset);
    sg.expansion_indices = detail::parse_int_list(e.value, e.key, e.offset);
    g.backbone[static_cast<std::size_t>(i)] = std::move(sg);
  }
  g.head.resize(space.head_blocks.size());
  for (std::size_t i = 0; i < space.head_blocks.size(); ++i) {
    const std::string key = "head." + std::to_string(i);
    const auto& w = take(key + ".width");
    const auto& e = take(key + ".exp");
    g.head[i].width_index = detail::parse_int_field(w.value, w.key, w.offset);
    g.head[i].expansion_index = detail::parse_int_field(e.value, e.key, e.offset);
  }

  std::size_t expected = static_cast<std::size_t>(space.num_stages) * 3 + space.head_blocks.size() * 2;
  if (by_key.size() != expected) {
    for (const auto& [key, tok] : by_key) {
      const bool stage_key = key.rfind("stage.", 0) == 0;
      const bool head_key = key.rfind("head.", 0) == 0;
      if (!stage_key && !head_key) throw ParseError("unknown key '" + key + "'", tok.offset);
    }
    // All keys look plausible, so some referenced a stage/slot outside the
    // space.
    throw ParseError("unexpected extra keys for this space", tokens.empty() ? 1 : tokens.back().offset);
  }

  validate_genome(g, space);
  return g;
}

}  // namespace iternas
