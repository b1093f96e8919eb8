#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iternas/cost_model.hpp"
#include "iternas/errors.hpp"
#include "iternas/evaluator.hpp"
#include "iternas/evolution.hpp"
#include "iternas/predictor.hpp"
#include "iternas/search_space.hpp"

namespace iternas {

/// Everything one run needs. Loaded from a single JSON document; every
/// section is optional except output_dir and falls back to documented
/// defaults (default space, unconstrained hardware, unbounded budgets,
/// reference search settings, linear synthetic oracle, oracle-only
/// scoring).
struct RunConfig {
  SearchSpace space = default_space();
  HardwareProfile hardware = unconstrained_profile();
  CostProfile budgets;
  SearchConfig search;
  OracleSpec oracle;
  PredictorPolicy predictor;
  std::filesystem::path output_dir;
};

namespace detail {

constexpr std::int64_t kUnboundedModule = std::int64_t{1} << 56;
constexpr std::int64_t kUnboundedTotal = std::int64_t{1} << 57;

inline CostProfile unbounded_budgets() {
  CostProfile p;
  p.tau_total = {kUnboundedTotal, kUnboundedTotal, kUnboundedTotal};
  p.tau_backbone = {kUnboundedModule, kUnboundedModule, kUnboundedModule};
  p.tau_head = {kUnboundedModule, kUnboundedModule, kUnboundedModule};
  return p;
}

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const auto& a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
inline void assign_if(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + std::string(key) + "' in " + where + ": " + e.what());
    }
  }
}

inline HeadRole head_role_from_string(const std::string& s) {
  if (s == "fpn") return HeadRole::fpn;
  if (s == "pan") return HeadRole::pan;
  if (s == "yolo_head") return HeadRole::yolo_head;
  throw ConfigError("unknown head role '" + s + "' (expected fpn, pan, or yolo_head)");
}

inline SearchSpace space_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "default") return default_space();
    throw ConfigError("unknown space preset '" + j.get<std::string>() + "'");
  }
  check_keys(j,
             {"num_stages", "depth_min", "depth_max", "width_multipliers", "expansion_ratios",
              "stage_base_widths", "head_blocks", "input_resolution"},
             "space");
  SearchSpace s = default_space();
  assign_if(j, "num_stages", s.num_stages, "space");
  assign_if(j, "depth_min", s.depth_min, "space");
  assign_if(j, "depth_max", s.depth_max, "space");
  assign_if(j, "width_multipliers", s.width_multipliers, "space");
  assign_if(j, "expansion_ratios", s.expansion_ratios, "space");
  assign_if(j, "stage_base_widths", s.stage_base_widths, "space");
  assign_if(j, "input_resolution", s.input_resolution, "space");
  if (auto it = j.find("head_blocks"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("space.head_blocks must be an array");
    s.head_blocks.clear();
    int auto_id = 0;
    for (const auto& hj : *it) {
      check_keys(hj, {"slot_id", "role", "base_width"}, "space.head_blocks[]");
      HeadBlockSlot slot;
      slot.slot_id = auto_id++;
      assign_if(hj, "slot_id", slot.slot_id, "space.head_blocks[]");
      std::string role = "fpn";
      assign_if(hj, "role", role, "space.head_blocks[]");
      slot.role = head_role_from_string(role);
      assign_if(hj, "base_width", slot.base_width, "space.head_blocks[]");
      s.head_blocks.push_back(slot);
    }
  }
  validate_space(s);
  return s;
}

inline HardwareProfile hardware_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const std::string name = j.get<std::string>();
    if (name == "max78002") return max78002_profile();
    if (name == "unconstrained") return unconstrained_profile();
    throw ConfigError("unknown hardware preset '" + name + "'");
  }
  check_keys(j,
             {"max_channels", "max_primal_layers", "max_activation_bytes",
              "activation_bytes_per_element", "streaming_mode"},
             "hardware");
  HardwareProfile hw = unconstrained_profile();
  assign_if(j, "max_channels", hw.max_channels, "hardware");
  assign_if(j, "max_primal_layers", hw.max_primal_layers, "hardware");
  assign_if(j, "max_activation_bytes", hw.max_activation_bytes, "hardware");
  assign_if(j, "activation_bytes_per_element", hw.activation_bytes_per_element, "hardware");
  assign_if(j, "streaming_mode", hw.streaming_mode, "hardware");
  validate_hardware(hw);
  return hw;
}

inline CostVector cost_vector_from_json(const nlohmann::json& j, const CostVector& defaults,
                                        const std::string& where) {
  check_keys(j, {"params", "act_bytes", "layers"}, where);
  CostVector v = defaults;
  assign_if(j, "params", v.params, where);
  assign_if(j, "act_bytes", v.activation_bytes, where);
  assign_if(j, "layers", v.primal_layers, where);
  return v;
}

inline CostProfile budgets_from_json(const nlohmann::json& j) {
  check_keys(j, {"total", "backbone", "head"}, "budgets");
  CostProfile p = unbounded_budgets();
  if (auto it = j.find("total"); it != j.end())
    p.tau_total = cost_vector_from_json(*it, p.tau_total, "budgets.total");
  if (auto it = j.find("backbone"); it != j.end())
    p.tau_backbone = cost_vector_from_json(*it, p.tau_backbone, "budgets.backbone");
  if (auto it = j.find("head"); it != j.end())
    p.tau_head = cost_vector_from_json(*it, p.tau_head, "budgets.head");
  validate_budgets(p);
  return p;
}

inline SearchConfig search_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"population_size", "mutation_prob", "parent_ratio", "mutation_ratio",
              "tournament_size", "generations_per_swap", "max_module_swaps", "passthrough_ratio",
              "resample_limit", "seed", "patience_swaps", "improvement_tol"},
             "search");
  SearchConfig c;
  assign_if(j, "population_size", c.population_size, "search");
  assign_if(j, "mutation_prob", c.mutation_prob, "search");
  assign_if(j, "parent_ratio", c.parent_ratio, "search");
  assign_if(j, "mutation_ratio", c.mutation_ratio, "search");
  assign_if(j, "tournament_size", c.tournament_size, "search");
  assign_if(j, "generations_per_swap", c.generations_per_swap, "search");
  assign_if(j, "max_module_swaps", c.max_module_swaps, "search");
  assign_if(j, "passthrough_ratio", c.passthrough_ratio, "search");
  assign_if(j, "resample_limit", c.resample_limit, "search");
  assign_if(j, "seed", c.seed, "search");
  assign_if(j, "patience_swaps", c.patience_swaps, "search");
  assign_if(j, "improvement_tol", c.improvement_tol, "search");
  validate_search_config(c);
  return c;
}

inline OracleSpec oracle_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"kind", "weight_seed", "weight_scale", "lambda_c", "params_scale", "interaction_scale",
              "coupling_scale", "noise_std", "noise_seed", "command", "timeout_ms"},
             "oracle");
  OracleSpec spec;
  std::string kind = "synthetic_linear";
  assign_if(j, "kind", kind, "oracle");
  if (kind == "synthetic_linear")
    spec.kind = OracleKind::synthetic_linear;
  else if (kind == "synthetic_rugged")
    spec.kind = OracleKind::synthetic_rugged;
  else if (kind == "external_command")
    spec.kind = OracleKind::external_command;
  else
    throw ConfigError("unknown oracle kind '" + kind + "'");
  assign_if(j, "weight_seed", spec.weight_seed, "oracle");
  assign_if(j, "weight_scale", spec.weight_scale, "oracle");
  assign_if(j, "lambda_c", spec.lambda_c, "oracle");
  assign_if(j, "params_scale", spec.params_scale, "oracle");
  assign_if(j, "interaction_scale", spec.interaction_scale, "oracle");
  assign_if(j, "coupling_scale", spec.coupling_scale, "oracle");
  assign_if(j, "noise_std", spec.noise_std, "oracle");
  assign_if(j, "noise_seed", spec.noise_seed, "oracle");
  assign_if(j, "command", spec.command, "oracle");
  assign_if(j, "timeout_ms", spec.timeout_ms, "oracle");
  validate_oracle(spec);
  return spec;
}

inline PredictorPolicy predictor_from_json(const nlohmann::json& j) {
  check_keys(j, {"min_training_records", "oracle_fraction", "refresh_interval", "ridge_lambda"},
             "predictor");
  PredictorPolicy p;
  assign_if(j, "min_training_records", p.min_training_records, "predictor");
  assign_if(j, "oracle_fraction", p.oracle_fraction, "predictor");
  assign_if(j, "refresh_interval", p.refresh_interval, "predictor");
  assign_if(j, "ridge_lambda", p.ridge_lambda, "predictor");
  validate_policy(p);
  return p;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::check_keys(
      j, {"space", "hardware", "budgets", "search", "oracle", "predictor", "output_dir"},
      "config");
  RunConfig cfg;
  cfg.budgets = detail::unbounded_budgets();
  if (auto it = j.find("space"); it != j.end()) cfg.space = detail::space_from_json(*it);
  if (auto it = j.find("hardware"); it != j.end()) cfg.hardware = detail::hardware_from_json(*it);
  if (auto it = j.find("budgets"); it != j.end()) cfg.budgets = detail::budgets_from_json(*it);
  if (auto it = j.find("search"); it != j.end()) cfg.search = detail::search_from_json(*it);
  if (auto it = j.find("oracle"); it != j.end()) cfg.oracle = detail::oracle_from_json(*it);
  if (auto it = j.find("predictor"); it != j.end())
    cfg.predictor = detail::predictor_from_json(*it);
  if (auto it = j.find("output_dir"); it != j.end())
    cfg.output_dir = it->get<std::string>();
  else
    throw ConfigError("config requires output_dir");
  validate_space(cfg.space);
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(j);
}

/// Echo of the effective search settings, printed in the run header.
inline nlohmann::ordered_json search_config_to_json(const SearchConfig& c) {
  nlohmann::ordered_json j;
  j["population_size"] = c.population_size;
  j["mutation_prob"] = c.mutation_prob;
  j["parent_ratio"] = c.parent_ratio;
  j["mutation_ratio"] = c.mutation_ratio;
  j["tournament_size"] = c.tournament_size;
  j["generations_per_swap"] = c.generations_per_swap;
  j["max_module_swaps"] = c.max_module_swaps;
  j["passthrough_ratio"] = c.passthrough_ratio;
  j["resample_limit"] = c.resample_limit;
  j["seed"] = c.seed;
  j["patience_swaps"] = c.patience_swaps;
  j["improvement_tol"] = c.improvement_tol;
  return j;
}

}  // namespace iternas
