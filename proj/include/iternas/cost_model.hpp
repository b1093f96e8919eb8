#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "iternas/errors.hpp"
#include "iternas/search_space.hpp"

namespace iternas {

/// MAX78002-class accelerator limits. streaming_mode exempts the first
/// stage's feature maps from the activation check, approximating the
/// accelerator's buffer-reuse mode that permits higher early-stage
/// resolutions.
struct HardwareProfile {
  std::int64_t max_channels = 0;
  std::int64_t max_primal_layers = 0;
  std::int64_t max_activation_bytes = 0;
  std::int64_t activation_bytes_per_element = 1;
  bool streaming_mode = false;

  bool operator==(const HardwareProfile&) const = default;
};

inline void validate_hardware(const HardwareProfile& hw) {
  if (hw.max_channels <= 0 || hw.max_primal_layers <= 0 || hw.max_activation_bytes <= 0 ||
      hw.activation_bytes_per_element <= 0)
    throw ConfigError("hardware limits must all be > 0");
}

/// The MAX78002 preset: 2048 channels, 128 primal layers, 80 KiB activation
/// memory at one byte per element, streaming on.
inline HardwareProfile max78002_profile() {
  return {2048, 128, 81920, 1, true};
}

/// A profile so large it never gates anything; the default when a run
/// targets budgets only.
inline HardwareProfile unconstrained_profile() {
  const std::int64_t big = std::int64_t{1} << 56;
  return {big, big, big, 1, false};
}

/// One point in cost space: parameter count, peak activation bytes, and
/// accelerator primal layer count.
struct CostVector {
  std::int64_t params = 0;
  std::int64_t activation_bytes = 0;
  std::int64_t primal_layers = 0;

  bool operator==(const CostVector&) const = default;

  friend CostVector operator+(const CostVector& a, const CostVector& b) {
    return {a.params + b.params, a.activation_bytes + b.activation_bytes,
            a.primal_layers + b.primal_layers};
  }
};

/// true iff a <= b in every component.
inline bool leq(const CostVector& a, const CostVector& b) {
  return a.params <= b.params && a.activation_bytes <= b.activation_bytes &&
         a.primal_layers <= b.primal_layers;
}

/// Per-module budgets tau_b, tau_h and the overall budget tau. The split
/// must satisfy tau_backbone + tau_head <= tau_total componentwise so that
/// module-feasible candidates always compose into a deployable network.
struct CostProfile {
  CostVector tau_total;
  CostVector tau_backbone;
  CostVector tau_head;

  bool operator==(const CostProfile&) const = default;
};

inline void validate_budgets(const CostProfile& p) {
  if (!leq(p.tau_backbone + p.tau_head, p.tau_total))
    throw BudgetError("tau_backbone + tau_head exceeds tau_total");
}

/// One exceeded hardware limit: (constraint name, limit, measured).
struct Violation {
  std::string constraint;
  std::int64_t limit = 0;
  std::int64_t measured = 0;

  bool operator==(const Violation&) const = default;
};

/// Measured resource usage of a genome. Violations are data, not failures:
/// an infeasible genome still has a complete report.
struct CostReport {
  CostVector backbone;
  CostVector head;
  CostVector total;  // == backbone + head componentwise
  std::vector<Violation> violations;
};

/// Channel count after width scaling; round-half-away-from-zero.
inline std::int64_t scaled_channels(std::int64_t base_width, double multiplier) {
  return std::llround(static_cast<double>(base_width) * multiplier);
}

/// Parameters of one residual bottleneck block (1x1 reduce, 3x3, 1x1
/// expand), bias-free and excluding normalization and shortcut projection:
/// with mid = max(1, round(in_channels * expansion)), the count is
/// in*mid + 9*mid^2 + mid*in.
inline std::int64_t block_params(std::int64_t in_channels, double expansion) {
  const std::int64_t mid =
      std::max<std::int64_t>(1, std::llround(static_cast<double>(in_channels) * expansion));
  return in_channels * mid + 9 * mid * mid + mid * in_channels;
}

enum class BudgetScope { backbone, head, both };

inline BudgetScope scope_of(ModuleKind m) {
  return m == ModuleKind::backbone ? BudgetScope::backbone : BudgetScope::head;
}

/// Analytic cost of a genome.
///
/// Conventions (fixed so the independent flat-enumeration oracle can match
/// exactly):
///   - stage channels = round(base_width * width_multiplier); head slot
///     channels = round(slot base_width * width value)
///   - params: sum of block_params over all active backbone blocks and all
///     head blocks; the stem and detection outputs carry no counted params
///   - primal layers: 3 per block, plus 1 stem (backbone) and 1 per
///     yolo_head slot (detection outputs, head)
///   - spatial side halves at each stage transition starting from
///     input_resolution (stage i runs at input_resolution >> i, floor 1);
///     head blocks run at the last stage's side
///   - activation bytes per module = peak single feature map in bytes over
///     that module's block boundaries; with streaming_mode the first
///     stage's maps are exempt everywhere they are counted
inline CostReport genome_cost(const Genome& g, const SearchSpace& s, const HardwareProfile& hw) {
  validate_genome(g, s);
  CostReport r;

  const auto side_of_stage = [&](int stage) {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(s.input_resolution) >> stage);
  };

  std::int64_t peak_channels = 0;
  std::int64_t backbone_peak_map = 0;

  std::int64_t backbone_blocks = 0;
  for (int i = 0; i < s.num_stages; ++i) {
    const auto& sg = g.backbone[static_cast<std::size_t>(i)];
    const std::int64_t channels =
        scaled_channels(s.stage_base_widths[static_cast<std::size_t>(i)],
                        s.width_multipliers[static_cast<std::size_t>(sg.width_index)]);
    peak_channels = std::max(peak_channels, channels);
    for (int e : sg.expansion_indices) {
      const double expansion = s.expansion_ratios[static_cast<std::size_t>(e)];
      r.backbone.params += block_params(channels, expansion);
      const std::int64_t mid = std::max<std::int64_t>(
          1, std::llround(static_cast<double>(channels) * expansion));
      peak_channels = std::max(peak_channels, mid);
    }
    backbone_blocks += sg.depth;
    if (!(hw.streaming_mode && i == 0)) {
      const std::int64_t side = side_of_stage(i);
      backbone_peak_map = std::max(backbone_peak_map,
                                   side * side * channels * hw.activation_bytes_per_element);
    }
  }
  r.backbone.primal_layers = 1 + 3 * backbone_blocks;  // stem + 3 convs per block
  r.backbone.activation_bytes = backbone_peak_map;

  const std::int64_t head_side = side_of_stage(s.num_stages - 1);
  std::int64_t head_peak_map = 0;
  std::int64_t detection_outputs = 0;
  for (std::size_t i = 0; i < s.head_blocks.size(); ++i) {
    const auto& slot = s.head_blocks[i];
    const auto& hg = g.head[i];
    const std::int64_t channels =
        scaled_channels(slot.base_width,
                        s.width_multipliers[static_cast<std::size_t>(hg.width_index)]);
    const double expansion = s.expansion_ratios[static_cast<std::size_t>(hg.expansion_index)];
    peak_channels = std::max(peak_channels, channels);
    const std::int64_t mid =
        std::max<std::int64_t>(1, std::llround(static_cast<double>(channels) * expansion));
    peak_channels = std::max(peak_channels, mid);
    r.head.params += block_params(channels, expansion);
    head_peak_map =
        std::max(head_peak_map, head_side * head_side * channels * hw.activation_bytes_per_element);
    if (slot.role == HeadRole::yolo_head) ++detection_outputs;
  }
  r.head.primal_layers = 3 * static_cast<std::int64_t>(s.head_blocks.size()) + detection_outputs;
  r.head.activation_bytes = head_peak_map;

  r.total = r.backbone + r.head;

  if (peak_channels > hw.max_channels)
    r.violations.push_back({"max_channels", hw.max_channels, peak_channels});
  if (r.total.primal_layers > hw.max_primal_layers)
    r.violations.push_back({"max_primal_layers", hw.max_primal_layers, r.total.primal_layers});
  const std::int64_t peak_map = std::max(backbone_peak_map, head_peak_map);
  if (peak_map > hw.max_activation_bytes)
    r.violations.push_back({"max_activation_bytes", hw.max_activation_bytes, peak_map});

  return r;
}

/// true iff the report has no hardware violations and the addressed
/// module's cost fits its budget componentwise (`both` checks the total
/// against tau_total).
inline bool is_feasible(const CostReport& r, const CostProfile& p, BudgetScope scope) {
  if (!r.violations.empty()) return false;
  switch (scope) {
    case BudgetScope::backbone: return leq(r.backbone, p.tau_backbone);
    case BudgetScope::head: return leq(r.head, p.tau_head);
    default: return leq(r.total, p.tau_total);
  }
}

inline bool is_feasible(const CostReport& r, const CostProfile& p, ModuleKind m) {
  return is_feasible(r, p, scope_of(m));
}

}  // namespace iternas
