#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <vector>

#include "iternas/cost_model.hpp"
#include "iternas/rng.hpp"
#include "iternas/search_space.hpp"
#include "support/flat_cost_oracle.hpp"
#include "support/test_spaces.hpp"

using namespace iternas;

namespace {

Genome minimal_genome(const SearchSpace& s) {
  Genome g;
  for (int i = 0; i < s.num_stages; ++i)
    g.backbone.push_back(
        {s.depth_min, 0, std::vector<int>(static_cast<std::size_t>(s.depth_min), 0)});
  g.head.assign(s.head_blocks.size(), {0, 0});
  return g;
}

}  // namespace

TEST_CASE("block params match the layer-by-layer sum", "[cost_model]") {
  // 16 ch, e=0.25: mid 4 -> 16*4 + 9*16 + 4*16 = 272
  CHECK(block_params(16, 0.25) == 272);
  // 64 ch, e=0.55: mid 35 -> 64*35 + 9*1225 + 35*64 = 15505
  CHECK(block_params(64, 0.55) == 15505);
}

TEST_CASE("block mid-channel count clamps at one", "[cost_model]") {
  // round(2 * 0.2) = 0 -> clamp to 1: 2*1 + 9*1 + 1*2 = 13
  CHECK(block_params(2, 0.2) == 13);
  CHECK(block_params(1, 0.2) == 11);
}

TEST_CASE("genome cost equals the flat-enumeration oracle on the minimal genome",
          "[cost_model]") {
  const SearchSpace s = default_space();
  const HardwareProfile hw = unconstrained_profile();
  const Genome g = minimal_genome(s);
  const CostReport r = genome_cost(g, s, hw);
  CHECK(r.backbone.params == testing::oracle_params(g, s, /*backbone_only=*/true));
  CHECK(r.head.params == testing::oracle_params(g, s, false, /*head_only=*/true));
  CHECK(r.total.params == testing::oracle_params(g, s));
  CHECK(r.total.primal_layers == testing::oracle_primal_layers(g, s));
}

TEST_CASE("doubling every stage depth adds exactly three layers per block", "[cost_model]") {
  const SearchSpace s = default_space();
  const HardwareProfile hw = unconstrained_profile();
  Rng rng(7);
  SearchSpace clamped = s;
  clamped.depth_max = 4;  // room to double
  for (int trial = 0; trial < 20; ++trial) {
    const Genome g = sample_uniform(clamped, rng);
    Genome doubled = g;
    std::int64_t added_blocks = 0;
    for (auto& sg : doubled.backbone) {
      const int extra = sg.depth;
      for (int j = 0; j < extra; ++j)
        sg.expansion_indices.push_back(sg.expansion_indices[static_cast<std::size_t>(j)]);
      sg.depth *= 2;
      added_blocks += extra;
    }
    const CostReport before = genome_cost(g, s, hw);
    const CostReport after = genome_cost(doubled, s, hw);
    CHECK(after.backbone.params > before.backbone.params);
    CHECK(after.total.primal_layers - before.total.primal_layers == 3 * added_blocks);
    CHECK(after.head == before.head);
  }
}

TEST_CASE("channel cap violations are reported with limit and measured value", "[cost_model]") {
  SearchSpace s = testing::micro_space();
  s.stage_base_widths = {1366};  // 1366 * 1.5 = 2049
  s.width_multipliers = {1.0, 1.5};
  const HardwareProfile hw = max78002_profile();
  Genome g = minimal_genome(s);
  g.backbone[0].width_index = 1;
  const CostReport r = genome_cost(g, s, hw);
  const bool found =
      std::any_of(r.violations.begin(), r.violations.end(), [](const Violation& v) {
        return v.constraint == "max_channels" && v.limit == 2048 && v.measured == 2049;
      });
  CHECK(found);
}

TEST_CASE("is_feasible follows the componentwise budget definition", "[cost_model]") {
  CostProfile p;
  p.tau_backbone = {1000, 1 << 20, 40};
  p.tau_head = {500, 1 << 20, 30};
  p.tau_total = {1500, 1 << 21, 70};
  CHECK_NOTHROW(validate_budgets(p));

  CostReport r;
  r.backbone = {1000, 100, 40};
  r.head = {400, 100, 20};
  r.total = r.backbone + r.head;
  CHECK(is_feasible(r, p, BudgetScope::backbone));
  CHECK(is_feasible(r, p, BudgetScope::head));
  CHECK(is_feasible(r, p, BudgetScope::both));

  r.backbone.params = 1001;  // one over
  r.total = r.backbone + r.head;
  CHECK_FALSE(is_feasible(r, p, BudgetScope::backbone));
  CHECK(is_feasible(r, p, BudgetScope::head));

  r.backbone.params = 1000;
  r.total = r.backbone + r.head;
  r.violations.push_back({"max_channels", 2048, 2049});
  CHECK_FALSE(is_feasible(r, p, BudgetScope::backbone));
  CHECK_FALSE(is_feasible(r, p, BudgetScope::both));
}

TEST_CASE("budget split validation rejects inconsistent profiles", "[cost_model]") {
  CostProfile p;
  p.tau_backbone = {1000, 10, 10};
  p.tau_head = {600, 10, 10};
  p.tau_total = {1500, 100, 100};  // 1000 + 600 > 1500
  CHECK_THROWS_AS(validate_budgets(p), BudgetError);
}

TEST_CASE("module feasibility composes into total feasibility", "[cost_model]") {
  // Componentwise additivity: backbone <= tau_b and head <= tau_h with
  // tau_b + tau_h <= tau implies total <= tau, over randomized reports.
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    CostProfile p;
    p.tau_backbone = {static_cast<std::int64_t>(rng.uniform_index(10000)),
                      static_cast<std::int64_t>(rng.uniform_index(10000)),
                      static_cast<std::int64_t>(rng.uniform_index(100))};
    p.tau_head = {static_cast<std::int64_t>(rng.uniform_index(10000)),
                  static_cast<std::int64_t>(rng.uniform_index(10000)),
                  static_cast<std::int64_t>(rng.uniform_index(100))};
    p.tau_total = p.tau_backbone + p.tau_head;
    CostReport r;
    auto clamp_draw = [&](std::int64_t hi) {
      return static_cast<std::int64_t>(rng.uniform_index(static_cast<std::size_t>(hi + 1)));
    };
    r.backbone = {clamp_draw(p.tau_backbone.params), clamp_draw(p.tau_backbone.activation_bytes),
                  clamp_draw(p.tau_backbone.primal_layers)};
    r.head = {clamp_draw(p.tau_head.params), clamp_draw(p.tau_head.activation_bytes),
              clamp_draw(p.tau_head.primal_layers)};
    r.total = r.backbone + r.head;
    REQUIRE(is_feasible(r, p, BudgetScope::backbone));
    REQUIRE(is_feasible(r, p, BudgetScope::head));
    REQUIRE(is_feasible(r, p, BudgetScope::both));
  }
}

TEST_CASE("cost is additive and matches the oracle over the whole reduced space", "[cost_model]") {
  const SearchSpace s = testing::reduced_space();
  const HardwareProfile hw = max78002_profile();
  const auto genomes = testing::enumerate_genomes(s);
  REQUIRE(genomes.size() == 2304);
  for (const auto& g : genomes) {
    const CostReport r = genome_cost(g, s, hw);
    REQUIRE(r.total == r.backbone + r.head);
    REQUIRE(r.backbone.params == testing::oracle_params(g, s, true));
    REQUIRE(r.head.params == testing::oracle_params(g, s, false, true));
    REQUIRE(r.total.primal_layers == testing::oracle_primal_layers(g, s));
    const std::int64_t peak = std::max(r.backbone.activation_bytes, r.head.activation_bytes);
    REQUIRE(peak == testing::oracle_peak_activation(g, s, hw.activation_bytes_per_element,
                                                    hw.streaming_mode));
  }
}

TEST_CASE("raising any single dimension never lowers total params", "[cost_model]") {
  const SearchSpace s = default_space();
  const HardwareProfile hw = unconstrained_profile();
  Rng rng(1234);
  for (int trial = 0; trial < 500; ++trial) {
    const Genome g = sample_uniform(s, rng);
    const std::int64_t base = genome_cost(g, s, hw).total.params;
    Genome h = g;
    const std::size_t stage = rng.uniform_index(h.backbone.size());
    switch (rng.uniform_index(3)) {
      case 0:
        if (h.backbone[stage].depth < s.depth_max) {
          h.backbone[stage].depth++;
          h.backbone[stage].expansion_indices.push_back(0);
        }
        break;
      case 1:
        if (h.backbone[stage].width_index + 1 <
            static_cast<int>(s.width_multipliers.size()))
          h.backbone[stage].width_index++;
        break;
      default: {
        auto& exps = h.backbone[stage].expansion_indices;
        const std::size_t block = rng.uniform_index(exps.size());
        if (exps[block] + 1 < static_cast<int>(s.expansion_ratios.size())) exps[block]++;
        break;
      }
    }
    CHECK(genome_cost(h, s, hw).total.params >= base);
  }
}

TEST_CASE("streaming mode exempts only the first stage from the activation check",
          "[cost_model]") {
  SearchSpace s = testing::reduced_space();
  s.input_resolution = 320;
  s.stage_base_widths = {64, 2};
  s.head_blocks = {{0, HeadRole::yolo_head, 2}};
  const Genome g = minimal_genome(s);

  HardwareProfile hw = max78002_profile();
  hw.streaming_mode = false;
  const CostReport off = genome_cost(g, s, hw);
  // stage 0 at 320 px: 320*320*51 elements >> 80 KiB
  REQUIRE_FALSE(off.violations.empty());
  CHECK(std::any_of(off.violations.begin(), off.violations.end(), [](const Violation& v) {
    return v.constraint == "max_activation_bytes" && v.limit == 81920;
  }));

  hw.streaming_mode = true;
  const CostReport on = genome_cost(g, s, hw);
  CHECK(std::none_of(on.violations.begin(), on.violations.end(), [](const Violation& v) {
    return v.constraint == "max_activation_bytes";
  }));
}
