#pragma once
// Built-in scenario families: straight/follow variants for training, the
// four qualitative cases (right turn, unprotected left turn, left turn with
// intruding pedestrian, lane change past an obstacle), and seeded variant
// suites for evaluation.

#include <cstdint>
#include <vector>

#include "minidrive/sim.hpp"

namespace md::scenarios {

sim::Scenario straight(std::uint64_t seed);
sim::Scenario follow_lead(std::uint64_t seed);
sim::Scenario turn(std::uint64_t seed, bool left);
sim::Scenario lane_change(std::uint64_t seed, bool left);
sim::Scenario pedestrian_intrusion(std::uint64_t seed);
sim::Scenario red_light_stop(std::uint64_t seed);

// Training set: one of each family plus extra straight/follow variants.
std::vector<sim::Scenario> training_suite(std::uint64_t seed);
// Held-out mixed-family variants.
std::vector<sim::Scenario> eval_suite(std::uint64_t seed, int count);
// Lane-keep-only scenarios (straight + follow) for the expert gate and the
// corridor containment check.
std::vector<sim::Scenario> benign_suite(std::uint64_t seed);

}  // namespace md::scenarios
