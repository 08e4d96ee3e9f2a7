#include "minidrive/scenario_library.hpp"

#include <cmath>

#include "minidrive/rng.hpp"

namespace md::scenarios {

using geo::Vec2;
using sim::AgentBehavior;
using sim::AgentSpec;
using sim::AgentType;
using sim::LaneSpec;
using sim::Scenario;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLaneWidth = 3.5;

std::vector<Vec2> line(Vec2 a, Vec2 b, double step = 5.0) {
  std::vector<Vec2> pts;
  const double len = (b - a).norm();
  const int n = std::max(1, static_cast<int>(len / step));
  for (int i = 0; i <= n; ++i) pts.push_back(a + (b - a) * (static_cast<double>(i) / n));
  return pts;
}

void append(std::vector<Vec2>& dst, const std::vector<Vec2>& src) {
  for (const Vec2& p : src) {
    if (!dst.empty() && (dst.back() - p).norm() < 1e-6) continue;
    dst.push_back(p);
  }
}

AgentSpec parked_vehicle(Vec2 pos, double yaw) {
  AgentSpec a;
  a.type = AgentType::kVehicle;
  a.behavior = AgentBehavior::kParked;
  a.spawn = {pos.x, pos.y, yaw};
  return a;
}

Scenario base_scenario(std::uint64_t seed, const char* name) {
  Scenario s;
  s.seed = seed;
  s.name = name;
  s.spawn = {2.0, 0.0, 0.0};
  s.target_speed = 4.0;
  return s;
}

}  // namespace

Scenario straight(std::uint64_t seed) {
  Rng rng(seed);
  Scenario s = base_scenario(seed, "straight");
  const double len = 38.0 + rng.uniform(0.0, 10.0);
  // Two-lane road whose right lane is the route line y = 0.
  s.lanes.push_back({line({-8.0, kLaneWidth / 2}, {len + 8.0, kLaneWidth / 2}), kLaneWidth, 2});
  s.route_points = line({0.0, 0.0}, {len, 0.0});
  s.instruction_text = "follow the lane";
  if (rng.uniform() < 0.5) {
    // A parked car on the opposite lane shoulder for visual variety.
    s.agents.push_back(parked_vehicle({len * rng.uniform(0.3, 0.7), kLaneWidth}, 0.0));
  }
  return s;
}

Scenario follow_lead(std::uint64_t seed) {
  Rng rng(seed);
  Scenario s = base_scenario(seed, "follow");
  const double len = 40.0 + rng.uniform(0.0, 8.0);
  s.lanes.push_back({line({-8.0, kLaneWidth / 2}, {len + 8.0, kLaneWidth / 2}), kLaneWidth, 2});
  s.route_points = line({0.0, 0.0}, {len, 0.0});
  s.instruction_text = "follow the lane";
  AgentSpec lead;
  lead.type = AgentType::kVehicle;
  lead.behavior = AgentBehavior::kCruise;
  const double spawn_x = 14.0 + rng.uniform(0.0, 5.0);
  lead.spawn = {spawn_x, 0.0, 0.0};
  lead.speed = 2.8 + rng.uniform(0.0, 0.6);
  lead.path = line({spawn_x, 0.0}, {len + 40.0, 0.0});
  s.agents.push_back(lead);
  return s;
}

Scenario turn(std::uint64_t seed, bool left) {
  Rng rng(seed);
  Scenario s = base_scenario(seed, left ? "turn_left" : "turn_right");
  const double l1 = 14.0 + rng.uniform(0.0, 5.0);
  const double radius = 10.0 + rng.uniform(0.0, 3.0);
  const double l2 = 10.0 + rng.uniform(0.0, 5.0);
  const double sign = left ? 1.0 : -1.0;

  // Route: approach on y=0, quarter arc, then exit leg.
  std::vector<Vec2> route = line({0.0, 0.0}, {l1, 0.0});
  const Vec2 center{l1, sign * radius};
  for (int i = 1; i <= 9; ++i) {
    const double phi = -sign * kPi / 2 + sign * (kPi / 2) * (static_cast<double>(i) / 9.0);
    route.push_back({center.x + radius * std::cos(phi), center.y + radius * std::sin(phi)});
  }
  const Vec2 exit_start{l1 + radius, sign * radius};
  append(route, line(exit_start, {l1 + radius, sign * (radius + l2)}));
  s.route_points = route;

  // Straight-through road (so going straight stays an option), the crossing
  // exit road, and a one-lane connector on the arc.
  s.lanes.push_back({line({-8.0, kLaneWidth / 2}, {l1 + 2 * radius + 10.0, kLaneWidth / 2}), kLaneWidth, 2});
  const double road_b_x = l1 + radius - sign * kLaneWidth / 2;
  s.lanes.push_back({line({road_b_x, -sign * 10.0}, {road_b_x, sign * (radius + l2 + 8.0)}), kLaneWidth, 2});
  std::vector<Vec2> arc_lane;
  for (std::size_t i = static_cast<std::size_t>(l1 / 5.0); i < route.size(); ++i) {
    arc_lane.push_back(route[i]);
    if (route[i].y * sign > radius - 0.5) break;
  }
  if (arc_lane.size() >= 2) s.lanes.push_back({arc_lane, 4.5, 1});

  s.instruction_text = left ? "turn left at next intersection" : "turn right at next intersection";
  s.instruction_distance = l1 + radius;
  return s;
}

Scenario lane_change(std::uint64_t seed, bool left) {
  Rng rng(seed);
  Scenario s = base_scenario(seed, left ? "lane_change_left" : "lane_change_right");
  const double len = 42.0 + rng.uniform(0.0, 8.0);
  const double sign = left ? 1.0 : -1.0;
  // Road center half a lane to the target side; lanes at y=0 and y=sign*3.5.
  s.lanes.push_back({line({-8.0, sign * kLaneWidth / 2}, {len + 8.0, sign * kLaneWidth / 2}), kLaneWidth, 2});

  const double obstacle_x = 22.0 + rng.uniform(0.0, 6.0);
  std::vector<Vec2> route = line({0.0, 0.0}, {obstacle_x - 14.0, 0.0});
  append(route, line({obstacle_x - 14.0, 0.0}, {obstacle_x - 2.0, sign * kLaneWidth}, 3.0));
  append(route, line({obstacle_x - 2.0, sign * kLaneWidth}, {len, sign * kLaneWidth}));
  s.route_points = route;

  // Dynamic obstacle blocking the original lane: a very slow vehicle.
  AgentSpec blocker;
  blocker.type = AgentType::kVehicle;
  blocker.behavior = AgentBehavior::kCruise;
  blocker.spawn = {obstacle_x, 0.0, 0.0};
  blocker.speed = 0.4;
  blocker.path = line({obstacle_x, 0.0}, {len + 30.0, 0.0});
  s.agents.push_back(blocker);

  s.instruction_text = left ? "change lane to the left" : "change lane to the right";
  return s;
}

Scenario pedestrian_intrusion(std::uint64_t seed) {
  Rng rng(seed);
  Scenario s = base_scenario(seed, "pedestrian");
  const double len = 40.0 + rng.uniform(0.0, 8.0);
  s.lanes.push_back({line({-8.0, kLaneWidth / 2}, {len + 8.0, kLaneWidth / 2}), kLaneWidth, 2});
  s.route_points = line({0.0, 0.0}, {len, 0.0});
  s.instruction_text = "follow the lane";

  AgentSpec ped;
  ped.type = AgentType::kPedestrian;
  ped.behavior = AgentBehavior::kCrossing;
  const double cross_x = 24.0 + rng.uniform(0.0, 6.0);
  ped.spawn = {cross_x, -(kLaneWidth / 2 + kLaneWidth + 1.8), kPi / 2};  // right sidewalk, walking left
  ped.speed = 1.5;
  ped.trigger_distance = 24.0;
  ped.walk_distance = 2 * kLaneWidth + 3.6;
  ped.half_length = 0.3;
  ped.half_width = 0.3;
  ped.height = 1.8;
  s.agents.push_back(ped);
  return s;
}

Scenario red_light_stop(std::uint64_t seed) {
  Rng rng(seed);
  Scenario s = base_scenario(seed, "red_light");
  const double len = 46.0 + rng.uniform(0.0, 6.0);
  s.lanes.push_back({line({-8.0, kLaneWidth / 2}, {len + 8.0, kLaneWidth / 2}), kLaneWidth, 2});
  s.route_points = line({0.0, 0.0}, {len, 0.0});
  s.instruction_text = "go straight";

  sim::TrafficLightSpec light;
  light.stop_s = 30.0 + rng.uniform(0.0, 4.0);
  light.position = {light.stop_s, -(kLaneWidth / 2 + 1.0)};
  light.green_s = 6.0;
  light.red_s = 6.0;
  light.offset_s = 0.0;  // red for t in [6, 12): the expert arrives on red
  s.lights.push_back(light);
  return s;
}

std::vector<sim::Scenario> training_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Scenario> out;
  out.push_back(straight(rng.next_u64()));
  out.push_back(follow_lead(rng.next_u64()));
  out.push_back(turn(rng.next_u64(), true));
  out.push_back(turn(rng.next_u64(), false));
  out.push_back(lane_change(rng.next_u64(), true));
  out.push_back(lane_change(rng.next_u64(), false));
  out.push_back(pedestrian_intrusion(rng.next_u64()));
  out.push_back(red_light_stop(rng.next_u64()));
  return out;
}

std::vector<sim::Scenario> eval_suite(std::uint64_t seed, int count) {
  Rng rng(seed ^ 0x5eedULL);
  std::vector<Scenario> out;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = rng.next_u64();
    switch (i % 6) {
      case 0: out.push_back(straight(s)); break;
      case 1: out.push_back(follow_lead(s)); break;
      case 2: out.push_back(turn(s, true)); break;
      case 3: out.push_back(turn(s, false)); break;
      case 4: out.push_back(lane_change(s, true)); break;
      default: out.push_back(lane_change(s, false)); break;
    }
    out.back().name += "_eval" + std::to_string(i);
  }
  return out;
}

std::vector<sim::Scenario> benign_suite(std::uint64_t seed) {
  Rng rng(seed ^ 0xbe9123ULL);
  std::vector<Scenario> out;
  out.push_back(straight(rng.next_u64()));
  out.push_back(follow_lead(rng.next_u64()));
  out.push_back(follow_lead(rng.next_u64()));
  for (auto& s : out) s.name += "_benign";
  return out;
}

}  // namespace md::scenarios
