#pragma once
// Deterministic closed-loop 2-D world: lane-graph roads, scripted agents,
// kinematic-bicycle ego, semantic-color cameras, a lidar-like scan, an
// IDM-based expert driver, and infraction detection.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "minidrive/control.hpp"
#include "minidrive/geometry.hpp"
#include "minidrive/sim_types.hpp"
#include "minidrive/tensor.hpp"

namespace md::sim {

enum class AgentType : int { kVehicle = 0, kPedestrian = 1, kStatic = 2 };
enum class AgentBehavior : int { kCruise = 0, kCrossing = 1, kParked = 2 };

struct AgentSpec {
  AgentType type = AgentType::kVehicle;
  AgentBehavior behavior = AgentBehavior::kParked;
  geo::Pose2D spawn;
  double speed = 0.0;
  double trigger_distance = 0.0;  // crossing trigger, meters from ego
  double walk_distance = 0.0;     // crossing path length
  double half_length = 2.25, half_width = 1.0, height = 1.6;
  std::vector<geo::Vec2> path;  // cruise path (world frame)
};

struct TrafficLightSpec {
  geo::Vec2 position;    // visual marker, roadside at the stop line
  double stop_s = 0.0;   // stop line arc length along the route
  double green_s = 10.0, red_s = 8.0, offset_s = 0.0;
  bool red_at(double t) const;
};

struct LaneSpec {
  std::vector<geo::Vec2> centerline;
  double lane_width = 3.5;
  int lane_count = 1;
};

struct Scenario {
  std::uint64_t seed = 0;
  std::string name;
  std::vector<LaneSpec> lanes;
  std::vector<geo::Vec2> route_points;
  std::vector<AgentSpec> agents;
  std::vector<TrafficLightSpec> lights;
  std::string weather = "clear";

  std::string instruction_text = "follow the lane";
  std::optional<double> instruction_distance;
  double target_speed = 4.0;
  geo::Pose2D spawn;  // ego spawn

  geo::Polyline route() const { return geo::Polyline(route_points); }

  std::string to_json() const;
  static Scenario from_json(const std::string& text);
  void save(const std::string& path) const;
  static Scenario load(const std::string& path);
};

struct AgentState {
  geo::Pose2D pose;
  double speed = 0.0;
  AgentType type = AgentType::kVehicle;
  double half_length = 0, half_width = 0, height = 0;
  double path_s = 0.0;
  bool triggered = false;
  double walked = 0.0;
};

struct WorldState {
  double time = 0.0;
  geo::Pose2D ego;
  double ego_speed = 0.0;
  double ego_steer = 0.0;
  double route_s = 0.0;  // monotone progress along the route
  std::vector<AgentState> agents;
  std::vector<bool> light_red;
};

struct SimConfig {
  double dt = 0.05;  // 20 Hz
  double wheelbase = 2.5;
  double a_max = 3.0, b_max = 6.0;
  double steer_limit = 0.6, steer_rate = 2.5;
  double deviation_threshold = 3.0;
  double ego_half_length = 2.25, ego_half_width = 1.0, ego_height = 1.5;
  double timeout_base_s = 10.0, timeout_speed_factor = 0.5;  // T = base + L/(f*v_target)
};

struct SensorRig {
  std::vector<geo::CameraConfig> cameras;
  static SensorRig toy_default();  // front/left/right/rear, hfov 120, 32x16
};

// One sensing instant: per-view semantic renders plus a point cloud.
struct SensorFrame {
  Tensor images;  // [N,3,H,W]
  geo::PointCloud cloud;
};

struct ExpertOutput {
  std::vector<geo::Vec2> waypoints;  // ego frame, fixed 0.5 s spacing
  Control control;
  bool route_complete = false;
};

class Simulator {
 public:
  Simulator(Scenario scenario, SimConfig cfg = {});

  const Scenario& scenario() const { return scenario_; }
  const SimConfig& config() const { return cfg_; }
  const WorldState& state() const { return state_; }
  const geo::Polyline& route() const { return route_; }
  double route_length() const { return route_.length(); }
  double timeout_s() const;
  bool route_complete() const;

  // Advances one tick and returns the infraction events of the transition.
  std::vector<InfractionEvent> step(const Control& control);

  // Stateless transition check; collisions edge-trigger on contact start.
  std::vector<InfractionEvent> detect_infractions(const WorldState& prev,
                                                  const WorldState& next) const;

  SensorFrame sense(const SensorRig& rig) const;
  Tensor render_view(const geo::CameraConfig& cam) const;
  geo::PointCloud lidar_scan() const;

  // K waypoints at 0.5 s spacing from an IDM speed profile along the route;
  // control comes from the waypoint tracker.
  ExpertOutput expert(int num_waypoints = 5) const;
  // Expert policy label for imitation: lateral {keep,left,right} x
  // longitudinal {maintain,accel,decel} as an index in [0,9).
  int expert_policy_index() const;

  geo::OrientedBox ego_box() const { return ego_box(state_); }
  geo::OrientedBox ego_box(const WorldState& s) const;
  geo::OrientedBox agent_box(const AgentState& a) const;

  // World-frame classed boxes of everything visible (agents, road surface,
  // markings, sidewalks, red lights) for ground-truth rasterization.
  std::vector<geo::ClassedBox> semantic_boxes() const;
  // Ground-truth planner inputs in the ego frame (drivable / boundary masks
  // live in grid space; agents as boxes with velocities).
  struct GroundTruthObjects {
    std::vector<geo::OrientedBox> boxes;     // ego frame
    std::vector<geo::Vec2> velocities;       // ego frame, m/s
  };
  GroundTruthObjects ground_truth_objects() const;
  std::vector<geo::OrientedBox> drivable_boxes_ego() const;
  std::vector<geo::OrientedBox> boundary_boxes_ego() const;

 private:
  void build_static_geometry();
  double light_phase_red(std::size_t i, double t) const;

  Scenario scenario_;
  SimConfig cfg_;
  geo::Polyline route_;
  WorldState state_;
  ctrl::WaypointTracker tracker_;

  // Static world-frame geometry derived from the lane graph.
  std::vector<geo::OrientedBox> lane_surface_;
  std::vector<geo::OrientedBox> lane_markings_;   // inner dividers
  std::vector<geo::OrientedBox> road_boundary_;   // outer edge strips
  std::vector<geo::OrientedBox> sidewalks_;
};

// IDM speed profile used by the expert; exposed for the oracle tests.
struct IdmParams {
  double a_max = 2.0, b_comf = 2.0, s0 = 2.0, headway = 1.2, delta = 4.0;
};
double idm_accel(double v, double v_desired, double gap, double v_lead, const IdmParams& p = {});

}  // namespace md::sim
