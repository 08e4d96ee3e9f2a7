#pragma once
// Log-level simulation types shared by the simulator and the scorer.

#include <string>
#include <vector>

#include "minidrive/geometry.hpp"

namespace md::sim {

enum class InfractionKind : int {
  kCollisionVehicle = 0,
  kCollisionPedestrian = 1,
  kCollisionStatic = 2,
  kRedLight = 3,
  kRouteDeviation = 4,
  kTimeout = 5,
};

const char* infraction_name(InfractionKind k);
InfractionKind infraction_from_name(const std::string& name);

struct InfractionEvent {
  double time = 0.0;
  InfractionKind kind = InfractionKind::kCollisionVehicle;
  double route_distance = 0.0;
};

struct Control {
  double steer = 0.0, throttle = 0.0, brake = 0.0;
};

struct StepRecord {
  double t = 0.0;
  geo::Pose2D ego;
  double speed = 0.0;
  Control control;
  double route_distance = 0.0;
  std::vector<InfractionEvent> events;
};

// Per-route record, serialized as JSON-lines (one record per step).
struct DrivingLog {
  double l_total = 0.0;
  std::vector<StepRecord> steps;

  std::vector<InfractionEvent> all_events() const;
  double max_route_distance() const;

  std::string to_jsonl() const;
  static DrivingLog from_jsonl(const std::string& text);
};

}  // namespace md::sim
