#include "minidrive/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace md::sim {

using geo::OrientedBox;
using geo::Vec2;
using geo::Vec3;

// ---------------------------------------------------------------- log types

const char* infraction_name(InfractionKind k) {
  switch (k) {
    case InfractionKind::kCollisionVehicle: return "collision_vehicle";
    case InfractionKind::kCollisionPedestrian: return "collision_pedestrian";
    case InfractionKind::kCollisionStatic: return "collision_static";
    case InfractionKind::kRedLight: return "red_light";
    case InfractionKind::kRouteDeviation: return "route_deviation";
    case InfractionKind::kTimeout: return "timeout";
  }
  return "unknown";
}

InfractionKind infraction_from_name(const std::string& name) {
  for (int i = 0; i <= static_cast<int>(InfractionKind::kTimeout); ++i)
    if (name == infraction_name(static_cast<InfractionKind>(i))) return static_cast<InfractionKind>(i);
  throw ContractError("unknown infraction kind: " + name);
}

std::vector<InfractionEvent> DrivingLog::all_events() const {
  std::vector<InfractionEvent> out;
  for (const auto& s : steps) out.insert(out.end(), s.events.begin(), s.events.end());
  return out;
}

double DrivingLog::max_route_distance() const {
  double m = 0.0;
  for (const auto& s : steps) m = std::max(m, s.route_distance);
  return m;
}

std::string DrivingLog::to_jsonl() const {
  std::ostringstream os;
  os << nlohmann::json{{"l_total", l_total}}.dump() << "\n";
  for (const auto& s : steps) {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : s.events)
      ev.push_back({{"time", e.time}, {"kind", infraction_name(e.kind)}, {"route_distance", e.route_distance}});
    nlohmann::json j{{"t", s.t},
                     {"ego", {s.ego.x, s.ego.y, s.ego.yaw}},
                     {"speed", s.speed},
                     {"control", {s.control.steer, s.control.throttle, s.control.brake}},
                     {"route_distance", s.route_distance},
                     {"events", ev}};
    os << j.dump() << "\n";
  }
  return os.str();
}

DrivingLog DrivingLog::from_jsonl(const std::string& text) {
  DrivingLog log;
  std::istringstream is(text);
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    if (header) {
      log.l_total = j.at("l_total").get<double>();
      header = false;
      continue;
    }
    StepRecord s;
    s.t = j.at("t").get<double>();
    s.ego = {j.at("ego")[0].get<double>(), j.at("ego")[1].get<double>(), j.at("ego")[2].get<double>()};
    s.speed = j.at("speed").get<double>();
    s.control = {j.at("control")[0].get<double>(), j.at("control")[1].get<double>(),
                 j.at("control")[2].get<double>()};
    s.route_distance = j.at("route_distance").get<double>();
    for (const auto& e : j.at("events"))
      s.events.push_back({e.at("time").get<double>(), infraction_from_name(e.at("kind").get<std::string>()),
                          e.at("route_distance").get<double>()});
    log.steps.push_back(std::move(s));
  }
  return log;
}

// ---------------------------------------------------------------- scenario

bool TrafficLightSpec::red_at(double t) const {
  const double cycle = green_s + red_s;
  double phase = std::fmod(t + offset_s, cycle);
  if (phase < 0) phase += cycle;
  return phase >= green_s;
}

namespace {
nlohmann::json vec2_json(Vec2 v) { return nlohmann::json{v.x, v.y}; }
Vec2 vec2_from(const nlohmann::json& j) { return {j[0].get<double>(), j[1].get<double>()}; }
}  // namespace

std::string Scenario::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["name"] = name;
  j["weather"] = weather;
  j["target_speed"] = target_speed;
  j["instruction"] = instruction_text;
  if (instruction_distance) j["instruction_distance"] = *instruction_distance;
  j["spawn"] = {spawn.x, spawn.y, spawn.yaw};
  nlohmann::json lanes_j = nlohmann::json::array();
  for (const auto& l : lanes) {
    nlohmann::json pts = nlohmann::json::array();
    for (Vec2 p : l.centerline) pts.push_back(vec2_json(p));
    lanes_j.push_back({{"centerline", pts}, {"width", l.lane_width}, {"count", l.lane_count}});
  }
  j["lanes"] = lanes_j;
  nlohmann::json route_j = nlohmann::json::array();
  for (Vec2 p : route_points) route_j.push_back(vec2_json(p));
  j["route"] = route_j;
  nlohmann::json agents_j = nlohmann::json::array();
  for (const auto& a : agents) {
    nlohmann::json pts = nlohmann::json::array();
    for (Vec2 p : a.path) pts.push_back(vec2_json(p));
    agents_j.push_back({{"type", static_cast<int>(a.type)},
                        {"behavior", static_cast<int>(a.behavior)},
                        {"spawn", {a.spawn.x, a.spawn.y, a.spawn.yaw}},
                        {"speed", a.speed},
                        {"trigger_distance", a.trigger_distance},
                        {"walk_distance", a.walk_distance},
                        {"half_length", a.half_length},
                        {"half_width", a.half_width},
                        {"height", a.height},
                        {"path", pts}});
  }
  j["agents"] = agents_j;
  nlohmann::json lights_j = nlohmann::json::array();
  for (const auto& l : lights)
    lights_j.push_back({{"position", vec2_json(l.position)},
                        {"stop_s", l.stop_s},
                        {"green_s", l.green_s},
                        {"red_s", l.red_s},
                        {"offset_s", l.offset_s}});
  j["lights"] = lights_j;
  return j.dump(2);
}

Scenario Scenario::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Scenario s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.name = j.value("name", "");
  s.weather = j.value("weather", "clear");
  s.target_speed = j.value("target_speed", 4.0);
  s.instruction_text = j.value("instruction", "follow the lane");
  if (j.contains("instruction_distance")) s.instruction_distance = j["instruction_distance"].get<double>();
  s.spawn = {j.at("spawn")[0].get<double>(), j.at("spawn")[1].get<double>(), j.at("spawn")[2].get<double>()};
  for (const auto& l : j.at("lanes")) {
    LaneSpec ls;
    for (const auto& p : l.at("centerline")) ls.centerline.push_back(vec2_from(p));
    ls.lane_width = l.at("width").get<double>();
    ls.lane_count = l.at("count").get<int>();
    s.lanes.push_back(std::move(ls));
  }
  for (const auto& p : j.at("route")) s.route_points.push_back(vec2_from(p));
  for (const auto& a : j.at("agents")) {
    AgentSpec as;
    as.type = static_cast<AgentType>(a.at("type").get<int>());
    as.behavior = static_cast<AgentBehavior>(a.at("behavior").get<int>());
    as.spawn = {a.at("spawn")[0].get<double>(), a.at("spawn")[1].get<double>(), a.at("spawn")[2].get<double>()};
    as.speed = a.at("speed").get<double>();
    as.trigger_distance = a.at("trigger_distance").get<double>();
    as.walk_distance = a.at("walk_distance").get<double>();
    as.half_length = a.at("half_length").get<double>();
    as.half_width = a.at("half_width").get<double>();
    as.height = a.at("height").get<double>();
    for (const auto& p : a.at("path")) as.path.push_back(vec2_from(p));
    s.agents.push_back(std::move(as));
  }
  for (const auto& l : j.at("lights")) {
    TrafficLightSpec ls;
    ls.position = vec2_from(l.at("position"));
    ls.stop_s = l.at("stop_s").get<double>();
    ls.green_s = l.at("green_s").get<double>();
    ls.red_s = l.at("red_s").get<double>();
    ls.offset_s = l.at("offset_s").get<double>();
    s.lights.push_back(ls);
  }
  return s;
}

void Scenario::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw ContractError("scenario: cannot open " + path);
  os << to_json() << "\n";
}

Scenario Scenario::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("scenario: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

SensorRig SensorRig::toy_default() {
  SensorRig rig;
  geo::CameraConfig front;
  front.position = {1.3, 0.0, 2.3};
  front.yaw_deg = 0.0;
  geo::CameraConfig left = front;
  left.yaw_deg = 60.0;
  geo::CameraConfig right = front;
  right.yaw_deg = -60.0;
  geo::CameraConfig rear = front;
  rear.position = {-1.3, 0.0, 2.3};
  rear.yaw_deg = 180.0;
  rig.cameras = {front, left, right, rear};
  return rig;
}

// ---------------------------------------------------------------- simulator

Simulator::Simulator(Scenario scenario, SimConfig cfg)
    : scenario_(std::move(scenario)), cfg_(cfg), route_(scenario_.route()) {
  state_.ego = scenario_.spawn;
  state_.ego_speed = 0.0;
  state_.route_s = route_.project(state_.ego.pos()).s;
  for (const auto& spec : scenario_.agents) {
    AgentState a;
    a.pose = spec.spawn;
    a.speed = spec.behavior == AgentBehavior::kCruise ? spec.speed : 0.0;
    a.type = spec.type;
    a.half_length = spec.half_length;
    a.half_width = spec.half_width;
    a.height = spec.height;
    if (spec.behavior == AgentBehavior::kCruise && spec.path.size() >= 2)
      a.path_s = geo::Polyline(spec.path).project(spec.spawn.pos()).s;
    state_.agents.push_back(a);
  }
  state_.light_red.resize(scenario_.lights.size());
  for (std::size_t i = 0; i < scenario_.lights.size(); ++i)
    state_.light_red[i] = scenario_.lights[i].red_at(0.0);
  build_static_geometry();
}

void Simulator::build_static_geometry() {
  // Surfaces first (with their owning lane), so edge features can be
  // suppressed where another lane crosses: junction interiors stay open.
  std::vector<int> surface_lane;
  for (std::size_t li = 0; li < scenario_.lanes.size(); ++li) {
    const auto& lane = scenario_.lanes[li];
    const double half = lane.lane_width * lane.lane_count / 2.0;
    for (std::size_t i = 1; i < lane.centerline.size(); ++i) {
      const Vec2 a = lane.centerline[i - 1], b = lane.centerline[i];
      const Vec2 d = b - a;
      const double len = d.norm();
      if (len < 1e-9) continue;
      lane_surface_.push_back({(a + b) * 0.5, std::atan2(d.y, d.x), len / 2.0 + 0.2, half});
      surface_lane.push_back(static_cast<int>(li));
    }
  }
  auto inside_other_lane = [&](Vec2 p, int li) {
    for (std::size_t s = 0; s < lane_surface_.size(); ++s)
      if (surface_lane[s] != li && geo::box_contains(lane_surface_[s], p)) return true;
    return false;
  };
  // Edge features in ~2 m pieces so junction-crossing parts can be dropped.
  auto emit_strip = [&](std::vector<OrientedBox>& dst, Vec2 a, Vec2 b, double offset,
                        double half_w, int li) {
    const Vec2 d = b - a;
    const double len = d.norm();
    if (len < 1e-9) return;
    const double yaw = std::atan2(d.y, d.x);
    const Vec2 dir = d * (1.0 / len);
    const Vec2 left{-dir.y, dir.x};
    const int pieces = std::max(1, static_cast<int>(len / 2.0));
    const double piece = len / pieces;
    for (int k = 0; k < pieces; ++k) {
      const Vec2 mid = a + dir * ((k + 0.5) * piece) + left * offset;
      if (inside_other_lane(mid, li)) continue;
      dst.push_back({mid, yaw, piece / 2.0 + 0.1, half_w});
    }
  };
  for (std::size_t li = 0; li < scenario_.lanes.size(); ++li) {
    const auto& lane = scenario_.lanes[li];
    const double half = lane.lane_width * lane.lane_count / 2.0;
    for (std::size_t i = 1; i < lane.centerline.size(); ++i) {
      const Vec2 a = lane.centerline[i - 1], b = lane.centerline[i];
      const int lid = static_cast<int>(li);
      for (int k = 1; k < lane.lane_count; ++k)
        emit_strip(lane_markings_, a, b, -half + k * lane.lane_width, 0.15, lid);
      emit_strip(road_boundary_, a, b, half, 0.15, lid);
      emit_strip(road_boundary_, a, b, -half, 0.15, lid);
      emit_strip(sidewalks_, a, b, half + 1.2, 1.0, lid);
      emit_strip(sidewalks_, a, b, -half - 1.2, 1.0, lid);
    }
  }
}

double Simulator::timeout_s() const {
  return cfg_.timeout_base_s + route_.length() / (cfg_.timeout_speed_factor * scenario_.target_speed);
}

bool Simulator::route_complete() const { return state_.route_s >= route_.length() - 0.5; }

OrientedBox Simulator::ego_box(const WorldState& s) const {
  return {s.ego.pos(), s.ego.yaw, cfg_.ego_half_length, cfg_.ego_half_width};
}

OrientedBox Simulator::agent_box(const AgentState& a) const {
  return {a.pose.pos(), a.pose.yaw, a.half_length, a.half_width};
}

std::vector<InfractionEvent> Simulator::step(const Control& control) {
  const WorldState prev = state_;
  const double dt = cfg_.dt;

  const double steer_cmd = std::clamp(control.steer, -cfg_.steer_limit, cfg_.steer_limit);
  const double max_delta = cfg_.steer_rate * dt;
  state_.ego_steer += std::clamp(steer_cmd - state_.ego_steer, -max_delta, max_delta);

  const double v = state_.ego_speed;
  state_.ego.x += v * std::cos(state_.ego.yaw) * dt;
  state_.ego.y += v * std::sin(state_.ego.yaw) * dt;
  state_.ego.yaw = geo::normalize_angle(state_.ego.yaw + v / cfg_.wheelbase * std::tan(state_.ego_steer) * dt);

  const double throttle = std::clamp(control.throttle, 0.0, 1.0);
  const double brake = std::clamp(control.brake, 0.0, 1.0);
  state_.ego_speed = std::max(0.0, v + (cfg_.a_max * throttle - cfg_.b_max * brake) * dt);

  for (std::size_t i = 0; i < state_.agents.size(); ++i) {
    AgentState& a = state_.agents[i];
    const AgentSpec& spec = scenario_.agents[i];
    switch (spec.behavior) {
      case AgentBehavior::kCruise: {
        if (spec.path.size() >= 2) {
          geo::Polyline path(spec.path);
          a.path_s = std::min(a.path_s + spec.speed * dt, path.length());
          const Vec2 p = path.point_at(a.path_s);
          a.pose = {p.x, p.y, path.heading_at(a.path_s)};
          a.speed = a.path_s >= path.length() ? 0.0 : spec.speed;
        }
        break;
      }
      case AgentBehavior::kCrossing: {
        if (!a.triggered && (a.pose.pos() - state_.ego.pos()).norm() < spec.trigger_distance)
          a.triggered = true;
        if (a.triggered && a.walked < spec.walk_distance) {
          a.pose.x += spec.speed * std::cos(a.pose.yaw) * dt;
          a.pose.y += spec.speed * std::sin(a.pose.yaw) * dt;
          a.walked += spec.speed * dt;
          a.speed = spec.speed;
        } else {
          a.speed = 0.0;
        }
        break;
      }
      case AgentBehavior::kParked:
        break;
    }
  }

  state_.time += dt;
  for (std::size_t i = 0; i < scenario_.lights.size(); ++i)
    state_.light_red[i] = scenario_.lights[i].red_at(state_.time);
  state_.route_s = std::max(state_.route_s, route_.project(state_.ego.pos()).s);

  return detect_infractions(prev, state_);
}

std::vector<InfractionEvent> Simulator::detect_infractions(const WorldState& prev,
                                                           const WorldState& next) const {
  std::vector<InfractionEvent> events;
  const OrientedBox ego_prev = ego_box(prev);
  const OrientedBox ego_next = ego_box(next);
  for (std::size_t i = 0; i < next.agents.size(); ++i) {
    const bool hit_now = geo::boxes_overlap(ego_next, agent_box(next.agents[i]));
    const bool hit_before =
        i < prev.agents.size() && geo::boxes_overlap(ego_prev, agent_box(prev.agents[i]));
    if (hit_now && !hit_before) {
      InfractionKind kind = InfractionKind::kCollisionStatic;
      if (next.agents[i].type == AgentType::kVehicle) kind = InfractionKind::kCollisionVehicle;
      if (next.agents[i].type == AgentType::kPedestrian) kind = InfractionKind::kCollisionPedestrian;
      events.push_back({next.time, kind, next.route_s});
    }
  }
  for (std::size_t i = 0; i < scenario_.lights.size(); ++i) {
    const auto& light = scenario_.lights[i];
    if (prev.route_s < light.stop_s && next.route_s >= light.stop_s && light.red_at(next.time))
      events.push_back({next.time, InfractionKind::kRedLight, next.route_s});
  }
  const double lat_prev = std::abs(route_.project(prev.ego.pos()).lateral);
  const double lat_next = std::abs(route_.project(next.ego.pos()).lateral);
  if (lat_next > cfg_.deviation_threshold && lat_prev <= cfg_.deviation_threshold)
    events.push_back({next.time, InfractionKind::kRouteDeviation, next.route_s});
  const double t_out = timeout_s();
  if (prev.time <= t_out && next.time > t_out)
    events.push_back({next.time, InfractionKind::kTimeout, next.route_s});
  return events;
}

// ---------------------------------------------------------------- sensing

namespace {

struct Rgb {
  double r, g, b;
};
constexpr Rgb kSky{0.35, 0.55, 0.90};
constexpr Rgb kTerrain{0.10, 0.35, 0.15};
constexpr Rgb kRoad{0.25, 0.25, 0.28};
constexpr Rgb kMarking{0.95, 0.95, 0.95};
constexpr Rgb kSidewalk{0.52, 0.46, 0.40};
constexpr Rgb kVehicle{0.85, 0.10, 0.10};
constexpr Rgb kPedestrian{0.95, 0.80, 0.10};
constexpr Rgb kStaticObst{0.55, 0.25, 0.60};
constexpr Rgb kLightRed{1.00, 0.05, 0.05};
constexpr Rgb kLightGreen{0.05, 0.90, 0.20};

struct Box3 {
  OrientedBox box;
  double z0, z1;
  Rgb color;
};

// Slab test of a ray against an upright oriented box; returns entry t >= 0.
std::optional<double> ray_box(const Vec3& origin, const Vec3& dir, const Box3& b) {
  const Vec2 lo2 = geo::rotate({origin.x - b.box.center.x, origin.y - b.box.center.y}, -b.box.yaw);
  const Vec2 ld2 = geo::rotate({dir.x, dir.y}, -b.box.yaw);
  const double o[3] = {lo2.x, lo2.y, origin.z};
  const double d[3] = {ld2.x, ld2.y, dir.z};
  const double lo_[3] = {-b.box.half_length, -b.box.half_width, b.z0};
  const double hi_[3] = {b.box.half_length, b.box.half_width, b.z1};
  double tmin = 0.0, tmax = 1e30;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-12) {
      if (o[i] < lo_[i] || o[i] > hi_[i]) return std::nullopt;
      continue;
    }
    double t0 = (lo_[i] - o[i]) / d[i];
    double t1 = (hi_[i] - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return std::nullopt;
  }
  return tmin;
}

// 2-D ray vs oriented rectangle, for the lidar scan.
std::optional<double> ray_box_2d(Vec2 origin, Vec2 dir, const OrientedBox& b) {
  const Vec2 lo2 = geo::rotate(origin - b.center, -b.yaw);
  const Vec2 ld2 = geo::rotate(dir, -b.yaw);
  const double o[2] = {lo2.x, lo2.y};
  const double d[2] = {ld2.x, ld2.y};
  const double lo_[2] = {-b.half_length, -b.half_width};
  const double hi_[2] = {b.half_length, b.half_width};
  double tmin = 0.0, tmax = 1e30;
  for (int i = 0; i < 2; ++i) {
    if (std::abs(d[i]) < 1e-12) {
      if (o[i] < lo_[i] || o[i] > hi_[i]) return std::nullopt;
      continue;
    }
    double t0 = (lo_[i] - o[i]) / d[i];
    double t1 = (hi_[i] - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return std::nullopt;
  }
  return tmin;
}

}  // namespace

Tensor Simulator::render_view(const geo::CameraConfig& cam) const {
  const int w = cam.width, h = cam.height;
  Tensor img = Tensor::zeros({3, h, w});

  // Solid bodies: agents and light heads.
  std::vector<Box3> solids;
  for (const auto& a : state_.agents) {
    Rgb color = kVehicle;
    if (a.type == AgentType::kPedestrian) color = kPedestrian;
    if (a.type == AgentType::kStatic) color = kStaticObst;
    solids.push_back({agent_box(a), 0.0, a.height, color});
  }
  for (std::size_t i = 0; i < scenario_.lights.size(); ++i) {
    const auto& l = scenario_.lights[i];
    solids.push_back({{l.position, 0.0, 0.4, 0.4}, 2.0, 3.2,
                      state_.light_red[i] ? kLightRed : kLightGreen});
  }

  const double rad = 3.14159265358979323846 / 180.0;
  const double cy = std::cos(cam.yaw_deg * rad), sy = std::sin(cam.yaw_deg * rad);
  const double cp = std::cos(cam.pitch_deg * rad), sp = std::sin(cam.pitch_deg * rad);
  const double cr = std::cos(cam.roll_deg * rad), sr = std::sin(cam.roll_deg * rad);
  // R = Rz(yaw) Ry(pitch) Rx(roll)
  const double r[3][3] = {
      {cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr},
      {sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr},
      {-sp, cp * sr, cp * cr},
  };
  const double cx = 0.5 * (w - 1);
  const double cv = 0.5 * (h - 1);
  const double f = cx / std::tan(0.5 * cam.hfov_deg * rad);

  const Vec2 cam_xy = geo::ego_to_world(state_.ego, {cam.position.x, cam.position.y});
  const Vec3 origin{cam_xy.x, cam_xy.y, cam.position.z};
  const double ce = std::cos(state_.ego.yaw), se = std::sin(state_.ego.yaw);

  double* pr = img.data();
  double* pg = img.data() + static_cast<std::size_t>(h) * w;
  double* pb = img.data() + 2 * static_cast<std::size_t>(h) * w;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      // Camera-frame ray through the pixel center, then to world.
      const double dcx = 1.0, dcy = (u - cx) / f, dcz = (cv - v) / f;
      double ex = r[0][0] * dcx + r[0][1] * dcy + r[0][2] * dcz;
      double ey = r[1][0] * dcx + r[1][1] * dcy + r[1][2] * dcz;
      const double ez = r[2][0] * dcx + r[2][1] * dcy + r[2][2] * dcz;
      const double wx = ce * ex - se * ey;
      const double wy = se * ex + ce * ey;
      const double inv_n = 1.0 / std::sqrt(wx * wx + wy * wy + ez * ez);
      const Vec3 dir{wx * inv_n, wy * inv_n, ez * inv_n};

      Rgb color = kSky;
      double best_t = 1e30;
      for (const Box3& b : solids) {
        auto t = ray_box(origin, dir, b);
        if (t && *t < best_t) {
          best_t = *t;
          color = b.color;
        }
      }
      if (best_t >= 1e30 && dir.z < -1e-9) {
        const double tg = -origin.z / dir.z;
        const Vec2 gp{origin.x + dir.x * tg, origin.y + dir.y * tg};
        color = kTerrain;
        bool done = false;
        for (const auto& m : lane_markings_)
          if (geo::box_contains(m, gp)) { color = kMarking; done = true; break; }
        if (!done)
          for (const auto& m : road_boundary_)
            if (geo::box_contains(m, gp)) { color = kMarking; done = true; break; }
        if (!done)
          for (const auto& s : sidewalks_)
            if (geo::box_contains(s, gp)) { color = kSidewalk; done = true; break; }
        if (!done)
          for (const auto& s : lane_surface_)
            if (geo::box_contains(s, gp)) { color = kRoad; break; }
      }
      const std::size_t idx = static_cast<std::size_t>(v) * w + u;
      pr[idx] = color.r;
      pg[idx] = color.g;
      pb[idx] = color.b;
    }
  }
  return img;
}

geo::PointCloud Simulator::lidar_scan() const {
  geo::PointCloud cloud;
  const Vec2 origin = state_.ego.pos();
  const double z_heights[3] = {0.3, 0.9, 1.5};
  constexpr int kRays = 180;
  constexpr double kMaxRange = 24.0;

  std::vector<OrientedBox> boxes;
  std::vector<double> heights;
  for (const auto& a : state_.agents) {
    boxes.push_back(agent_box(a));
    heights.push_back(a.height);
  }

  for (int k = 0; k < kRays; ++k) {
    const double ang = state_.ego.yaw + 2.0 * 3.14159265358979323846 * k / kRays;
    const Vec2 dir{std::cos(ang), std::sin(ang)};
    double hit_t = kMaxRange;
    double hit_height = 0.0;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      auto t = ray_box_2d(origin, dir, boxes[i]);
      if (t && *t < hit_t) {
        hit_t = *t;
        hit_height = heights[i];
      }
    }
    if (hit_t < kMaxRange) {
      const Vec2 wp = origin + dir * hit_t;
      const Vec2 ep = geo::world_to_ego(state_.ego, wp);
      for (double z : z_heights)
        if (z <= hit_height) cloud.points.push_back({ep.x, ep.y, z});
    }
    // Ground returns on the road surface up to the first solid hit.
    for (double range = 2.0; range < std::min(hit_t, kMaxRange); range += 2.0) {
      const Vec2 wp = origin + dir * range;
      bool on_road = false;
      for (const auto& s : lane_surface_)
        if (geo::box_contains(s, wp)) { on_road = true; break; }
      if (on_road) {
        const Vec2 ep = geo::world_to_ego(state_.ego, wp);
        cloud.points.push_back({ep.x, ep.y, 0.0});
      }
    }
  }
  return cloud;
}

SensorFrame Simulator::sense(const SensorRig& rig) const {
  SensorFrame frame;
  const int n = static_cast<int>(rig.cameras.size());
  const int h = rig.cameras.at(0).height, w = rig.cameras.at(0).width;
  frame.images = Tensor::zeros({n, 3, h, w});
  for (int i = 0; i < n; ++i) {
    Tensor view = render_view(rig.cameras[static_cast<std::size_t>(i)]);
    std::copy(view.data(), view.data() + view.size(),
              frame.images.data() + static_cast<std::size_t>(i) * 3 * h * w);
  }
  frame.cloud = lidar_scan();
  return frame;
}

// ---------------------------------------------------------------- expert

double idm_accel(double v, double v_desired, double gap, double v_lead, const IdmParams& p) {
  const double free_term = 1.0 - std::pow(std::max(v, 0.0) / std::max(v_desired, 0.1), p.delta);
  if (gap >= 1e9) return p.a_max * free_term;
  if (gap <= 0.1) return -6.0;  // emergency
  const double dv = v - v_lead;
  const double s_star = p.s0 + std::max(0.0, v * p.headway + v * dv / (2.0 * std::sqrt(p.a_max * p.b_comf)));
  return p.a_max * (free_term - (s_star / gap) * (s_star / gap));
}

ExpertOutput Simulator::expert(int num_waypoints) const {
  ExpertOutput out;
  if (route_complete()) {
    out.route_complete = true;
    out.waypoints.assign(static_cast<std::size_t>(num_waypoints), {0.0, 0.0});
    out.control = {0.0, 0.0, 1.0};
    return out;
  }

  struct Blocker {
    double s;        // arc position on the route at t=0
    double v;        // speed along the route
    double margin;   // extra standoff
    bool is_light = false;
    std::size_t light_idx = 0;
  };
  std::vector<Blocker> blockers;
  for (const auto& a : state_.agents) {
    auto proj = route_.project(a.pose.pos());
    if (proj.s > route_.length() - 1e-6) {
      // Past the route end: measure the overshoot along the final heading.
      const double yaw_end = route_.heading_at(route_.length());
      proj.s += std::max(0.0, (a.pose.pos().x - route_.point_at(route_.length()).x) * std::cos(yaw_end) +
                                  (a.pose.pos().y - route_.point_at(route_.length()).y) * std::sin(yaw_end));
    }
    if (std::abs(proj.lateral) > 2.2) continue;
    if (proj.s <= state_.route_s + 0.5) continue;
    double v_along = 0.0;
    if (a.speed > 0.0) {
      const double route_heading = route_.heading_at(proj.s);
      v_along = a.speed * std::cos(a.pose.yaw - route_heading);
      if (v_along < 0.3) v_along = 0.0;  // crossing or oncoming: treat as stationary
    }
    blockers.push_back({proj.s, v_along, a.half_length + cfg_.ego_half_length, false, 0});
  }
  for (std::size_t i = 0; i < scenario_.lights.size(); ++i) {
    if (scenario_.lights[i].stop_s > state_.route_s + 0.2)
      blockers.push_back({scenario_.lights[i].stop_s, 0.0, 1.0 + cfg_.ego_half_length, true, i});
  }

  const double dt_i = 0.05;
  const int substeps = 10;  // 0.5 s between waypoints
  double s = state_.route_s;
  double v = state_.ego_speed;
  double t = 0.0;
  out.waypoints.reserve(static_cast<std::size_t>(num_waypoints));
  for (int k = 0; k < num_waypoints; ++k) {
    for (int i = 0; i < substeps; ++i) {
      double a_cmd = idm_accel(v, scenario_.target_speed, 1e18, 0.0);
      for (const auto& b : blockers) {
        if (b.is_light && !scenario_.lights[b.light_idx].red_at(state_.time + t)) continue;
        const double b_s = b.s + b.v * t;
        const double gap = b_s - s - b.margin;
        if (gap < 40.0)
          a_cmd = std::min(a_cmd, idm_accel(v, scenario_.target_speed, std::max(gap, 0.01), b.v));
      }
      a_cmd = std::clamp(a_cmd, -cfg_.b_max, cfg_.a_max);
      v = std::max(0.0, v + a_cmd * dt_i);
      s += v * dt_i;
      t += dt_i;
    }
    // Drive through the finish line: extrapolate along the final heading.
    Vec2 wp;
    if (s <= route_.length()) {
      wp = route_.point_at(s);
    } else {
      const double yaw_end = route_.heading_at(route_.length());
      wp = route_.point_at(route_.length()) +
           Vec2{std::cos(yaw_end), std::sin(yaw_end)} * (s - route_.length());
    }
    out.waypoints.push_back(geo::world_to_ego(state_.ego, wp));
  }
  const ctrl::ControlCommand cmd = tracker_.track(out.waypoints, state_.ego_speed);
  out.control = {cmd.steer, cmd.throttle, cmd.brake};
  return out;
}

int Simulator::expert_policy_index() const {
  const ExpertOutput ex = expert(5);
  // Lateral intent relative to the primary lane centerline.
  const geo::Polyline& ref = route_;
  double lat_now = ref.project(state_.ego.pos()).lateral;
  const Vec2 final_world = geo::ego_to_world(state_.ego, ex.waypoints.back());
  double lat_future = ref.project(final_world).lateral;
  if (!scenario_.lanes.empty()) {
    geo::Polyline lane(scenario_.lanes.front().centerline);
    lat_now = lane.project(state_.ego.pos()).lateral;
    lat_future = lane.project(final_world).lateral;
  }
  int lateral = 0;  // keep
  if (lat_future - lat_now > 1.5) lateral = 1;   // left
  if (lat_future - lat_now < -1.5) lateral = 2;  // right

  // Longitudinal intent from the waypoint spacing at the horizon end.
  const double v_end = (ex.waypoints.back() - ex.waypoints[ex.waypoints.size() - 2]).norm() / 0.5;
  int longitudinal = 0;  // maintain
  if (v_end - state_.ego_speed > 0.4) longitudinal = 1;   // accelerate
  if (v_end - state_.ego_speed < -0.4) longitudinal = 2;  // decelerate
  return lateral * 3 + longitudinal;
}

// ------------------------------------------------------- ground truth

std::vector<geo::ClassedBox> Simulator::semantic_boxes() const {
  std::vector<geo::ClassedBox> out;
  auto to_ego = [this](const OrientedBox& b) {
    const Vec2 c = geo::world_to_ego(state_.ego, b.center);
    return OrientedBox{c, geo::normalize_angle(b.yaw - state_.ego.yaw), b.half_length, b.half_width};
  };
  for (const auto& a : state_.agents) {
    const int cls = a.type == AgentType::kPedestrian ? geo::kPedestrian : geo::kVehicle;
    out.push_back({to_ego(agent_box(a)), cls});
  }
  for (std::size_t i = 0; i < scenario_.lights.size(); ++i)
    if (state_.light_red[i])
      out.push_back({to_ego({scenario_.lights[i].position, 0.0, 0.5, 0.5}), geo::kRedLight});
  for (const auto& b : lane_surface_) out.push_back({to_ego(b), geo::kRoadLane});
  for (const auto& b : lane_markings_) out.push_back({to_ego(b), geo::kLaneMarking});
  for (const auto& b : road_boundary_) out.push_back({to_ego(b), geo::kLaneMarking});
  for (const auto& b : sidewalks_) out.push_back({to_ego(b), geo::kSidewalk});
  return out;
}

Simulator::GroundTruthObjects Simulator::ground_truth_objects() const {
  GroundTruthObjects gt;
  for (const auto& a : state_.agents) {
    const OrientedBox wb = agent_box(a);
    const Vec2 c = geo::world_to_ego(state_.ego, wb.center);
    gt.boxes.push_back({c, geo::normalize_angle(wb.yaw - state_.ego.yaw), wb.half_length, wb.half_width});
    const Vec2 v_world{a.speed * std::cos(a.pose.yaw), a.speed * std::sin(a.pose.yaw)};
    gt.velocities.push_back(geo::rotate(v_world, -state_.ego.yaw));
  }
  return gt;
}

std::vector<OrientedBox> Simulator::drivable_boxes_ego() const {
  std::vector<OrientedBox> out;
  for (const auto& b : lane_surface_) {
    const Vec2 c = geo::world_to_ego(state_.ego, b.center);
    out.push_back({c, geo::normalize_angle(b.yaw - state_.ego.yaw), b.half_length, b.half_width});
  }
  return out;
}

std::vector<OrientedBox> Simulator::boundary_boxes_ego() const {
  std::vector<OrientedBox> out;
  for (const auto& b : road_boundary_) {
    const Vec2 c = geo::world_to_ego(state_.ego, b.center);
    out.push_back({c, geo::normalize_angle(b.yaw - state_.ego.yaw), b.half_length, b.half_width});
  }
  return out;
}

}  // namespace md::sim
