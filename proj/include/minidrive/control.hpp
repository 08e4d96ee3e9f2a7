#pragma once
// Waypoint tracking: LQR lateral control (discrete algebraic Riccati solved
// by fixed-point iteration) plus proportional longitudinal control with a
// throttle/brake split.

#include <vector>

#include "minidrive/geometry.hpp"

namespace md::ctrl {

// Column-major-free tiny dense matrices as flat row-major vectors.
struct DareSolution {
  std::vector<double> p;  // n x n cost-to-go
  std::vector<double> k;  // 1 x n feedback row
  int iterations = 0;
};

// A [n x n], B [n x 1], Q [n x n], R scalar. Fixed-point iteration from
// P = Q until the max-abs update < tol; SolverError on non-convergence.
DareSolution solve_dare(const std::vector<double>& a, const std::vector<double>& b,
                        const std::vector<double>& q, double r, int n, double tol = 1e-12,
                        int max_iter = 10000);

// Max-abs DARE residual ||P - (A'PA - A'PB (R+B'PB)^-1 B'PA + Q)||_inf.
double dare_residual(const std::vector<double>& a, const std::vector<double>& b,
                     const std::vector<double>& q, double r, const std::vector<double>& p, int n);

struct ControlCommand {
  double steer = 0.0;     // rad, +left, clamped to +-steer_limit
  double throttle = 0.0;  // [0,1], exclusive with brake
  double brake = 0.0;     // [0,1]
};

struct TrackerConfig {
  double wheelbase = 2.5;
  double dt = 0.05;
  double waypoint_dt = 0.5;
  double steer_limit = 0.6;
  double a_max = 3.0;
  double b_max = 6.0;
  double k_v = 1.0;     // proportional speed gain
  double q_lateral = 1.0;
  double q_heading = 3.0;
  double r_steer = 8.0;
  double v_lin_floor = 1.0;  // linearization speed floor
};

class WaypointTracker {
 public:
  explicit WaypointTracker(TrackerConfig cfg = {}) : cfg_(cfg) {}
  const TrackerConfig& config() const { return cfg_; }

  // Waypoints are ego-frame, fixed waypoint_dt apart, K >= 2. Coincident
  // leading waypoints mean stop intent: emergency stop (steer 0, brake 1).
  ControlCommand track(const std::vector<geo::Vec2>& waypoints, double ego_speed) const;

  // Lateral feedback gains at a given speed (cached per 0.5 m/s bucket).
  std::vector<double> gains_at(double speed) const;

 private:
  TrackerConfig cfg_;
  mutable std::vector<std::pair<long, std::vector<double>>> gain_cache_;
};

struct TrackingErrorReport {
  double steady_state_abs_lateral = 0.0;  // mean |e| over the last second
  double peak_abs_lateral = 0.0;
  double peak_abs_steer = 0.0;
};

// Closed-loop validation: drives the plant along a scenario route with
// expert waypoints and reports lateral tracking errors. Implemented with the
// simulator; declared here because it validates this controller.
struct ClosedLoopSpec {
  double duration_s = 15.0;
  double target_speed = 5.0;
  double curve_radius = 0.0;  // 0 = straight road
  TrackerConfig tracker;
};
TrackingErrorReport closed_loop_tracking_error(const ClosedLoopSpec& spec);

}  // namespace md::ctrl
