#include "minidrive/control.hpp"

#include <algorithm>
#include <cmath>

#include "minidrive/errors.hpp"

namespace md::ctrl {

namespace {

// out = X * Y for flat row-major [n x n] matrices.
std::vector<double> mm(const std::vector<double>& x, const std::vector<double>& y, int n) {
  std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int kk = 0; kk < n; ++kk)
      for (int j = 0; j < n; ++j)
        out[static_cast<std::size_t>(i) * n + j] +=
            x[static_cast<std::size_t>(i) * n + kk] * y[static_cast<std::size_t>(kk) * n + j];
  return out;
}

std::vector<double> transpose(const std::vector<double>& x, int n) {
  std::vector<double> out(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * n + i] = x[static_cast<std::size_t>(i) * n + j];
  return out;
}

// One Riccati map application: A'PA - A'PB (R+B'PB)^-1 B'PA + Q.
std::vector<double> riccati_map(const std::vector<double>& a, const std::vector<double>& b,
                                const std::vector<double>& q, double r,
                                const std::vector<double>& p, int n) {
  const std::vector<double> at = transpose(a, n);
  std::vector<double> pb(static_cast<std::size_t>(n), 0.0);  // P*B
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) pb[static_cast<std::size_t>(i)] += p[static_cast<std::size_t>(i) * n + j] * b[static_cast<std::size_t>(j)];
  double btpb = 0.0;
  for (int i = 0; i < n; ++i) btpb += b[static_cast<std::size_t>(i)] * pb[static_cast<std::size_t>(i)];
  const double inv = 1.0 / (r + btpb);

  std::vector<double> apa = mm(mm(at, p, n), a, n);
  // A'PB (R+B'PB)^-1 B'PA: (A'PB) is a column, (B'PA) a row.
  std::vector<double> atpb(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) atpb[static_cast<std::size_t>(i)] += at[static_cast<std::size_t>(i) * n + j] * pb[static_cast<std::size_t>(j)];
  std::vector<double> out(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] =
          apa[static_cast<std::size_t>(i) * n + j] - atpb[static_cast<std::size_t>(i)] * inv * atpb[static_cast<std::size_t>(j)] +
          q[static_cast<std::size_t>(i) * n + j];
  return out;
}

}  // namespace

DareSolution solve_dare(const std::vector<double>& a, const std::vector<double>& b,
                        const std::vector<double>& q, double r, int n, double tol, int max_iter) {
  if (static_cast<int>(a.size()) != n * n || static_cast<int>(b.size()) != n ||
      static_cast<int>(q.size()) != n * n)
    throw DimensionError("solve_dare: matrix sizes inconsistent with n");
  DareSolution sol;
  sol.p = q;
  for (int it = 0; it < max_iter; ++it) {
    std::vector<double> next = riccati_map(a, b, q, r, sol.p, n);
    double delta = 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) delta = std::max(delta, std::abs(next[i] - sol.p[i]));
    sol.p = std::move(next);
    sol.iterations = it + 1;
    if (delta < tol) {
      // K = (R + B'PB)^-1 B'PA
      std::vector<double> pb(static_cast<std::size_t>(n), 0.0);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) pb[static_cast<std::size_t>(i)] += sol.p[static_cast<std::size_t>(i) * n + j] * b[static_cast<std::size_t>(j)];
      double btpb = 0.0;
      for (int i = 0; i < n; ++i) btpb += b[static_cast<std::size_t>(i)] * pb[static_cast<std::size_t>(i)];
      const double inv = 1.0 / (r + btpb);
      sol.k.assign(static_cast<std::size_t>(n), 0.0);
      for (int j = 0; j < n; ++j) {
        double btpa = 0.0;
        for (int i = 0; i < n; ++i) btpa += pb[static_cast<std::size_t>(i)] * a[static_cast<std::size_t>(i) * n + j];
        sol.k[static_cast<std::size_t>(j)] = inv * btpa;
      }
      return sol;
    }
  }
  throw SolverError("solve_dare: no convergence in " + std::to_string(max_iter) + " iterations");
}

double dare_residual(const std::vector<double>& a, const std::vector<double>& b,
                     const std::vector<double>& q, double r, const std::vector<double>& p, int n) {
  const std::vector<double> mapped = riccati_map(a, b, q, r, p, n);
  double res = 0.0;
  for (std::size_t i = 0; i < mapped.size(); ++i) res = std::max(res, std::abs(p[i] - mapped[i]));
  return res;
}

std::vector<double> WaypointTracker::gains_at(double speed) const {
  const double v = std::max(speed, cfg_.v_lin_floor);
  const long bucket = std::lround(v * 2.0);
  for (const auto& [key, k] : gain_cache_)
    if (key == bucket) return k;
  const double vb = static_cast<double>(bucket) / 2.0;
  // States: [lateral error e, heading error theta_e].
  const std::vector<double> a = {1.0, vb * cfg_.dt, 0.0, 1.0};
  const std::vector<double> b = {0.0, vb * cfg_.dt / cfg_.wheelbase};
  const std::vector<double> q = {cfg_.q_lateral, 0.0, 0.0, cfg_.q_heading};
  DareSolution sol = solve_dare(a, b, q, cfg_.r_steer, 2);
  gain_cache_.emplace_back(bucket, sol.k);
  return sol.k;
}

ControlCommand WaypointTracker::track(const std::vector<geo::Vec2>& waypoints,
                                      double ego_speed) const {
  if (waypoints.size() < 2) throw DimensionError("track: needs at least 2 waypoints");
  const geo::Vec2 d = waypoints[1] - waypoints[0];
  const double spacing = d.norm();
  if (spacing < 1e-6) return ControlCommand{0.0, 0.0, 1.0};  // stop intent

  const double path_heading = std::atan2(d.y, d.x);
  const geo::Vec2 u{std::cos(path_heading), std::sin(path_heading)};
  // Ego sits at the origin heading +x; e > 0 means ego left of the path.
  const double e = -geo::cross2(u, waypoints[0]);
  const double theta_e = geo::normalize_angle(-path_heading);

  const std::vector<double> k = gains_at(ego_speed);
  double steer = -(k[0] * e + k[1] * theta_e);
  steer = std::clamp(steer, -cfg_.steer_limit, cfg_.steer_limit);

  const double v_target = spacing / cfg_.waypoint_dt;
  const double a_cmd = cfg_.k_v * (v_target - ego_speed);
  ControlCommand cmd;
  cmd.steer = steer;
  if (a_cmd > 0.0) {
    cmd.throttle = std::min(1.0, a_cmd / cfg_.a_max);
  } else if (a_cmd < 0.0) {
    cmd.brake = std::min(1.0, -a_cmd / cfg_.b_max);
  }
  return cmd;
}

}  // namespace md::ctrl
