#include "minidrive/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace md::metrics {

PenaltyTable PenaltyTable::defaults() {
  PenaltyTable t;
  t.delta[sim::InfractionKind::kCollisionPedestrian] = 0.50;
  t.delta[sim::InfractionKind::kCollisionVehicle] = 0.60;
  t.delta[sim::InfractionKind::kCollisionStatic] = 0.65;
  t.delta[sim::InfractionKind::kRedLight] = 0.70;
  // Terminating events carry no multiplier of their own.
  t.delta[sim::InfractionKind::kRouteDeviation] = 1.0;
  t.delta[sim::InfractionKind::kTimeout] = 1.0;
  t.is0 = 1.0;
  return t;
}

double route_completion(const sim::DrivingLog& log) {
  if (log.steps.empty()) throw ContractError("route_completion: empty log");
  if (log.l_total <= 0.0) throw ContractError("route_completion: L_total must be positive");
  return std::clamp(log.max_route_distance() / log.l_total, 0.0, 1.0);
}

double infraction_score(const std::vector<sim::InfractionEvent>& events, const PenaltyTable& table) {
  if (table.is0 <= 0.0 || table.is0 > 1.0) throw ContractError("infraction_score: IS_0 outside (0,1]");
  double is = table.is0;
  for (const auto& e : events) {
    auto it = table.delta.find(e.kind);
    if (it == table.delta.end())
      throw ContractError(std::string("infraction_score: no penalty for ") + sim::infraction_name(e.kind));
    if (it->second <= 0.0 || it->second > 1.0) throw ContractError("infraction_score: delta outside (0,1]");
    is *= it->second;
  }
  return is;
}

double driving_score(double rc, double is_score) {
  if (rc < 0.0 || rc > 1.0 || is_score < 0.0 || is_score > 1.0)
    throw ContractError("driving_score: inputs must lie in [0,1]");
  return rc * is_score;
}

double rc_strict(const sim::DrivingLog& log) {
  if (log.steps.empty()) throw ContractError("rc_strict: empty log");
  if (log.l_total <= 0.0) throw ContractError("rc_strict: L_total must be positive");
  double l_s = log.max_route_distance();
  for (const auto& step : log.steps) {
    if (!step.events.empty()) {
      l_s = step.events.front().route_distance;
      break;
    }
  }
  return std::clamp(l_s / log.l_total, 0.0, 1.0);
}

RouteResult score_route(const sim::DrivingLog& log, const PenaltyTable& table,
                        const std::string& name) {
  RouteResult r;
  r.route_name = name;
  r.l_total = log.l_total;
  r.l_completed = log.max_route_distance();
  r.infractions = log.all_events();
  r.rc = route_completion(log);
  r.is_score = infraction_score(r.infractions, table);
  r.ds = driving_score(r.rc, r.is_score);
  r.rc_strict = rc_strict(log);
  r.l_strict = r.rc_strict * r.l_total;
  return r;
}

double m_prec(const Tensor& pred, const Tensor& gt, double threshold) {
  if (pred.shape() != gt.shape() || pred.rank() != 3)
    throw ContractError("m_prec: grids must share [C,H,W] geometry");
  const int c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    const double* pp = pred.data() + static_cast<std::size_t>(ch) * plane;
    const double* pg = gt.data() + static_cast<std::size_t>(ch) * plane;
    long inter = 0, uni = 0;
    int r0 = h, r1 = -1, c0 = w, c1 = -1;
    for (int r = 0; r < h; ++r) {
      for (int cc = 0; cc < w; ++cc) {
        const bool a = pp[static_cast<std::size_t>(r) * w + cc] >= threshold;
        const bool b = pg[static_cast<std::size_t>(r) * w + cc] >= 0.5;
        if (a && b) ++inter;
        if (a || b) {
          ++uni;
          r0 = std::min(r0, r);
          r1 = std::max(r1, r);
          c0 = std::min(c0, cc);
          c1 = std::max(c1, cc);
        }
      }
    }
    if (uni == 0) {
      total += 1.0;  // both masks empty
      continue;
    }
    const long box = static_cast<long>(r1 - r0 + 1) * (c1 - c0 + 1);
    total += static_cast<double>(inter) / static_cast<double>(uni) -
             static_cast<double>(box - uni) / static_cast<double>(box);
  }
  return total / c;
}

namespace {
MetricStat stat_of(const std::vector<double>& run_means) {
  MetricStat s;
  const int n = static_cast<int>(run_means.size());
  for (double v : run_means) s.mean_of_run_means += v;
  s.mean_of_run_means /= n;
  if (n > 1) {
    double acc = 0.0;
    for (double v : run_means) acc += (v - s.mean_of_run_means) * (v - s.mean_of_run_means);
    s.std_over_runs = std::sqrt(acc / (n - 1));
  }
  return s;
}
}  // namespace

AggregateReport aggregate(const std::vector<std::vector<RouteResult>>& runs) {
  if (runs.empty() || runs.front().empty()) throw ContractError("aggregate: need at least one result");
  AggregateReport rep;
  rep.runs = static_cast<int>(runs.size());
  rep.routes = static_cast<int>(runs.front().size());
  std::vector<double> ds_m, rc_m, rcs_m, is_m;
  for (const auto& run : runs) {
    if (static_cast<int>(run.size()) != rep.routes) throw ContractError("aggregate: ragged runs");
    double ds = 0, rc = 0, rcs = 0, is = 0;
    for (const auto& r : run) {
      ds += r.ds;
      rc += r.rc;
      rcs += r.rc_strict;
      is += r.is_score;
    }
    const double inv = 1.0 / rep.routes;
    ds_m.push_back(ds * inv);
    rc_m.push_back(rc * inv);
    rcs_m.push_back(rcs * inv);
    is_m.push_back(is * inv);
  }
  rep.ds = stat_of(ds_m);
  rep.rc = stat_of(rc_m);
  rep.rc_strict = stat_of(rcs_m);
  rep.is_score = stat_of(is_m);
  return rep;
}

}  // namespace md::metrics
