#pragma once
// Leaderboard-style route scoring: RC, IS, DS, strict RC, and the GIoU BEV
// precision metric. Per-route DS = RC * IS holds exactly by construction.

#include <map>
#include <string>
#include <vector>

#include "minidrive/sim_types.hpp"
#include "minidrive/tensor.hpp"

namespace md::metrics {

struct PenaltyTable {
  std::map<sim::InfractionKind, double> delta;  // multipliers in (0,1]
  double is0 = 1.0;

  static PenaltyTable defaults();  // pedestrian .50, vehicle .60, static .65, red light .70
};

struct RouteResult {
  std::string route_name;
  double l_total = 0.0, l_completed = 0.0, l_strict = 0.0;
  double rc = 0.0, is_score = 0.0, ds = 0.0, rc_strict = 0.0;
  std::vector<sim::InfractionEvent> infractions;
};

double route_completion(const sim::DrivingLog& log);
double infraction_score(const std::vector<sim::InfractionEvent>& events, const PenaltyTable& table);
double driving_score(double rc, double is_score);
double rc_strict(const sim::DrivingLog& log);
RouteResult score_route(const sim::DrivingLog& log, const PenaltyTable& table,
                        const std::string& name = "");

// GIoU-style precision in [-1, 1]: per channel binarize at threshold,
// IoU minus enclosing-bbox slack, empty-vs-empty channels contribute 1,
// averaged over channels.
double m_prec(const Tensor& pred, const Tensor& ground_truth, double threshold = 0.5);

struct MetricStat {
  double mean_of_run_means = 0.0;
  double std_over_runs = 0.0;  // sample std, 0 for a single run
};

struct AggregateReport {
  MetricStat ds, rc, rc_strict, is_score;
  int runs = 0, routes = 0;
};

// Mean over routes within each run, then mean +- sample std across runs.
AggregateReport aggregate(const std::vector<std::vector<RouteResult>>& runs);

}  // namespace md::metrics
