#include "minidrive/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "minidrive/losses.hpp"

namespace md::plan {

using geo::OrientedBox;
using geo::Vec2;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool grid_at(const Tensor& grid, const geo::BevGrid& geom, Vec2 p) {
  auto cell = geom.cell_of(p);
  if (!cell) return false;
  return grid.data()[static_cast<std::size_t>(cell->first) * geom.cols + cell->second] >= 0.5;
}

struct LaneScan {
  bool valid = false;
  double lo = 0.0, hi = 0.0;  // drivable interval bounds along the left normal
  int lanes = 1;
  int current = 0;
};

LaneScan scan_lanes(const Tensor& drivable, const geo::BevGrid& geom, Vec2 probe, Vec2 left,
                    double lane_width) {
  LaneScan s;
  const double step = 0.25, reach = 8.0;
  // Anchor on the nearest drivable offset; on curves the straight-ahead
  // probe itself may sit off the road.
  double anchor = 0.0;
  bool found = grid_at(drivable, geom, probe);
  for (double o = step; !found && o <= reach; o += step) {
    if (grid_at(drivable, geom, probe + left * o)) { anchor = o; found = true; }
    else if (grid_at(drivable, geom, probe + left * (-o))) { anchor = -o; found = true; }
  }
  if (!found) return s;
  double lo = anchor, hi = anchor;
  while (hi + step <= reach && grid_at(drivable, geom, probe + left * (hi + step))) hi += step;
  while (-(lo - step) <= reach && grid_at(drivable, geom, probe + left * (lo - step))) lo -= step;
  s.valid = true;
  s.lo = lo;
  s.hi = hi;
  s.lanes = std::max(1, static_cast<int>(std::lround((hi - lo) / lane_width)));
  const double slot_w = (hi - lo) / s.lanes;
  s.current = std::clamp(static_cast<int>((anchor - lo) / slot_w), 0, s.lanes - 1);
  return s;
}

double slot_center(const LaneScan& s, int slot) {
  const double slot_w = (s.hi - s.lo) / s.lanes;
  return s.lo + (slot + 0.5) * slot_w;
}

}  // namespace

Tensor obstacle_mask_at(const SceneSemantics& scene, double t, const geo::BevGrid& grid) {
  std::vector<OrientedBox> predicted;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    OrientedBox b = scene.objects[i];
    b.center = b.center + scene.object_velocities[i] * t;
    predicted.push_back(b);
  }
  return geo::rasterize_boxes(predicted, grid);
}

std::vector<PolicyCandidate> enumerate_policies(const SceneSemantics& scene, double ego_speed,
                                                const PlannerConfig& cfg) {
  const geo::BevGrid grid = geo::default_corridor_grid();
  if (!grid_at(scene.drivable, grid, {0.0, 0.0}))
    throw PlanningError("enumerate_policies: ego cell is not drivable");

  std::vector<PolicyCandidate> out;
  for (int lat = 0; lat < 3; ++lat) {
    for (int lon = 0; lon < 3; ++lon) {
      PolicyCandidate c;
      c.lateral = lat;
      c.longitudinal = lon;
      c.policy_id = lat * 3 + lon;
      c.feasible = true;

      geo::Pose2D pose{0.0, 0.0, 0.0};
      double v = ego_speed;
      double prev_steer = 0.0;
      double sum_abs_a = 0.0, sum_abs_dsteer = 0.0, progress = 0.0;
      const int substeps = 5;
      const double dt = cfg.slice_dt / substeps;

      for (int slice = 0; slice < cfg.horizon && c.feasible; ++slice) {
        for (int i = 0; i < substeps; ++i) {
          const Vec2 heading{std::cos(pose.yaw), std::sin(pose.yaw)};
          const Vec2 left{-heading.y, heading.x};
          const double lookahead = std::max(3.0, v * 1.0);
          const Vec2 probe = pose.pos() + heading * lookahead;
          const LaneScan scan = scan_lanes(scene.drivable, grid, probe, left, cfg.lane_width);

          double steer = 0.0;
          if (scan.valid) {
            int slot = scan.current;
            if (lat == 1) slot += 1;   // left lies toward +offset
            if (lat == 2) slot -= 1;
            if (slot < 0 || slot >= scan.lanes) {
              c.feasible = false;  // no target lane
              break;
            }
            const Vec2 aim = probe + left * slot_center(scan, slot);
            const Vec2 local = geo::rotate(aim - pose.pos(), -pose.yaw);
            const double alpha = std::atan2(local.y, std::max(local.x, 0.5));
            const double dist = std::max(local.norm(), 1.0);
            steer = std::atan2(2.0 * cfg.wheelbase * std::sin(alpha), dist);
            steer = std::clamp(steer, -0.6, 0.6);
          }
          double a = 0.0;
          if (lon == 1) a = v < cfg.max_speed ? cfg.accel : 0.0;
          if (lon == 2) a = v > 0.0 ? -cfg.decel : 0.0;

          pose.x += v * std::cos(pose.yaw) * dt;
          pose.y += v * std::sin(pose.yaw) * dt;
          pose.yaw = geo::normalize_angle(pose.yaw + v / cfg.wheelbase * std::tan(steer) * dt);
          v = std::clamp(v + a * dt, 0.0, cfg.max_speed);
          progress += v * dt;
          sum_abs_a += std::abs(a);
          sum_abs_dsteer += std::abs(steer - prev_steer) / dt;
          prev_steer = steer;
        }
        c.rollout.push_back(pose);
        c.speeds.push_back(v);
      }

      if (c.feasible) {
        const int n_sub = cfg.horizon * substeps;
        c.mean_abs_accel = sum_abs_a / n_sub;
        c.mean_abs_steer_rate = sum_abs_dsteer / n_sub;
        c.progress = std::min(progress, cfg.desired_speed * cfg.horizon * cfg.slice_dt);

        // Hard constraints and clearance along the rollout.
        double clearance = cfg.clearance_cap;
        for (int slice = 0; slice < cfg.horizon && c.feasible; ++slice) {
          const geo::Pose2D& p = c.rollout[static_cast<std::size_t>(slice)];
          if (!grid_at(scene.drivable, grid, p.pos()) || grid_at(scene.boundary, grid, p.pos())) {
            c.feasible = false;
            break;
          }
          const double t = (slice + 1) * cfg.slice_dt;
          const OrientedBox ego{p.pos(), p.yaw, cfg.ego_half_length, cfg.ego_half_width};
          for (std::size_t oi = 0; oi < scene.objects.size(); ++oi) {
            OrientedBox ob = scene.objects[oi];
            ob.center = ob.center + scene.object_velocities[oi] * t;
            if (geo::boxes_overlap(ego, ob)) {
              c.feasible = false;
              break;
            }
            clearance = std::min(clearance, geo::box_point_distance(ob, p.pos()));
          }
        }
        c.clearance = clearance;
      }
      c.comfort = c.mean_abs_accel + c.mean_abs_steer_rate;
      c.score = score_candidate(c, cfg);
      out.push_back(std::move(c));
    }
  }
  return out;
}

double score_candidate(const PolicyCandidate& c, const PlannerConfig& cfg) {
  if (!c.feasible) return kNegInf;
  return cfg.w_safety * c.clearance + cfg.w_progress * c.progress - cfg.w_comfort * c.comfort;
}

std::vector<PolicyCandidate> top_n(const std::vector<PolicyCandidate>& candidates, int n) {
  std::vector<PolicyCandidate> sorted = candidates;
  std::stable_sort(sorted.begin(), sorted.end(), [](const PolicyCandidate& a, const PolicyCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.policy_id < b.policy_id;
  });
  while (!sorted.empty() && !sorted.back().feasible) sorted.pop_back();
  if (sorted.empty()) throw PlanningError("top_n: no feasible policy candidates");
  std::vector<PolicyCandidate> out;
  for (int i = 0; i < n; ++i)
    out.push_back(i < static_cast<int>(sorted.size()) ? sorted[static_cast<std::size_t>(i)] : sorted.front());
  return out;
}

Corridor build_corridor(const PolicyCandidate& c, const SceneSemantics& scene,
                        const PlannerConfig& cfg) {
  if (!c.feasible) throw PlanningError("build_corridor: candidate infeasible");
  const geo::BevGrid grid = geo::default_corridor_grid();
  Corridor corridor;
  corridor.policy_id = c.policy_id;
  corridor.occupancy = Tensor::zeros({cfg.horizon, grid.rows, grid.cols});

  for (int slice = 0; slice < cfg.horizon; ++slice) {
    const geo::Pose2D& p = c.rollout[static_cast<std::size_t>(slice)];
    const double t = (slice + 1) * cfg.slice_dt;
    Tensor obstacles = obstacle_mask_at(scene, t, grid);
    auto blocked = [&](int r, int cc) {
      const std::size_t idx = static_cast<std::size_t>(r) * grid.cols + cc;
      return obstacles.data()[idx] >= 0.5 || scene.boundary.data()[idx] >= 0.5;
    };
    // Axis-aligned seed covering the oriented ego footprint.
    const double cy = std::abs(std::cos(p.yaw)), sy = std::abs(std::sin(p.yaw));
    double half_x = cfg.ego_half_length * cy + cfg.ego_half_width * sy;
    double half_y = cfg.ego_half_length * sy + cfg.ego_half_width * cy;
    half_x = std::min(half_x, cfg.max_half_extent);
    half_y = std::min(half_y, cfg.max_half_extent);

    // Extents per side (x-, x+, y-, y+), grown independently.
    double ext[4] = {half_x, half_x, half_y, half_y};
    auto cells_in = [&](double x0, double x1, double y0, double y1, auto&& fn) {
      for (int r = 0; r < grid.rows; ++r)
        for (int cc = 0; cc < grid.cols; ++cc) {
          const Vec2 ctr = grid.center_of(r, cc);
          if (ctr.x >= x0 && ctr.x <= x1 && ctr.y >= y0 && ctr.y <= y1)
            if (!fn(r, cc)) return false;
        }
      return true;
    };
    auto box_bounds = [&](double e[4]) {
      return std::array<double, 4>{p.x - e[0], p.x + e[1], p.y - e[2], p.y + e[3]};
    };
    {
      // Boundary cells under the seed only stop growth; obstacles are a
      // genuine collision.
      auto bb = box_bounds(ext);
      bool seed_clear = cells_in(bb[0], bb[1], bb[2], bb[3], [&](int r, int cc) {
        return obstacles.data()[static_cast<std::size_t>(r) * grid.cols + cc] < 0.5;
      });
      if (!seed_clear) throw PlanningError("build_corridor: seed box already colliding");
    }
    bool open[4] = {true, true, true, true};
    while (open[0] || open[1] || open[2] || open[3]) {
      for (int side = 0; side < 4; ++side) {
        if (!open[side]) continue;
        if (ext[side] + cfg.grow_step > cfg.max_half_extent + 1e-9) {
          open[side] = false;
          continue;
        }
        double trial[4] = {ext[0], ext[1], ext[2], ext[3]};
        trial[side] += cfg.grow_step;
        const auto old_b = box_bounds(ext);
        const auto new_b = box_bounds(trial);
        // Only the added strip needs checking.
        bool clear = cells_in(new_b[0], new_b[1], new_b[2], new_b[3], [&](int r, int cc) {
          const Vec2 ctr = grid.center_of(r, cc);
          const bool inside_old = ctr.x >= old_b[0] && ctr.x <= old_b[1] && ctr.y >= old_b[2] && ctr.y <= old_b[3];
          if (inside_old) return true;
          return !blocked(r, cc);
        });
        if (clear) ext[side] = trial[side];
        else open[side] = false;
      }
    }
    const auto bb = box_bounds(ext);
    double* slice_data = corridor.occupancy.data() + static_cast<std::size_t>(slice) * grid.rows * grid.cols;
    for (int r = 0; r < grid.rows; ++r)
      for (int cc = 0; cc < grid.cols; ++cc) {
        const Vec2 ctr = grid.center_of(r, cc);
        if (ctr.x >= bb[0] && ctr.x <= bb[1] && ctr.y >= bb[2] && ctr.y <= bb[3])
          slice_data[static_cast<std::size_t>(r) * grid.cols + cc] = 1.0;
      }
  }
  return corridor;
}

PlanResult plan(const SceneSemantics& scene, double ego_speed, const PlannerConfig& cfg) {
  PlanResult res;
  res.candidates = enumerate_policies(scene, ego_speed, cfg);
  std::vector<PolicyCandidate> ranked = res.candidates;
  std::stable_sort(ranked.begin(), ranked.end(), [](const PolicyCandidate& a, const PolicyCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.policy_id < b.policy_id;
  });
  for (const PolicyCandidate& c : ranked) {
    if (!c.feasible) break;
    if (static_cast<int>(res.selected.size()) >= cfg.top_n) break;
    try {
      Corridor cor = build_corridor(c, scene, cfg);
      res.selected.push_back(c);
      res.corridors.push_back(std::move(cor));
    } catch (const PlanningError&) {
      // Seed collision under the axis-aligned hull: skip this candidate.
    }
  }
  if (res.selected.empty()) throw PlanningError("plan: no feasible corridor");
  while (static_cast<int>(res.selected.size()) < cfg.top_n) {
    res.selected.push_back(res.selected.front());
    res.corridors.push_back(res.corridors.front());
  }
  return res;
}

// ---------------------------------------------------------------- tokenizer

CorridorTokenizer::CorridorTokenizer(nn::ParamRegistry& reg, const std::string& name,
                                     const PlannerConfig& cfg, int grid_rows, Rng& rng)
    : cfg_(cfg), grid_rows_(grid_rows) {
  const int per_side = grid_rows / cfg.patch;
  patches_ = per_side * per_side;
  patch_proj = nn::Linear(reg, name + ".patch", cfg.patch * cfg.patch, cfg.d, rng);
  policy_emb = reg.add(name + ".policy_emb", nn::embed_init({cfg.top_n, cfg.d}, rng));
  time_emb = reg.add(name + ".time_emb", nn::embed_init({cfg.horizon, cfg.d}, rng));
  patch_emb = reg.add(name + ".patch_emb", nn::embed_init({patches_, cfg.d}, rng));
  layer = nn::TransformerLayer(reg, name + ".layer", cfg.d, 4, rng, /*with_ffn=*/true);
}

Tensor CorridorTokenizer::forward(const std::vector<Corridor>& corridors) const {
  if (static_cast<int>(corridors.size()) != cfg_.top_n)
    throw DimensionError("tokenizer: expected top_n corridors");
  const int per_side = grid_rows_ / cfg_.patch;
  const int n_tok = cfg_.top_n * cfg_.horizon * patches_;
  Tensor patches = Tensor::zeros({n_tok, cfg_.patch * cfg_.patch});
  std::vector<int> policy_ids, time_ids, patch_ids;
  int row = 0;
  for (int p = 0; p < cfg_.top_n; ++p) {
    const Tensor& occ = corridors[static_cast<std::size_t>(p)].occupancy;
    if (occ.dim(1) != grid_rows_) throw DimensionError("tokenizer: corridor grid mismatch");
    for (int t = 0; t < cfg_.horizon; ++t) {
      const double* slice = occ.data() + static_cast<std::size_t>(t) * grid_rows_ * grid_rows_;
      for (int pr = 0; pr < per_side; ++pr)
        for (int pc = 0; pc < per_side; ++pc) {
          double* dst = patches.data() + static_cast<std::size_t>(row) * cfg_.patch * cfg_.patch;
          for (int i = 0; i < cfg_.patch; ++i)
            for (int j = 0; j < cfg_.patch; ++j)
              dst[i * cfg_.patch + j] =
                  slice[static_cast<std::size_t>(pr * cfg_.patch + i) * grid_rows_ + pc * cfg_.patch + j];
          policy_ids.push_back(p);
          time_ids.push_back(t);
          patch_ids.push_back(pr * per_side + pc);
          ++row;
        }
    }
  }
  Tensor tokens = patch_proj.forward(patches);
  tokens = ops::add(tokens, ops::embedding_lookup(policy_emb, policy_ids));
  tokens = ops::add(tokens, ops::embedding_lookup(time_emb, time_ids));
  tokens = ops::add(tokens, ops::embedding_lookup(patch_emb, patch_ids));
  return layer.forward(tokens);
}

// --------------------------------------------------------------- policy head

PolicyHead::PolicyHead(nn::ParamRegistry& reg, const std::string& name, const PlannerConfig& cfg,
                       int grid_rows, Rng& rng)
    : cfg_(cfg) {
  pool_k_ = grid_rows / 8;
  const int in = 3 * 64 + 1 + cfg.d;
  l1 = nn::Linear(reg, name + ".l1", in, 64, rng);
  l2 = nn::Linear(reg, name + ".l2", 64, 9, rng);
}

Tensor PolicyHead::logits(const SceneSemantics& scene, double ego_speed,
                          const Tensor& corridor_tokens) const {
  const geo::BevGrid grid = geo::default_corridor_grid();
  auto pool_flat = [&](const Tensor& g) {
    Tensor g3 = ops::reshape(g, {1, g.dim(0), g.dim(1)});
    return ops::reshape(ops::avg_pool2d(g3, pool_k_), {1, 64});
  };
  Tensor drv = pool_flat(scene.drivable);
  Tensor bnd = pool_flat(scene.boundary);
  Tensor obs = pool_flat(obstacle_mask_at(scene, 0.0, grid));
  Tensor spd = Tensor::from({1, 1}, {ego_speed * 0.2});
  const int n_tok = corridor_tokens.dim(0);
  Tensor ones = Tensor::full({1, n_tok}, 1.0 / n_tok);
  Tensor tok_mean = ops::matmul(ones, corridor_tokens);
  Tensor feats = ops::concat({drv, bnd, obs, spd, tok_mean}, 1);
  return l2.forward(ops::relu(l1.forward(feats)));
}

Tensor PolicyHead::nll(const SceneSemantics& scene, double ego_speed, const Tensor& corridor_tokens,
                       int expert_policy) const {
  if (expert_policy < 0 || expert_policy >= 9)
    throw ContractError("policy nll: expert index outside [0,9)");
  return losses::sequence_nll(logits(scene, ego_speed, corridor_tokens), {expert_policy});
}

}  // namespace md::plan
