#pragma once
// Planning strategy encoder: enumerate lateral x longitudinal policy combos
// over decoded scene semantics, score and keep the top N, grow per-slice
// axis-aligned free-space corridors, and tokenize them for fusion. A small
// policy head trained with NLL against expert labels rides on pooled scene
// features plus the corridor tokens.

#include <vector>

#include "minidrive/geometry.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/tensor.hpp"

namespace md::plan {

struct PlannerConfig {
  int horizon = 8;        // T_c slices
  double slice_dt = 0.5;
  double lane_width = 3.5;
  double desired_speed = 4.0;
  double max_speed = 6.0;
  double accel = 1.5, decel = 2.0;
  double wheelbase = 2.5;
  double ego_half_length = 2.25, ego_half_width = 1.0;
  double grow_step = 0.5, max_half_extent = 4.0;
  double clearance_cap = 10.0;
  double w_safety = 1.0, w_progress = 0.5, w_comfort = 0.2;
  int top_n = 3;
  int patch = 8;
  int d = 64;
};

// Grids live on the corridor grid (ego frame); objects are ego-frame boxes
// with constant-velocity predictions.
struct SceneSemantics {
  Tensor drivable;  // [rows, cols] in [0,1]
  Tensor boundary;
  std::vector<geo::OrientedBox> objects;
  std::vector<geo::Vec2> object_velocities;
};

struct PolicyCandidate {
  int lateral = 0;       // 0 keep, 1 left, 2 right
  int longitudinal = 0;  // 0 maintain, 1 accelerate, 2 decelerate
  int policy_id = 0;     // lateral*3 + longitudinal
  std::vector<geo::Pose2D> rollout;  // horizon poses at slice times
  std::vector<double> speeds;
  double mean_abs_accel = 0.0, mean_abs_steer_rate = 0.0;
  double clearance = 0.0, progress = 0.0, comfort = 0.0;
  bool feasible = false;
  double score = 0.0;  // -inf when infeasible
};

struct Corridor {
  Tensor occupancy;  // [T_c, rows, cols] binary, one axis-aligned box per slice
  int policy_id = 0;
};

// All 9 combos in enum order, forward-simulated with a lane-relative
// pure-pursuit controller over the drivable grid. PlanningError when the ego
// cell itself is not drivable.
std::vector<PolicyCandidate> enumerate_policies(const SceneSemantics& scene, double ego_speed,
                                                const PlannerConfig& cfg);

// w_s*min-clearance + w_p*progress - w_c*comfort; -inf on any drivable exit,
// boundary crossing, or predicted-obstacle overlap (candidate.feasible).
double score_candidate(const PolicyCandidate& c, const PlannerConfig& cfg);

// Sort by score descending, ties by policy_id; pads by repeating the best
// when fewer than n are feasible. PlanningError when none are.
std::vector<PolicyCandidate> top_n(const std::vector<PolicyCandidate>& candidates, int n);

// Per-slice axis-aligned box grown from the ego footprint around each
// rollout point until blocked cells or the growth cap. PlanningError when
// the seed box already overlaps blocked cells.
Corridor build_corridor(const PolicyCandidate& c, const SceneSemantics& scene,
                        const PlannerConfig& cfg);

// Full rule-based pipeline: enumerate, score, select, grow. Candidates whose
// seed collides are skipped in favor of the next best.
struct PlanResult {
  std::vector<PolicyCandidate> candidates;  // all 9
  std::vector<PolicyCandidate> selected;    // n
  std::vector<Corridor> corridors;          // n
};
PlanResult plan(const SceneSemantics& scene, double ego_speed, const PlannerConfig& cfg);

// Spatial-temporal tokenizer: 8x8 patches per slice, linear projection plus
// learned (policy, time, patch) embeddings, one transformer encoder layer.
class CorridorTokenizer {
 public:
  CorridorTokenizer() = default;
  CorridorTokenizer(nn::ParamRegistry& reg, const std::string& name, const PlannerConfig& cfg,
                    int grid_rows, Rng& rng);
  Tensor forward(const std::vector<Corridor>& corridors) const;  // [n_tok, d]
  int tokens_per_slice() const { return patches_; }

  nn::Linear patch_proj;
  Tensor policy_emb, time_emb, patch_emb;
  nn::TransformerLayer layer;

 private:
  PlannerConfig cfg_;
  int grid_rows_ = 32;
  int patches_ = 16;
};

// Policy-scoring head: pooled scene grids + ego speed + mean corridor token,
// softmax over the 9 combos.
class PolicyHead {
 public:
  PolicyHead() = default;
  PolicyHead(nn::ParamRegistry& reg, const std::string& name, const PlannerConfig& cfg,
             int grid_rows, Rng& rng);
  Tensor logits(const SceneSemantics& scene, double ego_speed, const Tensor& corridor_tokens) const;
  // L_PS for one frame: NLL of the expert combo under the softmax.
  Tensor nll(const SceneSemantics& scene, double ego_speed, const Tensor& corridor_tokens,
             int expert_policy) const;

  nn::Linear l1, l2;

 private:
  PlannerConfig cfg_;
  int pool_k_ = 4;
};

// Obstacle occupancy raster for slice t (constant-velocity prediction).
Tensor obstacle_mask_at(const SceneSemantics& scene, double t, const geo::BevGrid& grid);

}  // namespace md::plan
