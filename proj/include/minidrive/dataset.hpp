#pragma once
// Expert-rollout dataset: per-sample tensor blobs plus a JSON index, all
// deterministic under a fixed seed.

#include <string>
#include <vector>

#include "minidrive/planner.hpp"
#include "minidrive/sim.hpp"
#include "minidrive/tensor.hpp"

namespace md::harness {

struct Sample {
  Tensor images;               // [T,N,3,H,W]
  std::vector<Tensor> pseudo;  // per frame [2,Vr,Vc]
  std::vector<int> instruction_ids;
  double ego_speed = 0.0;

  Tensor bev_semantic;  // [7,64,64] binary coverage
  Tensor bev_road_drivable, bev_road_boundary;  // [64,64]
  Tensor bev_occupancy;                         // [64,64]

  Tensor plan_drivable, plan_boundary;  // corridor grid [32,32]
  std::vector<geo::OrientedBox> objects;
  std::vector<geo::Vec2> object_velocities;

  Tensor corridors;  // [top_n, T_c, 32, 32]
  std::vector<int> corridor_policy_ids;
  int expert_policy = 0;
  Tensor expert_waypoints;  // [K,2]

  int scenario_idx = 0, frame_idx = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<sim::Scenario> scenarios;
  std::uint64_t config_hash = 0;

  // Deterministic split: every val_stride-th sample is held out.
  std::vector<int> train_indices(int val_stride) const;
  std::vector<int> val_indices(int val_stride) const;
};

struct RunConfig;  // harness.hpp

// Expert rollouts sampled at cfg.sample_hz into out_dir (index.json, blobs,
// scenario files); byte-identical across runs with the same config.
Dataset collect(const RunConfig& cfg, const std::vector<sim::Scenario>& scenarios,
                const std::string& out_dir);
Dataset load_dataset(const RunConfig& cfg, const std::string& dir);

// Per-cell class ids (priority: pedestrian, red light, vehicle, marking,
// sidewalk, road, unlabeled) for the focal target.
std::vector<int> semantic_target_classes(const Tensor& bev_semantic);
// 0 drivable, 1 boundary (wins overlaps), 2 background.
std::vector<int> road_target_classes(const Tensor& drivable, const Tensor& boundary);

plan::SceneSemantics scene_of(const Sample& s);

// Planner semantics extracted from a decoded BEV prediction instead of
// ground truth (connected components of the occupancy head).
plan::SceneSemantics scene_from_bev(const Tensor& b_hat, int sem_classes, int road_classes);

}  // namespace md::harness
