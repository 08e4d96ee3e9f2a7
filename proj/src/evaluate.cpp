#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "minidrive/harness.hpp"

namespace md::harness {

namespace fs = std::filesystem;
using geo::Vec2;

namespace {

// Repetition jitter: the same route driven again with slightly different
// traffic, standing in for closed-loop non-determinism.
sim::Scenario perturb_for_rep(const sim::Scenario& base, int rep) {
  if (rep == 0) return base;
  sim::Scenario s = base;
  Rng rng(base.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(rep)));
  for (auto& a : s.agents) {
    if (a.behavior == sim::AgentBehavior::kCruise) a.speed *= rng.uniform(0.9, 1.1);
    if (a.behavior == sim::AgentBehavior::kCrossing) a.trigger_distance *= rng.uniform(0.95, 1.1);
  }
  for (auto& l : s.lights) l.offset_s += rng.uniform(-0.5, 0.5);
  s.name = base.name + "_rep" + std::to_string(rep);
  return s;
}

Tensor observation_images(const std::deque<sim::SensorFrame>& history, const RunConfig& cfg) {
  const int t_frames = cfg.encoder.num_frames;
  const int n = cfg.encoder.num_views, h = cfg.encoder.image_height, w = cfg.encoder.image_width;
  Tensor images = Tensor::zeros({t_frames, n, 3, h, w});
  for (int t = 0; t < t_frames; ++t) {
    // Pad the head of the history by repeating the oldest frame.
    const int src = std::max(0, static_cast<int>(history.size()) - t_frames + t);
    const sim::SensorFrame& f = history[static_cast<std::size_t>(src)];
    std::copy(f.images.data(), f.images.data() + f.images.size(),
              images.data() + static_cast<std::size_t>(t) * n * 3 * h * w);
  }
  return images;
}

plan::SceneSemantics scene_from_sim(const sim::Simulator& simulator) {
  const geo::BevGrid corridor = geo::default_corridor_grid();
  plan::SceneSemantics scene;
  scene.drivable = geo::rasterize_boxes(simulator.drivable_boxes_ego(), corridor);
  scene.boundary = geo::rasterize_boxes(simulator.boundary_boxes_ego(), corridor);
  auto gt = simulator.ground_truth_objects();
  scene.objects = gt.boxes;
  scene.object_velocities = gt.velocities;
  return scene;
}

}  // namespace

sim::DrivingLog run_route(const RunConfig& cfg, const sim::Scenario& scenario, Model* model,
                          PolicyKind policy, const sim::SensorRig& rig) {
  sim::Simulator simulator(scenario, cfg.sim);
  sim::DrivingLog log;
  log.l_total = simulator.route_length();

  plan::PlannerConfig pcfg = cfg.planner;
  pcfg.desired_speed = scenario.target_speed;
  ctrl::WaypointTracker tracker;

  std::deque<sim::SensorFrame> history;
  const geo::BevGrid voxel = geo::default_voxel_grid();
  std::vector<int> ids;
  if (model) ids = lang::tokenize({scenario.instruction_text, scenario.instruction_distance}, model->vocab);

  // Current plan in world coordinates.
  std::vector<Vec2> plan_world;
  bool emergency = false;
  const int replan_every = 10;  // 0.5 s at 20 Hz
  const int max_steps = static_cast<int>((simulator.timeout_s() + 2.0) / cfg.sim.dt);

  for (int step = 0; step < max_steps; ++step) {
    if (policy == PolicyKind::kModel && step % replan_every == 0) {
      history.push_back(simulator.sense(rig));
      while (static_cast<int>(history.size()) > cfg.encoder.num_frames) history.pop_front();

      Tensor images = observation_images(history, cfg);
      std::vector<Tensor> pseudo;
      for (int t = 0; t < cfg.encoder.num_frames; ++t) {
        const int src = std::max(0, static_cast<int>(history.size()) - cfg.encoder.num_frames + t);
        pseudo.push_back(geo::voxelize(history[static_cast<std::size_t>(src)].cloud, voxel));
      }

      enc::EncoderOutput eo = model->encoder.forward(images, pseudo);
      emergency = false;
      try {
        plan::SceneSemantics scene =
            cfg.planner_from_bev
                ? scene_from_bev(eo.b_hat, cfg.encoder.sem_classes, cfg.encoder.road_classes)
                : scene_from_sim(simulator);
        plan::PlanResult pr = plan::plan(scene, simulator.state().ego_speed, pcfg);
        Tensor tp = model->tokenizer.forward(pr.corridors);
        Tensor lt = model->lang_embed.forward(ids);
        Tensor wp = model->fusion.predict_waypoints(eo.q_s, lt, tp);
        plan_world.clear();
        for (int k = 0; k < wp.dim(0); ++k)
          plan_world.push_back(geo::ego_to_world(simulator.state().ego, {wp.at({k, 0}), wp.at({k, 1})}));
      } catch (const PlanningError&) {
        emergency = true;
      }
    }

    sim::Control control;
    if (policy == PolicyKind::kExpert) {
      control = simulator.expert(cfg.fusion.waypoints).control;
    } else if (policy == PolicyKind::kStop) {
      control = {0.0, 0.0, 1.0};
    } else {
      std::vector<Vec2> wp_ego;
      for (const Vec2& p : plan_world) wp_ego.push_back(geo::world_to_ego(simulator.state().ego, p));
      while (wp_ego.size() > 2 && wp_ego.front().x < 0.3) wp_ego.erase(wp_ego.begin());
      if (emergency || wp_ego.size() < 2) {
        control = {0.0, 0.0, 1.0};
      } else {
        const ctrl::ControlCommand cmd = tracker.track(wp_ego, simulator.state().ego_speed);
        control = {cmd.steer, cmd.throttle, cmd.brake};
      }
    }

    const std::vector<sim::InfractionEvent> events = simulator.step(control);
    sim::StepRecord rec;
    rec.t = simulator.state().time;
    rec.ego = simulator.state().ego;
    rec.speed = simulator.state().ego_speed;
    rec.control = control;
    rec.route_distance = simulator.state().route_s;
    rec.events = events;
    log.steps.push_back(rec);

    bool terminate = simulator.route_complete();
    for (const auto& e : events)
      if (e.kind == sim::InfractionKind::kRouteDeviation || e.kind == sim::InfractionKind::kTimeout)
        terminate = true;
    if (terminate) break;
  }
  return log;
}

EvalResult evaluate(const RunConfig& cfg, Model* model, PolicyKind policy,
                    const std::vector<sim::Scenario>& suite, int reps, const std::string& out_dir,
                    const std::string& tag) {
  fs::create_directories(out_dir);
  const sim::SensorRig rig = sim::SensorRig::toy_default();
  EvalResult result;
  for (int rep = 0; rep < reps; ++rep) {
    std::vector<metrics::RouteResult> run;
    for (std::size_t i = 0; i < suite.size(); ++i) {
      const sim::Scenario sc = perturb_for_rep(suite[i], rep);
      sim::DrivingLog log = run_route(cfg, sc, model, policy, rig);
      run.push_back(metrics::score_route(log, cfg.penalties, sc.name));
      std::ofstream lf(out_dir + "/" + tag + "_rep" + std::to_string(rep) + "_route" +
                       std::to_string(i) + ".jsonl");
      lf << log.to_jsonl();
    }
    result.runs.push_back(std::move(run));
  }
  result.aggregate = metrics::aggregate(result.runs);

  nlohmann::json j;
  j["config_hash"] = cfg.hash();
  j["tag"] = tag;
  nlohmann::json pt;
  for (const auto& [kind, delta] : cfg.penalties.delta) pt[sim::infraction_name(kind)] = delta;
  j["penalty_table"] = {{"is0", cfg.penalties.is0}, {"delta", pt}};
  nlohmann::json runs_j = nlohmann::json::array();
  for (const auto& run : result.runs) {
    nlohmann::json run_j = nlohmann::json::array();
    for (const auto& r : run) {
      nlohmann::json infr = nlohmann::json::array();
      for (const auto& e : r.infractions)
        infr.push_back({{"kind", sim::infraction_name(e.kind)},
                        {"time", e.time},
                        {"route_distance", e.route_distance}});
      run_j.push_back({{"route", r.route_name},
                       {"l_total", r.l_total},
                       {"l_completed", r.l_completed},
                       {"rc", r.rc},
                       {"is", r.is_score},
                       {"ds", r.ds},
                       {"rc_strict", r.rc_strict},
                       {"infractions", infr}});
    }
    runs_j.push_back(run_j);
  }
  j["per_route"] = runs_j;
  j["aggregate"] = {
      {"ds", {{"mean", result.aggregate.ds.mean_of_run_means}, {"std", result.aggregate.ds.std_over_runs}}},
      {"rc", {{"mean", result.aggregate.rc.mean_of_run_means}, {"std", result.aggregate.rc.std_over_runs}}},
      {"rc_strict",
       {{"mean", result.aggregate.rc_strict.mean_of_run_means}, {"std", result.aggregate.rc_strict.std_over_runs}}},
      {"is", {{"mean", result.aggregate.is_score.mean_of_run_means}, {"std", result.aggregate.is_score.std_over_runs}}}};
  result.report_path = out_dir + "/" + tag + "_report.json";
  std::ofstream os(result.report_path);
  os << j.dump(2) << "\n";

  std::printf("[eval %s] DS %.3f+-%.3f RC %.3f+-%.3f RCs %.3f+-%.3f IS %.3f+-%.3f\n", tag.c_str(),
              result.aggregate.ds.mean_of_run_means, result.aggregate.ds.std_over_runs,
              result.aggregate.rc.mean_of_run_means, result.aggregate.rc.std_over_runs,
              result.aggregate.rc_strict.mean_of_run_means, result.aggregate.rc_strict.std_over_runs,
              result.aggregate.is_score.mean_of_run_means, result.aggregate.is_score.std_over_runs);
  std::fflush(stdout);
  return result;
}

// ---------------------------------------------------------------- ablation

std::vector<AblationSetting> ablation_settings() {
  std::vector<AblationSetting> out;
  const sim::SensorRig base = sim::SensorRig::toy_default();
  out.push_back({"original", base});
  {
    sim::SensorRig r = base;  // side cameras yawed out to +-90
    r.cameras[1].yaw_deg = 90.0;
    r.cameras[2].yaw_deg = -90.0;
    out.push_back({"side_yaw_90", r});
  }
  {
    sim::SensorRig r = base;  // side cameras translated and yawed out
    r.cameras[1].yaw_deg = 90.0;
    r.cameras[2].yaw_deg = -90.0;
    r.cameras[1].position.y += 0.5;
    r.cameras[2].position.y -= 0.5;
    out.push_back({"side_translate_yaw", r});
  }
  {
    sim::SensorRig r = base;  // front camera pulled back
    r.cameras[0].position.x = 0.8;
    out.push_back({"front_translate", r});
  }
  {
    sim::SensorRig r = base;
    r.cameras[0].pitch_deg = -30.0;
    out.push_back({"front_pitch_-30", r});
  }
  {
    sim::SensorRig r = base;
    r.cameras[0].roll_deg = 30.0;
    out.push_back({"front_roll_30", r});
  }
  return out;
}

namespace {

// Mean M_prec of an encoder over expert-rollout probe frames sensed with the
// given rig. Probe states replay deterministically per scenario.
double probe_m_prec(const RunConfig& cfg, Model& model, const sim::SensorRig& rig,
                    const std::vector<sim::Scenario>& probes) {
  const geo::BevGrid bev = geo::default_bev_grid();
  const geo::BevGrid voxel = geo::default_voxel_grid();
  double total = 0.0;
  int count = 0;
  for (const auto& sc : probes) {
    sim::Simulator simulator(sc, cfg.sim);
    std::deque<sim::SensorFrame> history;
    const int max_steps = static_cast<int>(simulator.timeout_s() / cfg.sim.dt);
    for (int step = 0; step < max_steps && !simulator.route_complete(); ++step) {
      if (step % 20 == 0) {  // 1 Hz probe
        history.push_back(simulator.sense(rig));
        while (static_cast<int>(history.size()) > cfg.encoder.num_frames) history.pop_front();
        if (static_cast<int>(history.size()) == cfg.encoder.num_frames && step >= 20) {
          Tensor images = observation_images(history, cfg);
          std::vector<Tensor> pseudo;
          for (const auto& f : history) pseudo.push_back(geo::voxelize(f.cloud, voxel));
          enc::EncoderOutput eo = model.encoder.forward(images, pseudo);

          Sample s;
          s.bev_semantic = geo::rasterize(simulator.semantic_boxes(), bev);
          s.bev_road_drivable = geo::rasterize_boxes(simulator.drivable_boxes_ego(), bev);
          s.bev_road_boundary = geo::rasterize_boxes(simulator.boundary_boxes_ego(), bev);
          std::vector<geo::OrientedBox> occ_boxes;
          for (const auto& cb : simulator.semantic_boxes())
            if (cb.cls == geo::kVehicle || cb.cls == geo::kPedestrian) occ_boxes.push_back(cb.box);
          s.bev_occupancy = geo::rasterize_boxes(occ_boxes, bev);

          const std::size_t plane = static_cast<std::size_t>(bev.rows) * bev.cols;
          Tensor gt = Tensor::zeros({11, bev.rows, bev.cols});
          const std::vector<int> sem = semantic_target_classes(s.bev_semantic);
          for (std::size_t i = 0; i < plane; ++i)
            gt.data()[static_cast<std::size_t>(sem[i]) * plane + i] = 1.0;
          const std::vector<int> road = road_target_classes(s.bev_road_drivable, s.bev_road_boundary);
          for (std::size_t i = 0; i < plane; ++i)
            gt.data()[(7 + static_cast<std::size_t>(road[i])) * plane + i] = 1.0;
          std::copy(s.bev_occupancy.data(), s.bev_occupancy.data() + plane, gt.data() + 10 * plane);

          total += metrics::m_prec(eo.b_hat, gt, 0.5);
          ++count;
        }
      }
      simulator.step(simulator.expert(cfg.fusion.waypoints).control);
    }
  }
  return count > 0 ? total / count : 0.0;
}

}  // namespace

AblationReport ablate_sensors(const RunConfig& cfg, Model& model_da, Model& model_fixed,
                              bool rc_for_da, const std::string& out_dir) {
  fs::create_directories(out_dir);
  AblationReport rep;
  const std::vector<AblationSetting> settings = ablation_settings();
  const std::vector<sim::Scenario> probes = scenarios::benign_suite(cfg.seed ^ 0xab1a7eULL);
  const std::vector<sim::Scenario> rc_suite = scenarios::eval_suite(cfg.seed ^ 0xab1a7eULL, cfg.ablate_routes);

  struct ModelEntry {
    const char* name;
    Model* model;
    bool rc;
  };
  const ModelEntry entries[2] = {{"deformable", &model_da, rc_for_da}, {"fixed_grid", &model_fixed, false}};

  double baseline[2] = {0.0, 0.0};
  double rc_baseline[2] = {0.0, 0.0};
  double drop_sum[2] = {0.0, 0.0};
  for (std::size_t si = 0; si < settings.size(); ++si) {
    for (int mi = 0; mi < 2; ++mi) {
      AblationRow row;
      row.setting = settings[si].name;
      row.model_name = entries[mi].name;
      row.m_prec = probe_m_prec(cfg, *entries[mi].model, settings[si].rig, probes);
      if (si == 0) baseline[mi] = row.m_prec;
      row.m_prec_drop = baseline[mi] - row.m_prec;
      if (si > 0) drop_sum[mi] += row.m_prec_drop;

      if (entries[mi].rc) {
        RunConfig ecfg = cfg;
        EvalResult er = evaluate(ecfg, entries[mi].model, PolicyKind::kModel, rc_suite, 1, out_dir,
                                 std::string("ablate_") + settings[si].name + "_" + entries[mi].name);
        row.rc = er.aggregate.rc.mean_of_run_means;
        if (si == 0) rc_baseline[mi] = *row.rc;
        row.rc_drop = rc_baseline[mi] - *row.rc;
      }
      rep.rows.push_back(row);
    }
  }
  rep.mean_drop_da = drop_sum[0] / (settings.size() - 1);
  rep.mean_drop_fixed = drop_sum[1] / (settings.size() - 1);

  nlohmann::json j;
  j["config_hash"] = cfg.hash();
  j["mean_drop_deformable"] = rep.mean_drop_da;
  j["mean_drop_fixed_grid"] = rep.mean_drop_fixed;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    nlohmann::json e{{"setting", r.setting},
                     {"model", r.model_name},
                     {"m_prec", r.m_prec},
                     {"m_prec_drop", r.m_prec_drop}};
    if (r.rc) {
      e["rc"] = *r.rc;
      e["rc_drop"] = *r.rc_drop;
    }
    rows.push_back(e);
  }
  j["rows"] = rows;
  rep.report_path = out_dir + "/ablation_report.json";
  std::ofstream os(rep.report_path);
  os << j.dump(2) << "\n";
  std::printf("[ablate] mean M_prec drop: deformable %.4f fixed-grid %.4f\n", rep.mean_drop_da,
              rep.mean_drop_fixed);
  std::fflush(stdout);
  return rep;
}

}  // namespace md::harness

// ------------------------------------------------- controller validation

namespace md::ctrl {

TrackingErrorReport closed_loop_tracking_error(const ClosedLoopSpec& spec) {
  sim::Scenario sc;
  sc.seed = 7;
  sc.name = "tracking_fixture";
  sc.target_speed = spec.target_speed;
  sc.spawn = {2.0, 0.0, 0.0};
  std::vector<geo::Vec2> route;
  if (spec.curve_radius <= 0.0) {
    const double len = spec.duration_s * spec.target_speed + 20.0;
    for (double x = 0.0; x <= len; x += 5.0) route.push_back({x, 0.0});
  } else {
    // Straight lead-in followed by a constant-radius arc to the left.
    const double lead = 10.0;
    for (double x = 0.0; x <= lead; x += 2.5) route.push_back({x, 0.0});
    const double r = spec.curve_radius;
    const double arc_len = spec.duration_s * spec.target_speed;
    const int n = std::max(8, static_cast<int>(arc_len / 1.5));
    for (int i = 1; i <= n; ++i) {
      const double phi = -1.5707963267948966 + (arc_len / r) * (static_cast<double>(i) / n);
      route.push_back({lead + r * std::cos(phi), r + r * std::sin(phi)});
    }
  }
  sc.route_points = route;
  sc.lanes.push_back({route, 3.5, 1});

  sim::SimConfig simcfg;
  sim::Simulator simulator(sc, simcfg);
  ctrl::WaypointTracker tracker(spec.tracker);
  const geo::Polyline ref = simulator.route();

  TrackingErrorReport rep;
  const int steps = static_cast<int>(spec.duration_s / simcfg.dt);
  double tail_sum = 0.0;
  int tail_count = 0;
  for (int i = 0; i < steps; ++i) {
    const sim::ExpertOutput ex = simulator.expert(5);
    if (ex.route_complete) break;
    const ctrl::ControlCommand cmd = tracker.track(ex.waypoints, simulator.state().ego_speed);
    simulator.step({cmd.steer, cmd.throttle, cmd.brake});
    const double lat = std::abs(ref.project(simulator.state().ego.pos()).lateral);
    rep.peak_abs_lateral = std::max(rep.peak_abs_lateral, lat);
    rep.peak_abs_steer = std::max(rep.peak_abs_steer, std::abs(cmd.steer));
    if (i * simcfg.dt > spec.duration_s - 1.0) {
      tail_sum += lat;
      ++tail_count;
    }
  }
  rep.steady_state_abs_lateral = tail_count > 0 ? tail_sum / tail_count : 0.0;
  return rep;
}

}  // namespace md::ctrl
