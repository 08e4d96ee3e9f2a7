#include "minidrive/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "minidrive/blob.hpp"
#include "minidrive/harness.hpp"

namespace md::harness {

namespace fs = std::filesystem;
using geo::OrientedBox;
using geo::Vec2;

std::vector<int> Dataset::train_indices(int val_stride) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i)
    if (i % val_stride != 0) out.push_back(i);
  return out;
}

std::vector<int> Dataset::val_indices(int val_stride) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i)
    if (i % val_stride == 0) out.push_back(i);
  return out;
}

std::vector<int> semantic_target_classes(const Tensor& bev) {
  const int rows = bev.dim(1), cols = bev.dim(2);
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  // Highest-priority class whose channel covers the cell.
  const int priority[] = {geo::kPedestrian, geo::kRedLight, geo::kVehicle,
                          geo::kLaneMarking, geo::kSidewalk, geo::kRoadLane};
  std::vector<int> out(plane, geo::kUnlabeled);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int cls : priority) {
      if (bev.data()[static_cast<std::size_t>(cls) * plane + i] >= 0.5) {
        out[i] = cls;
        break;
      }
    }
  }
  return out;
}

std::vector<int> road_target_classes(const Tensor& drivable, const Tensor& boundary) {
  std::vector<int> out(drivable.size(), 2);
  for (std::size_t i = 0; i < drivable.size(); ++i) {
    if (boundary.data()[i] >= 0.5) out[i] = 1;
    else if (drivable.data()[i] >= 0.5) out[i] = 0;
  }
  return out;
}

plan::SceneSemantics scene_of(const Sample& s) {
  plan::SceneSemantics scene;
  scene.drivable = s.plan_drivable;
  scene.boundary = s.plan_boundary;
  scene.objects = s.objects;
  scene.object_velocities = s.object_velocities;
  return scene;
}

plan::SceneSemantics scene_from_bev(const Tensor& b_hat, int sem_classes, int road_classes) {
  const int rows = b_hat.dim(1), cols = b_hat.dim(2);
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  const double* drv = b_hat.data() + static_cast<std::size_t>(sem_classes) * plane;
  const double* bnd = drv + plane;
  const double* occ = b_hat.data() + static_cast<std::size_t>(sem_classes + road_classes) * plane;

  const geo::BevGrid fine = geo::default_bev_grid();
  const geo::BevGrid coarse = geo::default_corridor_grid();
  plan::SceneSemantics scene;
  scene.drivable = Tensor::zeros({coarse.rows, coarse.cols});
  scene.boundary = Tensor::zeros({coarse.rows, coarse.cols});
  const int k = rows / coarse.rows;
  for (int r = 0; r < coarse.rows; ++r)
    for (int c = 0; c < coarse.cols; ++c) {
      double dsum = 0, bmax = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const std::size_t idx = static_cast<std::size_t>(r * k + i) * cols + c * k + j;
          dsum += drv[idx];
          bmax = std::max(bmax, bnd[idx]);
        }
      scene.drivable.data()[static_cast<std::size_t>(r) * coarse.cols + c] =
          dsum / (k * k) >= 0.35 ? 1.0 : 0.0;
      scene.boundary.data()[static_cast<std::size_t>(r) * coarse.cols + c] = bmax >= 0.5 ? 1.0 : 0.0;
    }

  // Connected components of the thresholded occupancy as axis-aligned boxes.
  std::vector<char> mask(plane), seen(plane, 0);
  for (std::size_t i = 0; i < plane; ++i) mask[i] = occ[i] >= 0.5;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const std::size_t start = static_cast<std::size_t>(r) * cols + c;
      if (!mask[start] || seen[start]) continue;
      int r0 = r, r1 = r, c0 = c, c1 = c, count = 0;
      std::vector<std::size_t> stack{start};
      seen[start] = 1;
      while (!stack.empty()) {
        const std::size_t cur = stack.back();
        stack.pop_back();
        ++count;
        const int cr = static_cast<int>(cur / cols), cc = static_cast<int>(cur % cols);
        r0 = std::min(r0, cr); r1 = std::max(r1, cr);
        c0 = std::min(c0, cc); c1 = std::max(c1, cc);
        const int dr[4] = {1, -1, 0, 0}, dc[4] = {0, 0, 1, -1};
        for (int d = 0; d < 4; ++d) {
          const int nr = cr + dr[d], nc = cc + dc[d];
          if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) continue;
          const std::size_t ni = static_cast<std::size_t>(nr) * cols + nc;
          if (mask[ni] && !seen[ni]) {
            seen[ni] = 1;
            stack.push_back(ni);
          }
        }
      }
      if (count < 2) continue;  // single-cell speckle
      const Vec2 lo = fine.center_of(r0, c0), hi = fine.center_of(r1, c1);
      OrientedBox box;
      box.center = {(lo.x + hi.x) / 2, (lo.y + hi.y) / 2};
      box.yaw = 0.0;
      box.half_length = (hi.x - lo.x) / 2 + fine.resolution / 2;
      box.half_width = (hi.y - lo.y) / 2 + fine.resolution / 2;
      scene.objects.push_back(box);
      scene.object_velocities.push_back({0.0, 0.0});
    }
  }
  return scene;
}

namespace {

void write_sample(const std::string& path, const Sample& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("dataset: cannot open " + path);
  blob::write(os, s.images.shape(), s.images.data());
  for (const Tensor& p : s.pseudo) blob::write(os, p.shape(), p.data());
  blob::write(os, s.bev_semantic.shape(), s.bev_semantic.data());
  blob::write(os, s.bev_road_drivable.shape(), s.bev_road_drivable.data());
  blob::write(os, s.bev_road_boundary.shape(), s.bev_road_boundary.data());
  blob::write(os, s.bev_occupancy.shape(), s.bev_occupancy.data());
  blob::write(os, s.plan_drivable.shape(), s.plan_drivable.data());
  blob::write(os, s.plan_boundary.shape(), s.plan_boundary.data());
  Tensor obj = Tensor::zeros({std::max<int>(1, static_cast<int>(s.objects.size())), 7});
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    double* row = obj.data() + i * 7;
    row[0] = s.objects[i].center.x;
    row[1] = s.objects[i].center.y;
    row[2] = s.objects[i].yaw;
    row[3] = s.objects[i].half_length;
    row[4] = s.objects[i].half_width;
    row[5] = s.object_velocities[i].x;
    row[6] = s.object_velocities[i].y;
  }
  blob::write(os, obj.shape(), obj.data());
  blob::write(os, s.corridors.shape(), s.corridors.data());
  blob::write(os, s.expert_waypoints.shape(), s.expert_waypoints.data());
}

Sample read_sample(const std::string& path, int num_frames, int num_objects) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("dataset: cannot open " + path);
  auto next = [&is] {
    blob::Blob b = blob::read(is);
    return Tensor::from(b.shape, std::move(b.data));
  };
  Sample s;
  s.images = next();
  for (int t = 0; t < num_frames; ++t) s.pseudo.push_back(next());
  s.bev_semantic = next();
  s.bev_road_drivable = next();
  s.bev_road_boundary = next();
  s.bev_occupancy = next();
  s.plan_drivable = next();
  s.plan_boundary = next();
  Tensor obj = next();
  for (int i = 0; i < num_objects; ++i) {
    const double* row = obj.data() + static_cast<std::size_t>(i) * 7;
    s.objects.push_back({{row[0], row[1]}, row[2], row[3], row[4]});
    s.object_velocities.push_back({row[5], row[6]});
  }
  s.corridors = next();
  s.expert_waypoints = next();
  return s;
}

}  // namespace

Dataset collect(const RunConfig& cfg, const std::vector<sim::Scenario>& scenarios,
                const std::string& out_dir) {
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/samples");
  fs::create_directories(out_dir + "/scenarios");

  const sim::SensorRig rig = sim::SensorRig::toy_default();
  const lang::Vocabulary vocab = lang::Vocabulary::build_default();
  vocab.save(out_dir + "/vocab.json");
  cfg.save(out_dir + "/config.json");

  const geo::BevGrid bev = geo::default_bev_grid();
  const geo::BevGrid voxel = geo::default_voxel_grid();
  const geo::BevGrid corridor = geo::default_corridor_grid();
  const int steps_per_sense = static_cast<int>(std::lround(1.0 / (cfg.sample_hz * cfg.sim.dt)));

  Dataset data;
  data.scenarios = scenarios;
  data.config_hash = cfg.hash();
  nlohmann::json index = nlohmann::json::array();

  for (int si = 0; si < static_cast<int>(scenarios.size()); ++si) {
    const sim::Scenario& sc = scenarios[static_cast<std::size_t>(si)];
    sc.save(out_dir + "/scenarios/" + std::to_string(si) + ".json");
    sim::Simulator simulator(sc, cfg.sim);

    plan::PlannerConfig pcfg = cfg.planner;
    pcfg.desired_speed = sc.target_speed;
    const std::vector<int> ids =
        lang::tokenize({sc.instruction_text, sc.instruction_distance}, vocab);

    std::deque<sim::SensorFrame> history;
    int frame_idx = 0;
    const int max_steps = static_cast<int>(simulator.timeout_s() / cfg.sim.dt);
    for (int step = 0; step <= max_steps && !simulator.route_complete(); ++step) {
      if (step % steps_per_sense == 0) {
        history.push_back(simulator.sense(rig));
        while (static_cast<int>(history.size()) > cfg.encoder.num_frames) history.pop_front();

        if (static_cast<int>(history.size()) == cfg.encoder.num_frames) {
          Sample s;
          const int t_frames = cfg.encoder.num_frames;
          const int n = cfg.encoder.num_views;
          const int h = cfg.encoder.image_height, w = cfg.encoder.image_width;
          s.images = Tensor::zeros({t_frames, n, 3, h, w});
          for (int t = 0; t < t_frames; ++t) {
            const sim::SensorFrame& f = history[static_cast<std::size_t>(t)];
            std::memcpy(s.images.data() + static_cast<std::size_t>(t) * n * 3 * h * w,
                        f.images.data(), sizeof(double) * f.images.size());
            s.pseudo.push_back(geo::voxelize(f.cloud, voxel));
          }
          s.instruction_ids = ids;
          s.ego_speed = simulator.state().ego_speed;

          s.bev_semantic = geo::rasterize(simulator.semantic_boxes(), bev);
          s.bev_road_drivable = geo::rasterize_boxes(simulator.drivable_boxes_ego(), bev);
          s.bev_road_boundary = geo::rasterize_boxes(simulator.boundary_boxes_ego(), bev);
          std::vector<OrientedBox> occ_boxes;
          for (const auto& cb : simulator.semantic_boxes())
            if (cb.cls == geo::kVehicle || cb.cls == geo::kPedestrian) occ_boxes.push_back(cb.box);
          s.bev_occupancy = geo::rasterize_boxes(occ_boxes, bev);

          s.plan_drivable = geo::rasterize_boxes(simulator.drivable_boxes_ego(), corridor);
          s.plan_boundary = geo::rasterize_boxes(simulator.boundary_boxes_ego(), corridor);
          auto gt = simulator.ground_truth_objects();
          s.objects = gt.boxes;
          s.object_velocities = gt.velocities;

          plan::PlanResult planres = plan::plan(scene_of(s), s.ego_speed, pcfg);
          s.corridors = Tensor::zeros({pcfg.top_n, pcfg.horizon, corridor.rows, corridor.cols});
          for (int p = 0; p < pcfg.top_n; ++p) {
            std::memcpy(s.corridors.data() + static_cast<std::size_t>(p) * pcfg.horizon *
                            corridor.rows * corridor.cols,
                        planres.corridors[static_cast<std::size_t>(p)].occupancy.data(),
                        sizeof(double) * planres.corridors[static_cast<std::size_t>(p)].occupancy.size());
            s.corridor_policy_ids.push_back(planres.corridors[static_cast<std::size_t>(p)].policy_id);
          }
          s.expert_policy = simulator.expert_policy_index();

          const sim::ExpertOutput ex = simulator.expert(cfg.fusion.waypoints);
          s.expert_waypoints = Tensor::zeros({cfg.fusion.waypoints, 2});
          for (int k = 0; k < cfg.fusion.waypoints; ++k) {
            s.expert_waypoints.data()[2 * k] = ex.waypoints[static_cast<std::size_t>(k)].x;
            s.expert_waypoints.data()[2 * k + 1] = ex.waypoints[static_cast<std::size_t>(k)].y;
          }
          s.scenario_idx = si;
          s.frame_idx = frame_idx;

          char name[32];
          std::snprintf(name, sizeof(name), "samples/%05d.bin", static_cast<int>(data.samples.size()));
          write_sample(out_dir + "/" + name, s);
          index.push_back({{"file", name},
                           {"scenario", si},
                           {"frame", frame_idx},
                           {"instruction_ids", s.instruction_ids},
                           {"ego_speed", s.ego_speed},
                           {"expert_policy", s.expert_policy},
                           {"corridor_policy_ids", s.corridor_policy_ids},
                           {"num_objects", s.objects.size()}});
          data.samples.push_back(std::move(s));
        }
        ++frame_idx;
      }
      simulator.step(simulator.expert(cfg.fusion.waypoints).control);
    }
  }

  nlohmann::json root{{"config_hash", data.config_hash},
                      {"num_scenarios", scenarios.size()},
                      {"samples", index}};
  std::ofstream os(out_dir + "/index.json");
  os << root.dump(2) << "\n";
  return data;
}

Dataset load_dataset(const RunConfig& cfg, const std::string& dir) {
  std::ifstream is(dir + "/index.json");
  if (!is) throw ContractError("dataset: missing index in " + dir);
  nlohmann::json root = nlohmann::json::parse(is);
  Dataset data;
  data.config_hash = root.at("config_hash").get<std::uint64_t>();
  const int n_sc = root.at("num_scenarios").get<int>();
  for (int i = 0; i < n_sc; ++i)
    data.scenarios.push_back(sim::Scenario::load(dir + "/scenarios/" + std::to_string(i) + ".json"));
  for (const auto& e : root.at("samples")) {
    Sample s = read_sample(dir + "/" + e.at("file").get<std::string>(), cfg.encoder.num_frames,
                           e.at("num_objects").get<int>());
    s.instruction_ids = e.at("instruction_ids").get<std::vector<int>>();
    s.ego_speed = e.at("ego_speed").get<double>();
    s.expert_policy = e.at("expert_policy").get<int>();
    s.corridor_policy_ids = e.at("corridor_policy_ids").get<std::vector<int>>();
    s.scenario_idx = e.at("scenario").get<int>();
    s.frame_idx = e.at("frame").get<int>();
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace md::harness
