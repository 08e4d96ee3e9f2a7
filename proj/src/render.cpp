#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "minidrive/harness.hpp"

namespace md::harness {

namespace fs = std::filesystem;
using geo::Vec2;

namespace {

struct Px {
  unsigned char r, g, b;
};

void write_ppm(const std::string& path, const std::vector<Px>& pixels, int w, int h) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("render: cannot open " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  for (const Px& p : pixels) {
    os.put(static_cast<char>(p.r));
    os.put(static_cast<char>(p.g));
    os.put(static_cast<char>(p.b));
  }
}

}  // namespace

std::vector<std::string> render_log(const RunConfig& cfg, const sim::Scenario& scenario,
                                    const sim::DrivingLog& log, const std::string& out_dir,
                                    int keyframe_stride, int scale) {
  fs::create_directories(out_dir);
  std::vector<std::string> files;
  const geo::BevGrid bev = geo::default_bev_grid();
  const geo::BevGrid corridor_grid = geo::default_corridor_grid();
  const int side = bev.rows * scale;

  // Replay the logged controls through the plant to recover full state.
  sim::Simulator simulator(scenario, cfg.sim);
  plan::PlannerConfig pcfg = cfg.planner;
  pcfg.desired_speed = scenario.target_speed;

  for (std::size_t step = 0; step < log.steps.size(); ++step) {
    if (step % static_cast<std::size_t>(keyframe_stride) == 0) {
      std::vector<Px> img(static_cast<std::size_t>(side) * side, Px{20, 20, 24});
      const geo::Pose2D ego = simulator.state().ego;

      Tensor drivable = geo::rasterize_boxes(simulator.drivable_boxes_ego(), bev);
      Tensor boundary = geo::rasterize_boxes(simulator.boundary_boxes_ego(), bev);
      std::vector<geo::OrientedBox> occ_boxes;
      for (const auto& cb : simulator.semantic_boxes())
        if (cb.cls == geo::kVehicle || cb.cls == geo::kPedestrian) occ_boxes.push_back(cb.box);
      Tensor obstacles = geo::rasterize_boxes(occ_boxes, bev);

      auto put_cell = [&](int r, int c, Px color) {
        // Row 0 (x = -8) at the bottom of the image; columns mirror y-left.
        for (int i = 0; i < scale; ++i)
          for (int j = 0; j < scale; ++j) {
            const int py = side - 1 - (r * scale + i);
            const int px = side - 1 - (c * scale + j);
            img[static_cast<std::size_t>(py) * side + px] = color;
          }
      };
      for (int r = 0; r < bev.rows; ++r)
        for (int c = 0; c < bev.cols; ++c) {
          const std::size_t idx = static_cast<std::size_t>(r) * bev.cols + c;
          if (drivable.data()[idx] >= 0.5) put_cell(r, c, {70, 70, 78});
          if (boundary.data()[idx] >= 0.5) put_cell(r, c, {230, 230, 230});
          if (obstacles.data()[idx] >= 0.5) put_cell(r, c, {200, 40, 40});
        }

      // Corridor outline of the top policy (slice 0).
      try {
        plan::SceneSemantics scene;
        scene.drivable = geo::rasterize_boxes(simulator.drivable_boxes_ego(), corridor_grid);
        scene.boundary = geo::rasterize_boxes(simulator.boundary_boxes_ego(), corridor_grid);
        auto gt = simulator.ground_truth_objects();
        scene.objects = gt.boxes;
        scene.object_velocities = gt.velocities;
        plan::PlanResult pr = plan::plan(scene, simulator.state().ego_speed, pcfg);
        const Tensor& occ = pr.corridors.front().occupancy;
        for (int r = 0; r < corridor_grid.rows; ++r)
          for (int c = 0; c < corridor_grid.cols; ++c) {
            if (occ.data()[static_cast<std::size_t>(r) * corridor_grid.cols + c] < 0.5) continue;
            bool edge = r == 0 || c == 0 || r == corridor_grid.rows - 1 || c == corridor_grid.cols - 1;
            const int dr[4] = {1, -1, 0, 0}, dc[4] = {0, 0, 1, -1};
            for (int d = 0; d < 4 && !edge; ++d) {
              const int nr = r + dr[d], nc = c + dc[d];
              if (occ.data()[static_cast<std::size_t>(nr) * corridor_grid.cols + nc] < 0.5) edge = true;
            }
            if (!edge) continue;
            const Vec2 p = corridor_grid.center_of(r, c);
            if (auto cell = bev.cell_of(p)) put_cell(cell->first, cell->second, {240, 200, 60});
          }
      } catch (const PlanningError&) {
      }

      // Planned expert trajectory (green) and the driven one (blue).
      const sim::ExpertOutput ex = simulator.expert(cfg.fusion.waypoints);
      for (const Vec2& wp : ex.waypoints)
        if (auto cell = bev.cell_of(wp)) put_cell(cell->first, cell->second, {60, 220, 80});
      for (std::size_t k = 0; k <= step; ++k) {
        const Vec2 p = geo::world_to_ego(ego, log.steps[k].ego.pos());
        if (auto cell = bev.cell_of(p)) put_cell(cell->first, cell->second, {80, 120, 255});
      }
      if (auto cell = bev.cell_of({0.0, 0.0})) put_cell(cell->first, cell->second, {255, 255, 0});

      char name[32];
      std::snprintf(name, sizeof(name), "frame_%05d.ppm", static_cast<int>(step));
      write_ppm(out_dir + "/" + name, img, side, side);
      files.emplace_back(name);
    }
    const sim::Control c = log.steps[step].control;
    simulator.step(c);
  }

  nlohmann::json manifest{{"config_hash", cfg.hash()},
                          {"scenario", scenario.name},
                          {"frames", files},
                          {"image_side", side},
                          {"scale", scale}};
  std::ofstream os(out_dir + "/manifest.json");
  os << manifest.dump(2) << "\n";
  return files;
}

}  // namespace md::harness
