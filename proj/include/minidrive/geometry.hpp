#pragma once
// Frames, pinhole projection, BEV grids, rasterization, voxelization.
// Conventions: ego/world frame is x forward, y left, z up; yaw is CCW about
// z with zero along +x. Grids index rows along x and columns along y, cell
// (0,0) centered at BevGrid::origin.

#include <optional>
#include <vector>

#include "minidrive/tensor.hpp"

namespace md::geo {

struct Vec2 {
  double x = 0.0, y = 0.0;
  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

double normalize_angle(double a);  // into (-pi, pi]
Vec2 rotate(Vec2 v, double ang);
inline double cross2(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double dot2(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

struct Pose2D {
  double x = 0.0, y = 0.0, yaw = 0.0;
  Vec2 pos() const { return {x, y}; }
};

Vec2 world_to_ego(const Pose2D& ego, Vec2 world_point);
Vec2 ego_to_world(const Pose2D& ego, Vec2 ego_point);

struct CameraConfig {
  Vec3 position;                                   // meters, ego frame
  double roll_deg = 0.0, pitch_deg = 0.0, yaw_deg = 0.0;
  double hfov_deg = 120.0;
  int width = 32, height = 16;
};

struct Pixel {
  double u = 0.0, v = 0.0;
};

// Pinhole projection; absent when behind the image plane or out of bounds.
// Focal length derives from hfov and width alone (square pixels).
std::optional<Pixel> project(const CameraConfig& cam, Vec3 point_ego);

struct BevGrid {
  double resolution = 0.5;  // meters per cell
  int rows = 64, cols = 64;
  Vec2 origin{-7.75, -15.75};  // ego-frame coordinate of cell (0,0) center
  int channels = 1;

  std::optional<std::pair<int, int>> cell_of(Vec2 p) const;  // nearest cell
  Vec2 center_of(int row, int col) const;
};

BevGrid default_bev_grid();       // 64x64, 0.5 m, x in [-8,24], y in [-16,16]
BevGrid default_voxel_grid();     // 32x32, 1.0 m, same extent
BevGrid default_corridor_grid();  // 32x32, 1.0 m, same extent

struct PointCloud {
  std::vector<Vec3> points;
};

// phi(P): channel 0 = log(1 + count), channel 1 = max height (0 if empty).
Tensor voxelize(const PointCloud& pc, const BevGrid& grid);

struct OrientedBox {
  Vec2 center;
  double yaw = 0.0;
  double half_length = 0.0;  // along box x
  double half_width = 0.0;   // along box y
};

bool box_contains(const OrientedBox& b, Vec2 p);
// Separating-axis test for two oriented rectangles.
bool boxes_overlap(const OrientedBox& a, const OrientedBox& b);
double box_point_distance(const OrientedBox& b, Vec2 p);  // 0 if inside

// The seven supervision classes.
enum SemClass : int {
  kVehicle = 0,
  kPedestrian = 1,
  kRedLight = 2,
  kRoadLane = 3,
  kLaneMarking = 4,
  kSidewalk = 5,
  kUnlabeled = 6,
};
constexpr int kNumSemClasses = 7;

struct ClassedBox {
  OrientedBox box;
  int cls = kUnlabeled;
};

// Cell-center coverage per class channel; channel kUnlabeled is the
// complement of the union of the others.
Tensor rasterize(const std::vector<ClassedBox>& boxes, const BevGrid& grid);
// Single binary mask for an uncategorized box list.
Tensor rasterize_boxes(const std::vector<OrientedBox>& boxes, const BevGrid& grid);

// Polyline with arc-length parameterization, used for routes and lanes.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> pts);

  const std::vector<Vec2>& points() const { return pts_; }
  double length() const { return cum_.empty() ? 0.0 : cum_.back(); }
  Vec2 point_at(double s) const;
  double heading_at(double s) const;

  struct Projection {
    double s = 0.0;        // arc length of closest point
    double lateral = 0.0;  // signed offset, positive to the left of travel
  };
  Projection project(Vec2 p) const;

 private:
  std::vector<Vec2> pts_;
  std::vector<double> cum_;
};

}  // namespace md::geo
