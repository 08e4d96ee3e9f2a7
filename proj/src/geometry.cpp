#include "minidrive/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace md::geo {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg2Rad = kPi / 180.0;
}  // namespace

double Vec2::norm() const { return std::sqrt(x * x + y * y); }

double normalize_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

Vec2 rotate(Vec2 v, double ang) {
  const double c = std::cos(ang), s = std::sin(ang);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

Vec2 world_to_ego(const Pose2D& ego, Vec2 wp) {
  return rotate(wp - ego.pos(), -ego.yaw);
}

Vec2 ego_to_world(const Pose2D& ego, Vec2 p) {
  return ego.pos() + rotate(p, ego.yaw);
}

std::optional<Pixel> project(const CameraConfig& cam, Vec3 p) {
  if (cam.hfov_deg <= 0.0 || cam.hfov_deg >= 180.0) throw ContractError("project: bad hfov");
  // R = Rz(yaw) * Ry(pitch) * Rx(roll); camera looks along its local +x.
  const double cy = std::cos(cam.yaw_deg * kDeg2Rad), sy = std::sin(cam.yaw_deg * kDeg2Rad);
  const double cp = std::cos(cam.pitch_deg * kDeg2Rad), sp = std::sin(cam.pitch_deg * kDeg2Rad);
  const double cr = std::cos(cam.roll_deg * kDeg2Rad), sr = std::sin(cam.roll_deg * kDeg2Rad);

  const double dx = p.x - cam.position.x;
  const double dy = p.y - cam.position.y;
  const double dz = p.z - cam.position.z;

  // Rows of R^T (columns of R).
  const double r00 = cy * cp, r01 = cy * sp * sr - sy * cr, r02 = cy * sp * cr + sy * sr;
  const double r10 = sy * cp, r11 = sy * sp * sr + cy * cr, r12 = sy * sp * cr - cy * sr;
  const double r20 = -sp, r21 = cp * sr, r22 = cp * cr;

  const double xc = r00 * dx + r10 * dy + r20 * dz;
  const double yc = r01 * dx + r11 * dy + r21 * dz;
  const double zc = r02 * dx + r12 * dy + r22 * dz;

  if (xc <= 1e-9) return std::nullopt;  // behind the image plane
  const double cx = 0.5 * (cam.width - 1);
  const double cv = 0.5 * (cam.height - 1);
  const double f = cx / std::tan(0.5 * cam.hfov_deg * kDeg2Rad);
  const double u = cx + f * (yc / xc);
  const double v = cv - f * (zc / xc);
  if (u < 0.0 || u > cam.width - 1 || v < 0.0 || v > cam.height - 1) return std::nullopt;
  return Pixel{u, v};
}

std::optional<std::pair<int, int>> BevGrid::cell_of(Vec2 p) const {
  const long r = std::llround((p.x - origin.x) / resolution);
  const long c = std::llround((p.y - origin.y) / resolution);
  if (r < 0 || r >= rows || c < 0 || c >= cols) return std::nullopt;
  return std::make_pair(static_cast<int>(r), static_cast<int>(c));
}

Vec2 BevGrid::center_of(int row, int col) const {
  return {origin.x + row * resolution, origin.y + col * resolution};
}

BevGrid default_bev_grid() { return BevGrid{0.5, 64, 64, {-7.75, -15.75}, 1}; }
BevGrid default_voxel_grid() { return BevGrid{1.0, 32, 32, {-7.5, -15.5}, 2}; }
BevGrid default_corridor_grid() { return BevGrid{1.0, 32, 32, {-7.5, -15.5}, 1}; }

Tensor voxelize(const PointCloud& pc, const BevGrid& grid) {
  Tensor out = Tensor::zeros({2, grid.rows, grid.cols});
  std::vector<int> counts(static_cast<std::size_t>(grid.rows) * grid.cols, 0);
  double* d = out.data();
  const std::size_t plane = static_cast<std::size_t>(grid.rows) * grid.cols;
  for (const Vec3& p : pc.points) {
    auto cell = grid.cell_of({p.x, p.y});
    if (!cell) continue;
    const std::size_t idx = static_cast<std::size_t>(cell->first) * grid.cols + cell->second;
    counts[idx] += 1;
    if (p.z > d[plane + idx]) d[plane + idx] = p.z;
  }
  for (std::size_t i = 0; i < plane; ++i) d[i] = std::log1p(static_cast<double>(counts[i]));
  return out;
}

bool box_contains(const OrientedBox& b, Vec2 p) {
  const Vec2 local = rotate(p - b.center, -b.yaw);
  return std::abs(local.x) <= b.half_length && std::abs(local.y) <= b.half_width;
}

bool boxes_overlap(const OrientedBox& a, const OrientedBox& b) {
  const OrientedBox* boxes[2] = {&a, &b};
  const Vec2 t = b.center - a.center;
  for (int bi = 0; bi < 2; ++bi) {
    const double yaw = boxes[bi]->yaw;
    const Vec2 axes[2] = {{std::cos(yaw), std::sin(yaw)}, {-std::sin(yaw), std::cos(yaw)}};
    for (const Vec2& axis : axes) {
      const double ra = a.half_length * std::abs(dot2(axis, {std::cos(a.yaw), std::sin(a.yaw)})) +
                        a.half_width * std::abs(dot2(axis, {-std::sin(a.yaw), std::cos(a.yaw)}));
      const double rb = b.half_length * std::abs(dot2(axis, {std::cos(b.yaw), std::sin(b.yaw)})) +
                        b.half_width * std::abs(dot2(axis, {-std::sin(b.yaw), std::cos(b.yaw)}));
      if (std::abs(dot2(axis, t)) > ra + rb) return false;
    }
  }
  return true;
}

double box_point_distance(const OrientedBox& b, Vec2 p) {
  const Vec2 local = rotate(p - b.center, -b.yaw);
  const double dx = std::max(std::abs(local.x) - b.half_length, 0.0);
  const double dy = std::max(std::abs(local.y) - b.half_width, 0.0);
  return std::sqrt(dx * dx + dy * dy);
}

Tensor rasterize(const std::vector<ClassedBox>& boxes, const BevGrid& grid) {
  for (const ClassedBox& cb : boxes)
    if (cb.cls < 0 || cb.cls >= kNumSemClasses)
      throw ClassificationError("rasterize: unknown class " + std::to_string(cb.cls));
  Tensor out = Tensor::zeros({kNumSemClasses, grid.rows, grid.cols});
  double* d = out.data();
  const std::size_t plane = static_cast<std::size_t>(grid.rows) * grid.cols;
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const Vec2 center = grid.center_of(r, c);
      const std::size_t idx = static_cast<std::size_t>(r) * grid.cols + c;
      bool any = false;
      for (const ClassedBox& cb : boxes) {
        if (cb.cls == kUnlabeled) continue;
        if (box_contains(cb.box, center)) {
          d[static_cast<std::size_t>(cb.cls) * plane + idx] = 1.0;
          any = true;
        }
      }
      if (!any) d[static_cast<std::size_t>(kUnlabeled) * plane + idx] = 1.0;
    }
  }
  return out;
}

Tensor rasterize_boxes(const std::vector<OrientedBox>& boxes, const BevGrid& grid) {
  Tensor out = Tensor::zeros({grid.rows, grid.cols});
  double* d = out.data();
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const Vec2 center = grid.center_of(r, c);
      for (const OrientedBox& b : boxes)
        if (box_contains(b, center)) {
          d[static_cast<std::size_t>(r) * grid.cols + c] = 1.0;
          break;
        }
    }
  return out;
}

Polyline::Polyline(std::vector<Vec2> pts) : pts_(std::move(pts)) {
  if (pts_.size() < 2) throw ContractError("polyline: needs at least 2 points");
  cum_.resize(pts_.size(), 0.0);
  for (std::size_t i = 1; i < pts_.size(); ++i)
    cum_[i] = cum_[i - 1] + (pts_[i] - pts_[i - 1]).norm();
}

Vec2 Polyline::point_at(double s) const {
  if (s <= 0.0) return pts_.front();
  if (s >= length()) return pts_.back();
  const auto it = std::upper_bound(cum_.begin(), cum_.end(), s);
  const std::size_t i = static_cast<std::size_t>(it - cum_.begin());
  const double seg = cum_[i] - cum_[i - 1];
  const double f = seg > 0.0 ? (s - cum_[i - 1]) / seg : 0.0;
  return pts_[i - 1] + (pts_[i] - pts_[i - 1]) * f;
}

double Polyline::heading_at(double s) const {
  std::size_t i = 1;
  if (s > 0.0) {
    const auto it = std::upper_bound(cum_.begin(), cum_.end(), std::min(s, length() - 1e-9));
    i = std::min(static_cast<std::size_t>(it - cum_.begin()), pts_.size() - 1);
  }
  const Vec2 d = pts_[i] - pts_[i - 1];
  return std::atan2(d.y, d.x);
}

Polyline::Projection Polyline::project(Vec2 p) const {
  double best_d2 = 1e300;
  Projection best;
  for (std::size_t i = 1; i < pts_.size(); ++i) {
    const Vec2 a = pts_[i - 1], b = pts_[i];
    const Vec2 ab = b - a;
    const double len2 = dot2(ab, ab);
    double t = len2 > 0.0 ? dot2(p - a, ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 q = a + ab * t;
    const double d2 = dot2(p - q, p - q);
    if (d2 < best_d2) {
      best_d2 = d2;
      const double seg_len = std::sqrt(len2);
      best.s = cum_[i - 1] + t * seg_len;
      const Vec2 dir = seg_len > 0.0 ? ab * (1.0 / seg_len) : Vec2{1.0, 0.0};
      best.lateral = cross2(dir, p - q);
    }
  }
  return best;
}

}  // namespace md::geo
