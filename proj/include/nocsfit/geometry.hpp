#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace nf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static SimilarityTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
};

struct PointCloud {
  std::vector<Vec3> points;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }
  Vec3& operator[](std::size_t i) { return points[i]; }

  Vec3 centroid() const;
  std::pair<Vec3, Vec3> bounds() const;  // (min, max) corners
  bool all_finite() const;
};

struct ColoredPointCloud {
  PointCloud points;         // meters
  std::vector<Vec3> colors;  // rgb in [0,1], one per point

  std::size_t size() const { return points.size(); }
};

struct OrientedBox {
  Vec3 center = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  Vec3 extents = Vec3::Ones();  // full side lengths

  bool contains(const Vec3& p) const;
};

// Rotation about a principal axis, angle in radians.
Mat3 rotation_x(double radians);
Mat3 rotation_y(double radians);
Mat3 rotation_z(double radians);
Mat3 axis_angle(const Vec3& axis, double radians);

bool is_rotation(const Mat3& r, double tolerance = 1e-9);

PointCloud apply_transform(const SimilarityTransform& t, const PointCloud& p);

// Least-squares similarity (or rigid, when with_scale is false) mapping src onto dst.
// Throws LengthMismatch or DegenerateConfiguration.
SimilarityTransform umeyama(const PointCloud& src, const PointCloud& dst, bool with_scale = true);

struct RansacOptions {
  int iterations = 128;
  double inlier_threshold = 0.01;  // meters
  std::uint64_t seed = 0;
};

struct RansacResult {
  SimilarityTransform transform;
  std::vector<bool> inliers;

  std::size_t inlier_count() const;
};

// Four-point minimal samples, scored by inlier count, refit on the best set.
// Throws NoConsensus when fewer than four correspondences agree with any hypothesis.
RansacResult ransac_umeyama(const PointCloud& src, const PointCloud& dst, const RansacOptions& options);

// Sum of squared nearest-neighbor distances, both directions.
double chamfer_distance(const PointCloud& a, const PointCloud& b);

// Index into b of the closest point for each point of a; ties go to the lowest index.
// Brute force up to kBruteForceLimit points in b, k-d tree above.
inline constexpr std::size_t kBruteForceLimit = 512;
std::vector<std::size_t> nearest_neighbor_indices(const PointCloud& a, const PointCloud& b);
std::vector<std::size_t> nearest_neighbor_brute_force(const PointCloud& a, const PointCloud& b);
std::vector<std::size_t> nearest_neighbor_kdtree(const PointCloud& a, const PointCloud& b);

double rotation_error_degrees(const Mat3& r1, const Mat3& r2);

double degrees(double radians);
double radians(double degrees);

}  // namespace nf
