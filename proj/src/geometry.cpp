#include "nocsfit/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "nocsfit/error.hpp"

namespace nf {

Vec3 PointCloud::centroid() const {
  if (points.empty()) throw Error(ErrorCode::EmptyCloud, "centroid of an empty cloud");
  Vec3 sum = Vec3::Zero();
  for (const auto& p : points) sum += p;
  return sum / static_cast<double>(points.size());
}

std::pair<Vec3, Vec3> PointCloud::bounds() const {
  if (points.empty()) throw Error(ErrorCode::EmptyCloud, "bounds of an empty cloud");
  Vec3 lo = points.front();
  Vec3 hi = points.front();
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return {lo, hi};
}

bool PointCloud::all_finite() const {
  return std::all_of(points.begin(), points.end(), [](const Vec3& p) { return p.allFinite(); });
}

bool OrientedBox::contains(const Vec3& p) const {
  const Vec3 local = rotation.transpose() * (p - center);
  const Vec3 half = 0.5 * extents;
  return std::abs(local.x()) <= half.x() && std::abs(local.y()) <= half.y() &&
         std::abs(local.z()) <= half.z();
}

Mat3 rotation_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
Mat3 rotation_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
Mat3 rotation_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

Mat3 axis_angle(const Vec3& axis, double a) {
  return Eigen::AngleAxisd(a, axis.normalized()).toRotationMatrix();
}

bool is_rotation(const Mat3& r, double tolerance) {
  if (!r.allFinite()) return false;
  const double orth = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  return orth <= tolerance && std::abs(r.determinant() - 1.0) <= tolerance;
}

double degrees(double rad) { return rad * 180.0 / std::numbers::pi; }
double radians(double deg) { return deg * std::numbers::pi / 180.0; }

PointCloud apply_transform(const SimilarityTransform& t, const PointCloud& p) {
  PointCloud out;
  out.points.reserve(p.size());
  for (const auto& q : p.points) out.points.push_back(t.apply(q));
  return out;
}

SimilarityTransform umeyama(const PointCloud& src, const PointCloud& dst, bool with_scale) {
  if (src.size() != dst.size()) {
    throw Error(ErrorCode::LengthMismatch, "umeyama: src has " + std::to_string(src.size()) +
                                               " points, dst has " + std::to_string(dst.size()));
  }
  if (src.size() < 3) throw Error(ErrorCode::DegenerateConfiguration, "umeyama needs at least 3 points");

  const double n = static_cast<double>(src.size());
  const Vec3 mu_src = src.centroid();
  const Vec3 mu_dst = dst.centroid();

  Mat3 cov = Mat3::Zero();
  double var_src = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - mu_src;
    const Vec3 b = dst[i] - mu_dst;
    cov += b * a.transpose();
    var_src += a.squaredNorm();
  }
  cov /= n;
  var_src /= n;

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  // rank < 2: collinear or coincident points leave rotation about the line undetermined
  if (!(var_src > 0.0) || !(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0)) {
    throw Error(ErrorCode::DegenerateConfiguration, "umeyama: cross-covariance rank < 2");
  }

  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Vec3 d = Vec3::Ones();
  if (u.determinant() * v.determinant() < 0.0) d(2) = -1.0;

  SimilarityTransform t;
  t.rotation = u * d.asDiagonal() * v.transpose();
  t.scale = with_scale ? sv.dot(d) / var_src : 1.0;
  t.translation = mu_dst - t.scale * (t.rotation * mu_src);
  return t;
}

std::size_t RansacResult::inlier_count() const {
  return static_cast<std::size_t>(std::count(inliers.begin(), inliers.end(), true));
}

namespace {

std::vector<bool> score(const SimilarityTransform& t, const PointCloud& src, const PointCloud& dst,
                        double threshold, std::size_t& count) {
  std::vector<bool> mask(src.size(), false);
  count = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if ((dst[i] - t.apply(src[i])).norm() < threshold) {
      mask[i] = true;
      ++count;
    }
  }
  return mask;
}

PointCloud gather(const PointCloud& p, std::span<const std::size_t> idx) {
  PointCloud out;
  out.points.reserve(idx.size());
  for (auto i : idx) out.points.push_back(p[i]);
  return out;
}

}  // namespace

RansacResult ransac_umeyama(const PointCloud& src, const PointCloud& dst, const RansacOptions& options) {
  if (src.size() != dst.size()) throw Error(ErrorCode::LengthMismatch, "ransac_umeyama: size mismatch");
  if (src.size() < 4) throw Error(ErrorCode::NoConsensus, "ransac_umeyama needs at least 4 correspondences");
  if (options.iterations < 1 || !(options.inlier_threshold > 0.0)) {
    throw Error(ErrorCode::ConfigError, "ransac_umeyama: iterations >= 1 and threshold > 0 required");
  }

  constexpr std::size_t kSample = 4;
  std::mt19937_64 rng(options.seed);
  const std::size_t n = src.size();

  std::size_t best_count = 0;
  std::vector<bool> best_mask;
  std::array<std::size_t, kSample> pick{};

  for (int it = 0; it < options.iterations; ++it) {
    // distinct indices by rejection; n >= 4 so this terminates
    for (std::size_t k = 0; k < kSample; ++k) {
      bool fresh = false;
      while (!fresh) {
        pick[k] = static_cast<std::size_t>(rng() % n);
        fresh = std::find(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), pick[k]) ==
                pick.begin() + static_cast<std::ptrdiff_t>(k);
      }
    }
    SimilarityTransform hypothesis;
    try {
      hypothesis = umeyama(gather(src, pick), gather(dst, pick));
    } catch (const Error& e) {
      if (e.code() == ErrorCode::DegenerateConfiguration) continue;
      throw;
    }
    std::size_t count = 0;
    auto mask = score(hypothesis, src, dst, options.inlier_threshold, count);
    if (count > best_count) {
      best_count = count;
      best_mask = std::move(mask);
    }
  }

  if (best_count < kSample) {
    throw Error(ErrorCode::NoConsensus,
                "best hypothesis has " + std::to_string(best_count) + " inliers out of " + std::to_string(n));
  }

  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) {
    if (best_mask[i]) idx.push_back(i);
  }
  RansacResult result;
  result.transform = umeyama(gather(src, idx), gather(dst, idx));
  std::size_t refit_count = 0;
  result.inliers = score(result.transform, src, dst, options.inlier_threshold, refit_count);
  return result;
}

namespace {

inline double sq_dist(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

inline void offer(double d, std::size_t j, double& best_d, std::size_t& best_j) {
  if (d < best_d || (d == best_d && j < best_j)) {
    best_d = d;
    best_j = j;
  }
}

class KdTree {
 public:
  explicit KdTree(const PointCloud& cloud) : cloud_(cloud), order_(cloud.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * cloud.size() / kLeaf + 2);
    build(0, order_.size());
  }

  std::size_t nearest(const Vec3& q) const {
    double best_d = std::numeric_limits<double>::infinity();
    std::size_t best_j = std::numeric_limits<std::size_t>::max();
    search(0, q, best_d, best_j);
    return best_j;
  }

 private:
  static constexpr std::size_t kLeaf = 8;

  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end});
    if (end - begin <= kLeaf) return id;

    Vec3 lo = cloud_[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(cloud_[order_[i]]);
      hi = hi.cwiseMax(cloud_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    auto first = order_.begin() + static_cast<std::ptrdiff_t>(begin);
    std::nth_element(first, order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return cloud_[a](axis) < cloud_[b](axis); });
    const double split = cloud_[order_[mid]](axis);
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  // Left holds coordinates <= split, right holds >= split.
  void search(std::size_t id, const Vec3& q, double& best_d, std::size_t& best_j) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) offer(sq_dist(q, cloud_[order_[i]]), order_[i], best_d, best_j);
      return;
    }
    const double diff = q(node.axis) - node.split;
    const std::size_t near = diff <= 0.0 ? node.left : node.right;
    const std::size_t far = diff <= 0.0 ? node.right : node.left;
    search(near, q, best_d, best_j);
    // ties must still be visited so the lowest index wins
    if (diff * diff <= best_d) search(far, q, best_d, best_j);
  }

  const PointCloud& cloud_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace

std::vector<std::size_t> nearest_neighbor_brute_force(const PointCloud& a, const PointCloud& b) {
  if (b.empty()) throw Error(ErrorCode::EmptyCloud, "nearest neighbor target is empty");
  std::vector<std::size_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    double best_d = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = sq_dist(a[i], b[j]);
      if (d < best_d) {
        best_d = d;
        best_j = j;
      }
    }
    out[i] = best_j;
  }
  return out;
}

std::vector<std::size_t> nearest_neighbor_kdtree(const PointCloud& a, const PointCloud& b) {
  if (b.empty()) throw Error(ErrorCode::EmptyCloud, "nearest neighbor target is empty");
  const KdTree tree(b);
  std::vector<std::size_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = tree.nearest(a[i]);
  return out;
}

std::vector<std::size_t> nearest_neighbor_indices(const PointCloud& a, const PointCloud& b) {
  return b.size() <= kBruteForceLimit ? nearest_neighbor_brute_force(a, b) : nearest_neighbor_kdtree(a, b);
}

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw Error(ErrorCode::EmptyCloud, "chamfer_distance on an empty cloud");
  const auto ab = nearest_neighbor_indices(a, b);
  const auto ba = nearest_neighbor_indices(b, a);
  double forward = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) forward += sq_dist(a[i], b[ab[i]]);
  double backward = 0.0;
  for (std::size_t j = 0; j < b.size(); ++j) backward += sq_dist(b[j], a[ba[j]]);
  return forward + backward;
}

double rotation_error_degrees(const Mat3& r1, const Mat3& r2) {
  // atan2 keeps precision near 0 and 180 degrees where acos of the trace loses it.
  const Mat3 r = r1.transpose() * r2;
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return degrees(std::atan2(0.5 * axis.norm(), 0.5 * (r.trace() - 1.0)));
}

}  // namespace nf
