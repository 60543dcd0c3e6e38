#include "nocsfit/evalmetrics.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "nocsfit/error.hpp"

namespace nf {

bool mug_symmetry(Category category, bool handle_visible) {
  if (category == Category::Mug) return !handle_visible;
  return category_spec(category).symmetric;
}

namespace {

double grid_iou(const OrientedBox& a, const OrientedBox& b) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const OrientedBox* box : {&a, &b}) {
    for (int corner = 0; corner < 8; ++corner) {
      const Vec3 sign((corner & 1) ? 0.5 : -0.5, (corner & 2) ? 0.5 : -0.5, (corner & 4) ? 0.5 : -0.5);
      const Vec3 p = box->center + box->rotation * sign.cwiseProduct(box->extents);
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
  }
  const Vec3 cell = (hi - lo) / kIouGridCells;
  std::size_t inter = 0, uni = 0;
  for (int i = 0; i < kIouGridCells; ++i) {
    for (int j = 0; j < kIouGridCells; ++j) {
      for (int k = 0; k < kIouGridCells; ++k) {
        const Vec3 p = lo + cell.cwiseProduct(Vec3(i + 0.5, j + 0.5, k + 0.5));
        const bool in_a = a.contains(p);
        const bool in_b = b.contains(p);
        inter += (in_a && in_b) ? 1 : 0;
        uni += (in_a || in_b) ? 1 : 0;
      }
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

double iou_3d(const OrientedBox& pred, const OrientedBox& gt, bool symmetric) {
  if (!symmetric) return grid_iou(pred, gt);
  double best = 0.0;
  for (int j = 0; j < kIouYawSamples; ++j) {
    OrientedBox yawed = pred;
    yawed.rotation = pred.rotation * rotation_y(radians(180.0 * j / kIouYawSamples));
    best = std::max(best, grid_iou(yawed, gt));
  }
  return best;
}

PoseError pose_errors(const SimilarityTransform& pred, const SimilarityTransform& gt, bool symmetric) {
  PoseError e;
  e.meters = (pred.translation - gt.translation).norm();
  if (symmetric) {
    const Vec3 a = pred.rotation * Vec3::UnitY();
    const Vec3 b = gt.rotation * Vec3::UnitY();
    e.degrees = degrees(std::atan2(a.cross(b).norm(), a.dot(b)));
  } else {
    e.degrees = rotation_error_degrees(pred.rotation, gt.rotation);
  }
  return e;
}

std::vector<std::string> Thresholds::names() const {
  std::vector<std::string> out;
  for (double t : iou) out.push_back("3D_" + std::to_string(static_cast<int>(std::lround(100.0 * t))));
  for (const auto& p : pose) {
    std::ostringstream s;
    s << p.degrees << "deg" << p.centimeters << "cm";
    out.push_back(s.str());
  }
  return out;
}

const MetricRow& MetricTable::row(Category c) const {
  for (std::size_t i = 0; i < categories.size(); ++i) {
    if (categories[i] == c) return per_category[i];
  }
  throw Error(ErrorCode::EmptyCategory, "no row for " + std::string(to_string(c)));
}

double MetricTable::mean_of(const std::string& metric) const {
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    if (metrics[i] == metric) return mean.accuracy[i];
  }
  throw Error(ErrorCode::ConfigError, "unknown metric '" + metric + "'");
}

MetricTable accuracy_table(std::span<const PoseErrorRecord> records, const Thresholds& thresholds,
                           std::span<const Category> categories) {
  MetricTable table;
  table.metrics = thresholds.names();
  if (categories.empty()) {
    for (Category c : kAllCategories) {
      if (std::any_of(records.begin(), records.end(), [&](const auto& r) { return r.category == c; })) {
        table.categories.push_back(c);
      }
    }
    if (table.categories.empty()) throw Error(ErrorCode::EmptyCategory, "no records to tabulate");
  } else {
    table.categories.assign(categories.begin(), categories.end());
  }

  const std::size_t m = table.metrics.size();
  table.mean.accuracy.assign(m, 0.0);
  for (Category c : table.categories) {
    MetricRow row;
    row.accuracy.assign(m, 0.0);
    for (const auto& r : records) {
      if (r.category != c) continue;
      ++row.count;
      row.mean_cd += r.chamfer;
      if (r.failed) continue;
      std::size_t k = 0;
      for (double t : thresholds.iou) row.accuracy[k++] += r.iou >= t ? 1.0 : 0.0;
      for (const auto& t : thresholds.pose) {
        row.accuracy[k++] += (r.rotation_deg <= t.degrees && r.translation_m <= 0.01 * t.centimeters) ? 1.0 : 0.0;
      }
    }
    if (row.count == 0) throw Error(ErrorCode::EmptyCategory, "no records for " + std::string(to_string(c)));
    const double n = static_cast<double>(row.count);
    for (auto& a : row.accuracy) a /= n;
    row.mean_cd /= n;
    for (std::size_t k = 0; k < m; ++k) table.mean.accuracy[k] += row.accuracy[k];
    table.mean.mean_cd += row.mean_cd;
    table.mean.count += row.count;
    table.per_category.push_back(std::move(row));
  }
  const double nc = static_cast<double>(table.categories.size());
  for (auto& a : table.mean.accuracy) a /= nc;
  table.mean.mean_cd /= nc;
  return table;
}

namespace {

nlohmann::ordered_json row_json(const MetricTable& t, const MetricRow& row) {
  nlohmann::ordered_json j;
  for (std::size_t k = 0; k < t.metrics.size(); ++k) j[t.metrics[k]] = row.accuracy[k];
  j["mean_cd"] = row.mean_cd;
  j["count"] = row.count;
  return j;
}

}  // namespace

nlohmann::ordered_json to_json(const MetricTable& table) {
  nlohmann::ordered_json j;
  j["metrics"] = table.metrics;
  nlohmann::ordered_json cats = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < table.categories.size(); ++i) {
    cats[std::string(to_string(table.categories[i]))] = row_json(table, table.per_category[i]);
  }
  j["categories"] = cats;
  j["mean"] = row_json(table, table.mean);
  return j;
}

void write_records_csv(std::ostream& out, std::span<const PoseErrorRecord> records) {
  out << "index,category,symmetric,failed,rotation_deg,translation_m,iou,chamfer\n";
  const auto old = out.precision(17);
  for (const auto& r : records) {
    out << r.index << ',' << to_string(r.category) << ',' << (r.symmetric ? 1 : 0) << ',' << (r.failed ? 1 : 0) << ','
        << r.rotation_deg << ',' << r.translation_m << ',' << r.iou << ',' << r.chamfer << '\n';
  }
  out.precision(old);
}

}  // namespace nf
