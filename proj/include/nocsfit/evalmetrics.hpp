#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nocsfit/geometry.hpp"
#include "nocsfit/synthdata.hpp"

namespace nf {

struct PoseErrorRecord {
  std::size_t index = 0;  // position in the evaluated set
  Category category = Category::Bottle;
  bool symmetric = false;
  bool failed = false;  // pose could not be estimated; counts as incorrect
  double rotation_deg = 180.0;
  double translation_m = 0.0;
  double iou = 0.0;
  double chamfer = 0.0;
};

// Mugs are symmetric exactly when the handle is hidden; other categories follow their spec.
bool mug_symmetry(Category category, bool handle_visible);

inline constexpr int kIouGridCells = 48;  // per axis
inline constexpr int kIouYawSamples = 20;

// Volume IoU by grid sampling over the union's axis-aligned hull. When symmetric, the
// predicted box is also yawed about its own vertical axis and the best overlap is kept.
double iou_3d(const OrientedBox& pred, const OrientedBox& gt, bool symmetric);

struct PoseError {
  double degrees = 0.0;
  double meters = 0.0;
};
PoseError pose_errors(const SimilarityTransform& pred, const SimilarityTransform& gt, bool symmetric);

struct PoseThreshold {
  double degrees;
  double centimeters;
};

struct Thresholds {
  std::vector<double> iou = {0.5, 0.75};
  std::vector<PoseThreshold> pose = {{5, 2}, {5, 5}, {10, 2}, {10, 5}};

  std::vector<std::string> names() const;  // "3D_50", ..., "10deg5cm"
};

struct MetricRow {
  std::vector<double> accuracy;  // one entry per Thresholds::names()
  double mean_cd = 0.0;
  std::size_t count = 0;
};

struct MetricTable {
  std::vector<std::string> metrics;
  std::vector<Category> categories;
  std::vector<MetricRow> per_category;
  MetricRow mean;  // arithmetic mean over categories

  const MetricRow& row(Category c) const;
  double mean_of(const std::string& metric) const;
};

// Per category, the fraction of records within each closed threshold; then the mean.
// `categories` fixes the rows (throws EmptyCategory for a row without records); when
// empty, rows are the categories present in `records`.
MetricTable accuracy_table(std::span<const PoseErrorRecord> records, const Thresholds& thresholds = {},
                           std::span<const Category> categories = {});

nlohmann::ordered_json to_json(const MetricTable& table);
void write_records_csv(std::ostream& out, std::span<const PoseErrorRecord> records);

}  // namespace nf
