#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "nocsfit/error.hpp"
#include "nocsfit/evalmetrics.hpp"

using namespace nf;

namespace {

PoseErrorRecord record(Category c, double deg, double cm, double iou, double cd = 0.0) {
  PoseErrorRecord r;
  r.category = c;
  r.symmetric = category_spec(c).symmetric;
  r.rotation_deg = deg;
  r.translation_m = cm / 100.0;
  r.iou = iou;
  r.chamfer = cd;
  return r;
}

SimilarityTransform random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  SimilarityTransform t;
  t.scale = 0.5 + 0.5 * (u(rng) + 1);
  t.rotation = axis_angle(Vec3(u(rng), u(rng), u(rng)), 3.0 * u(rng));
  t.translation = Vec3(u(rng), u(rng), u(rng));
  return t;
}

}  // namespace

TEST_CASE("mug symmetry follows handle visibility") {
  CHECK(mug_symmetry(Category::Mug, false));
  CHECK_FALSE(mug_symmetry(Category::Mug, true));
  CHECK(mug_symmetry(Category::Bottle, true));
  CHECK(mug_symmetry(Category::Bottle, false));
  CHECK_FALSE(mug_symmetry(Category::Laptop, false));
}

TEST_CASE("IoU closed-form cases") {
  OrientedBox unit;
  CHECK(iou_3d(unit, unit, false) >= 0.99);
  OrientedBox shifted = unit;
  shifted.center = Vec3(0.5, 0, 0);
  CHECK(std::abs(iou_3d(unit, shifted, false) - 1.0 / 3.0) <= 0.01);

  OrientedBox far = unit;
  far.center = Vec3(3, 0, 0);
  CHECK(iou_3d(unit, far, false) == 0.0);

  OrientedBox square;
  square.extents = Vec3(1.0, 0.6, 1.0);
  OrientedBox yawed = square;
  yawed.rotation = rotation_y(radians(45.0));
  CHECK(std::abs(iou_3d(yawed, square, true) - 1.0) <= 0.02);
  CHECK(iou_3d(yawed, square, false) < 0.9);
}

TEST_CASE("IoU properties on random boxes") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.2, 1.5), t(-0.4, 0.4);
  for (int trial = 0; trial < 20; ++trial) {
    OrientedBox a, b;
    a.extents = Vec3(u(rng), u(rng), u(rng));
    b.extents = Vec3(u(rng), u(rng), u(rng));
    a.rotation = axis_angle(Vec3(t(rng), 1, t(rng)), t(rng) * 3);
    b.rotation = axis_angle(Vec3(1, t(rng), t(rng)), t(rng) * 3);
    b.center = Vec3(t(rng), t(rng), t(rng));
    CHECK(iou_3d(a, a, false) >= 0.99);
    CHECK(std::abs(iou_3d(a, b, false) - iou_3d(b, a, false)) <= 0.01);
  }
}

TEST_CASE("pose error conventions") {
  std::mt19937_64 rng(4);
  const auto gt = random_pose(rng);
  auto e = pose_errors(gt, gt, false);
  CHECK(e.degrees == doctest::Approx(0.0));
  CHECK(e.meters == 0.0);

  SimilarityTransform yawed = gt;
  yawed.rotation = gt.rotation * rotation_y(radians(57.0));
  CHECK(pose_errors(yawed, gt, true).degrees < 1e-6);
  CHECK(std::abs(pose_errors(yawed, gt, false).degrees - 57.0) < 1e-9);

  SimilarityTransform tilted = gt;
  tilted.rotation = gt.rotation * rotation_x(radians(20.0));
  CHECK(std::abs(pose_errors(tilted, gt, true).degrees - 20.0) < 1e-9);

  SimilarityTransform moved = gt;
  moved.translation += Vec3(0.03, 0.04, 0);
  CHECK(std::abs(pose_errors(moved, gt, false).meters - 0.05) < 1e-15);
}

TEST_CASE("pose errors are invariant under a common rigid pre-composition") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pred = random_pose(rng);
    const auto gt = random_pose(rng);
    auto q = random_pose(rng);
    q.scale = 1.0;
    auto compose = [&](const SimilarityTransform& t) {
      SimilarityTransform out;
      out.scale = t.scale;
      out.rotation = q.rotation * t.rotation;
      out.translation = q.rotation * t.translation + q.translation;
      return out;
    };
    for (bool sym : {false, true}) {
      const auto a = pose_errors(pred, gt, sym);
      const auto b = pose_errors(compose(pred), compose(gt), sym);
      CHECK(std::abs(a.degrees - b.degrees) < 1e-9);
      CHECK(std::abs(a.meters - b.meters) < 1e-9);
    }
  }
}

TEST_CASE("threshold names") {
  const std::vector<std::string> expected{"3D_50", "3D_75", "5deg2cm", "5deg5cm", "10deg2cm", "10deg5cm"};
  CHECK(Thresholds{}.names() == expected);
}

TEST_CASE("all-perfect records score 1 everywhere") {
  std::vector<PoseErrorRecord> recs;
  for (auto c : {Category::Bottle, Category::Laptop}) {
    for (int i = 0; i < 3; ++i) recs.push_back(record(c, 0, 0, 1.0));
  }
  const auto table = accuracy_table(recs);
  for (double a : table.mean.accuracy) CHECK(a == 1.0);
  for (const auto& row : table.per_category) {
    for (double a : row.accuracy) CHECK(a == 1.0);
  }
}

TEST_CASE("thresholds include their boundary") {
  const std::vector<PoseErrorRecord> recs{record(Category::Laptop, 5.0, 2.0, 0.5)};
  const auto table = accuracy_table(recs);
  CHECK(table.mean_of("5deg2cm") == 1.0);
  CHECK(table.mean_of("3D_50") == 1.0);
  CHECK(table.mean_of("3D_75") == 0.0);
}

TEST_CASE("hand-built four-record table") {
  std::vector<PoseErrorRecord> recs{
      record(Category::Laptop, 1.0, 1.0, 0.9, 0.1),   // passes everything
      record(Category::Laptop, 7.0, 1.5, 0.6, 0.3),   // 10deg2cm, 10deg5cm, 3D_50
      record(Category::Laptop, 4.0, 4.0, 0.2, 0.5),   // 5deg5cm, 10deg5cm
      record(Category::Laptop, 30.0, 9.0, 0.8, 0.7),  // 3D_50, 3D_75
  };
  const auto table = accuracy_table(recs);
  REQUIRE(table.categories.size() == 1);
  const std::vector<double> expected{0.75, 0.5, 0.25, 0.5, 0.5, 0.75};
  CHECK(table.per_category[0].accuracy == expected);
  CHECK(table.mean.accuracy == expected);
  CHECK(table.mean.mean_cd == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(table.per_category[0].count == 4);

  recs[0].failed = true;
  const auto with_failure = accuracy_table(recs);
  CHECK(with_failure.mean_of("5deg2cm") == 0.0);
  CHECK(with_failure.mean_of("3D_50") == 0.5);
}

TEST_CASE("category rows and their mean") {
  std::vector<PoseErrorRecord> recs{record(Category::Bottle, 1, 1, 1.0, 1.0), record(Category::Mug, 50, 50, 0, 3.0),
                                    record(Category::Mug, 1, 1, 1.0, 5.0)};
  const auto table = accuracy_table(recs);
  CHECK(table.categories == std::vector<Category>{Category::Bottle, Category::Mug});
  CHECK(table.row(Category::Mug).mean_cd == 4.0);
  CHECK(table.mean.mean_cd == 2.5);
  CHECK(table.mean_of("10deg5cm") == 0.75);
  CHECK_THROWS_AS(table.row(Category::Can), Error);
  CHECK_THROWS_AS(table.mean_of("1deg1cm"), Error);

  const std::vector<Category> wanted{Category::Bottle, Category::Can};
  try {
    accuracy_table(recs, {}, wanted);
    FAIL("expected EmptyCategory");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyCategory);
  }
}

TEST_CASE("loosening a threshold never lowers accuracy") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> deg(0, 20), cm(0, 10), iou(0, 1);
  std::vector<PoseErrorRecord> recs;
  const Category cats[] = {Category::Bottle, Category::Bowl, Category::Laptop, Category::Mug};
  for (int i = 0; i < 200; ++i) recs.push_back(record(cats[i % 4], deg(rng), cm(rng), iou(rng)));

  Thresholds tight{{0.75}, {{5, 2}}};
  const auto base = accuracy_table(recs, tight);
  for (const Thresholds& loose : {Thresholds{{0.5}, {{5, 2}}}, Thresholds{{0.75}, {{10, 2}}},
                                  Thresholds{{0.75}, {{5, 5}}}, Thresholds{{0.25}, {{15, 8}}}}) {
    const auto t = accuracy_table(recs, loose);
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(t.mean.accuracy[k] >= base.mean.accuracy[k]);
      for (std::size_t c = 0; c < t.per_category.size(); ++c) {
        CHECK(t.per_category[c].accuracy[k] >= base.per_category[c].accuracy[k]);
      }
    }
  }
}

TEST_CASE("table JSON and record CSV") {
  std::vector<PoseErrorRecord> recs{record(Category::Bottle, 1, 1, 1.0, 0.25), record(Category::Laptop, 7, 3, 0.4, 0.5)};
  const auto j = to_json(accuracy_table(recs));
  CHECK(j.at("metrics").size() == 6);
  CHECK(j.at("categories").size() == 2);
  CHECK(j.dump() == to_json(accuracy_table(recs)).dump());

  std::ostringstream csv;
  write_records_csv(csv, recs);
  std::istringstream lines(csv.str());
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  CHECK(header == "index,category,symmetric,failed,rotation_deg,translation_m,iou,chamfer");
  CHECK(first.rfind("0,bottle,", 0) == 0);
}
