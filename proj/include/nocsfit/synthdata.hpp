#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nocsfit/diffcore/tensor.hpp"
#include "nocsfit/geometry.hpp"

namespace nf {

enum class Category : std::uint32_t { Bottle = 0, Bowl = 1, Camera = 2, Can = 3, Laptop = 4, Mug = 5 };

inline constexpr std::array<Category, 6> kAllCategories = {Category::Bottle, Category::Bowl,   Category::Camera,
                                                           Category::Can,    Category::Laptop, Category::Mug};

std::string_view to_string(Category c);
Category category_from_string(std::string_view name);  // throws UnknownCategory
Category category_from_id(std::uint32_t id);            // throws UnknownCategory

struct CategorySpec {
  Category category = Category::Bottle;
  bool symmetric = false;  // yaw about +y unobservable; mug decided per observation
  std::size_t prior_points = 1024;
};

CategorySpec category_spec(Category c, std::size_t prior_points = 1024);

struct SurfacePoint {
  Vec3 point;
  bool handle = false;
};

// Area-weighted random samples of the raw (unnormalized) category surface.
std::vector<SurfacePoint> sample_surface(Category c, std::size_t n, std::mt19937_64& rng);

struct Prior {
  CategorySpec spec;
  PointCloud points;  // canonical, unit bounding-box diagonal, centered
  std::vector<Vec3> colors;
  std::vector<bool> handle;  // per point, mug handle membership
  Vec3 raw_center = Vec3::Zero();
  double raw_scale = 1.0;  // canonical = (raw - raw_center) * raw_scale

  Vec3 canonical(const Vec3& raw) const { return (raw - raw_center) * raw_scale; }
};

// Deterministic; surfaces of revolution use 12-fold orbits so the prior is exactly
// invariant under 30 degree yaw steps.
Prior make_prior(const CategorySpec& spec);

struct Variation {
  double min_axis_scale = 0.7;
  double max_axis_scale = 1.3;
  double amplitude = 0.05;  // smooth radial perturbation
  double hue_range = 0.25;  // instance color phase offset in [-hue_range, hue_range]
};

struct InstanceModel {
  CategorySpec spec;
  PointCloud points;       // canonical model R_gt = prior + gt_deformation
  Tensor2 gt_deformation;  // N_c x 3
  std::vector<Vec3> colors;
  std::vector<bool> handle;
  std::uint64_t seed = 0;

  // prior normalization, so raw surface samples can be mapped onto the instance
  Vec3 prior_center = Vec3::Zero();
  double prior_scale = 1.0;

  Vec3 axis_scale = Vec3::Ones();
  double amplitude = 0.0;
  Vec3 frequency = Vec3::Zero();
  Vec3 phase = Vec3::Zero();
  double hue = 0.0;
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  // Maps a prior-canonical point onto this instance's canonical surface.
  Vec3 deform(const Vec3& prior_point) const;
  Vec3 from_raw(const Vec3& raw) const { return deform((raw - prior_center) * prior_scale); }
  Vec3 color(const Vec3& canonical_point) const;
};

Vec3 canonical_color(const Vec3& canonical_point, double hue);

InstanceModel sample_instance(const Prior& prior, const Variation& variation, std::uint64_t seed);

struct PoseSampling {
  double min_scale = 0.08;  // meters
  double max_scale = 0.4;
  double yaw_only_fraction = 0.5;
  double max_translation = 0.5;  // each axis in [-max, max]
};

struct RenderOptions {
  PoseSampling pose;
  double noise_sigma = 0.0;  // meters
  double color_noise = 0.0;
  double crop_fraction = 0.3;  // share of surface samples removed from the far side
  std::size_t points = 1024;   // N_p
  // Sample observed points from the instance's model points and record their indices.
  bool from_model_points = false;
};

struct Observation {
  Category category = Category::Bottle;
  ColoredPointCloud cloud;
  SimilarityTransform gt_pose;
  PointCloud gt_nocs;  // canonical coordinates of every observed point
  bool handle_visible = false;
  std::uint64_t seed = 0;
  std::shared_ptr<const InstanceModel> instance;
  std::vector<std::size_t> model_index;  // filled when rendered from model points
};

// Throws TooFewVisiblePoints when the crop leaves fewer than N_p / 2 samples.
Observation render_observation(std::shared_ptr<const InstanceModel> instance, const RenderOptions& options,
                               std::uint64_t seed);

struct DatasetConfig {
  std::vector<Category> categories = {Category::Bottle, Category::Bowl, Category::Laptop, Category::Mug};
  std::size_t count = 16;
  std::size_t prior_points = 1024;  // N_c
  Variation variation;
  RenderOptions render;
  std::uint64_t seed = 0;
};

std::uint64_t split_seed(std::uint64_t master, std::uint64_t index);

// Cached, deterministic priors per category for one N_c.
class PriorLibrary {
 public:
  explicit PriorLibrary(std::size_t prior_points) : prior_points_(prior_points) {}
  const Prior& get(Category c);
  std::size_t prior_points() const { return prior_points_; }

 private:
  std::size_t prior_points_;
  std::vector<std::pair<Category, std::unique_ptr<Prior>>> cache_;
};

// Observation i: category i mod |categories|, instance and render seeds split from (seed, i).
std::vector<Observation> generate_dataset(const DatasetConfig& config, PriorLibrary& priors);
std::shared_ptr<const InstanceModel> regenerate_instance(const DatasetConfig& config, PriorLibrary& priors,
                                                         Category c, std::uint64_t observation_seed);

struct Dataset {
  DatasetConfig config;
  std::vector<Observation> observations;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

// "NFD1" container; see README for the byte layout. Loading regenerates instance
// models from the embedded config and per-observation seeds.
void write_dataset(std::ostream& out, const Dataset& dataset);
Dataset read_dataset(std::istream& in, PriorLibrary* priors = nullptr);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path, PriorLibrary* priors = nullptr);

}  // namespace nf
