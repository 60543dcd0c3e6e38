#include "nocsfit/synthdata.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <variant>

#include <Eigen/Geometry>

#include "nocsfit/binary_io.hpp"
#include "nocsfit/error.hpp"

namespace nf {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kOrbit = 12;  // points per yaw orbit, 30 degree spacing

// Surface of revolution about the local +y axis; profile holds (radius, height) vertices.
struct Revolution {
  std::vector<Eigen::Vector2d> profile;
  Mat3 frame = Mat3::Identity();  // local -> raw
  Vec3 origin = Vec3::Zero();

  double segment_area(std::size_t s) const {
    const auto& a = profile[s];
    const auto& b = profile[s + 1];
    return kPi * (a.x() + b.x()) * (b - a).norm();
  }
  double area() const {
    double total = 0.0;
    for (std::size_t s = 0; s + 1 < profile.size(); ++s) total += segment_area(s);
    return total;
  }
  // Position along segment s for a cumulative lateral-area fraction u in [0,1].
  Eigen::Vector2d along(std::size_t s, double u) const {
    const auto& a = profile[s];
    const auto& b = profile[s + 1];
    const double r1 = a.x(), r2 = b.x(), dr = r2 - r1;
    double t = u;
    if (std::abs(dr) > 1e-12) t = (-r1 + std::sqrt(std::max(0.0, r1 * r1 + dr * u * (r1 + r2)))) / dr;
    return a + std::clamp(t, 0.0, 1.0) * (b - a);
  }
  Vec3 point(const Eigen::Vector2d& ry, double theta) const {
    return origin + frame * Vec3(ry.x() * std::cos(theta), ry.y(), ry.x() * std::sin(theta));
  }
  // Profile position for a global area fraction u in [0,1).
  Eigen::Vector2d locate(double u) const {
    double target = u * area();
    const std::size_t n = profile.size() - 1;
    for (std::size_t s = 0; s < n; ++s) {
      const double a = segment_area(s);
      if (a <= 0.0) continue;
      if (target <= a || s + 1 == n) return along(s, std::clamp(target / a, 0.0, 1.0));
      target -= a;
    }
    return profile.back();
  }
  Vec3 sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u = unit(rng);
    return point(locate(u), 2.0 * kPi * unit(rng));
  }
};

struct Box {
  Vec3 center = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  Vec3 extents = Vec3::Ones();

  double area() const {
    return 2.0 * (extents.x() * extents.y() + extents.y() * extents.z() + extents.x() * extents.z());
  }
  Vec3 sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double face[3] = {extents.y() * extents.z(), extents.x() * extents.z(), extents.x() * extents.y()};
    double pick = unit(rng) * (face[0] + face[1] + face[2]);
    int axis = 2;
    for (int k = 0; k < 3; ++k) {
      if (pick < face[k]) {
        axis = k;
        break;
      }
      pick -= face[k];
    }
    Vec3 local;
    for (int k = 0; k < 3; ++k) local(k) = (unit(rng) - 0.5) * extents(k);
    local(axis) = (unit(rng) < 0.5 ? -0.5 : 0.5) * extents(axis);
    return center + rotation * local;
  }
};

// Partial torus: tube of radius `minor` around an arc of radius `major` in the xy plane of `frame`.
struct TorusArc {
  Vec3 center = Vec3::Zero();
  Mat3 frame = Mat3::Identity();
  double major = 0.2, minor = 0.04;
  double start = -kPi / 2, stop = kPi / 2;

  double area() const { return 2.0 * kPi * minor * major * (stop - start); }
  Vec3 sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (;;) {
      const double phi = start + (stop - start) * unit(rng);
      const double psi = 2.0 * kPi * unit(rng);
      if (unit(rng) * (major + minor) > major + minor * std::cos(psi)) continue;
      const double ring = major + minor * std::cos(psi);
      return center + frame * Vec3(ring * std::cos(phi), ring * std::sin(phi), minor * std::sin(psi));
    }
  }
};

struct Patch {
  std::variant<Revolution, Box, TorusArc> shape;
  bool handle = false;

  double area() const {
    return std::visit([](const auto& s) { return s.area(); }, shape);
  }
  Vec3 sample(std::mt19937_64& rng) const {
    return std::visit([&](const auto& s) { return s.sample(rng); }, shape);
  }
};

std::vector<Eigen::Vector2d> bowl_profile() {
  constexpr double radius = 0.5;
  constexpr int segments = 16;
  std::vector<Eigen::Vector2d> p;
  for (int i = 0; i <= segments; ++i) {
    const double a = 0.5 * kPi * i / segments;
    p.emplace_back(radius * std::sin(a), radius - radius * std::cos(a));
  }
  p.front().x() = 0.0;
  return p;
}

std::vector<Patch> category_surface(Category c) {
  switch (c) {
    case Category::Bottle:
      return {{Revolution{{{0, 0}, {0.3, 0}, {0.3, 0.6}, {0.1, 0.8}, {0.1, 1.0}, {0, 1.0}}}, false}};
    case Category::Can:
      return {{Revolution{{{0, 0}, {0.33, 0}, {0.33, 1.0}, {0, 1.0}}}, false}};
    case Category::Bowl:
      return {{Revolution{bowl_profile()}, false}};
    case Category::Mug: {
      TorusArc handle;
      handle.center = Vec3(0.35, 0.4, 0.0);
      handle.major = 0.2;
      handle.minor = 0.04;
      handle.start = -radians(80.0);
      handle.stop = radians(80.0);
      return {{Revolution{{{0, 0}, {0.35, 0}, {0.35, 0.8}}}, false}, {handle, true}};
    }
    case Category::Laptop: {
      Box base{Vec3(0, 0.02, 0), Mat3::Identity(), Vec3(1.0, 0.04, 0.7)};
      const Mat3 tilt = rotation_x(-radians(15.0));  // screen opened 105 degrees
      const Vec3 hinge(0, 0.04, -0.35);
      Box screen{hinge + tilt * Vec3(0, 0.35, 0.015), tilt, Vec3(1.0, 0.7, 0.03)};
      return {{base, false}, {screen, false}};
    }
    case Category::Camera: {
      Box body{Vec3(0, 0.3, 0), Mat3::Identity(), Vec3(0.9, 0.6, 0.4)};
      Box finder{Vec3(-0.25, 0.65, 0), Mat3::Identity(), Vec3(0.2, 0.1, 0.15)};
      Revolution lens{{{0.18, 0}, {0.18, 0.3}, {0, 0.3}}, rotation_x(radians(90.0)), Vec3(0.1, 0.3, 0.2)};
      return {{body, false}, {finder, false}, {lens, false}};
    }
  }
  throw Error(ErrorCode::UnknownCategory, "category id " + std::to_string(static_cast<int>(c)));
}

// Deterministic yaw-orbit sampling of a single surface of revolution about +y.
std::vector<Vec3> orbit_samples(const Revolution& rev, std::size_t n) {
  const std::size_t orbits = n / kOrbit;
  const std::size_t rest = n % kOrbit;
  constexpr double golden = 0.6180339887498949;
  const double step = 2.0 * kPi / kOrbit;
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t i = 0; i < orbits; ++i) {
    const auto ry = rev.locate((static_cast<double>(i) + 0.5) / static_cast<double>(orbits));
    const double base = std::fmod(static_cast<double>(i) * golden, 1.0) * step;
    for (int j = 0; j < kOrbit; ++j) out.push_back(rev.point(ry, base + step * j));
  }
  std::vector<Eigen::Vector2d> poles;
  for (const auto& v : rev.profile) {
    if (v.x() == 0.0) poles.push_back(v);
  }
  for (std::size_t i = 0; i < rest; ++i) out.push_back(rev.point(poles[i % poles.size()], 0.0));
  return out;
}

bool yaw_symmetric(Category c) { return c == Category::Bottle || c == Category::Bowl || c == Category::Can; }

}  // namespace

std::string_view to_string(Category c) {
  switch (c) {
    case Category::Bottle: return "bottle";
    case Category::Bowl: return "bowl";
    case Category::Camera: return "camera";
    case Category::Can: return "can";
    case Category::Laptop: return "laptop";
    case Category::Mug: return "mug";
  }
  throw Error(ErrorCode::UnknownCategory, "category id " + std::to_string(static_cast<int>(c)));
}

Category category_from_string(std::string_view name) {
  for (Category c : kAllCategories) {
    if (to_string(c) == name) return c;
  }
  throw Error(ErrorCode::UnknownCategory, "unknown category '" + std::string(name) + "'");
}

Category category_from_id(std::uint32_t id) {
  if (id >= kAllCategories.size()) throw Error(ErrorCode::UnknownCategory, "category id " + std::to_string(id));
  return static_cast<Category>(id);
}

CategorySpec category_spec(Category c, std::size_t prior_points) {
  to_string(c);
  return {c, yaw_symmetric(c), prior_points};
}

std::vector<SurfacePoint> sample_surface(Category c, std::size_t n, std::mt19937_64& rng) {
  const auto patches = category_surface(c);
  std::vector<double> areas;
  for (const auto& p : patches) areas.push_back(p.area());
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  std::vector<SurfacePoint> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& patch = patches[pick(rng)];
    out.push_back({patch.sample(rng), patch.handle});
  }
  return out;
}

Prior make_prior(const CategorySpec& spec) {
  if (spec.prior_points < 32) {
    throw Error(ErrorCode::ConfigError, "prior needs at least 32 points, got " + std::to_string(spec.prior_points));
  }
  const auto patches = category_surface(spec.category);
  Prior prior;
  prior.spec = spec;
  std::vector<Vec3> raw;
  if (spec.symmetric) {
    raw = orbit_samples(std::get<Revolution>(patches.front().shape), spec.prior_points);
    prior.handle.assign(raw.size(), false);
  } else {
    std::mt19937_64 rng(0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(spec.category));
    for (const auto& s : sample_surface(spec.category, spec.prior_points, rng)) {
      raw.push_back(s.point);
      prior.handle.push_back(s.handle);
    }
  }
  const auto [lo, hi] = PointCloud(raw).bounds();
  prior.raw_center = 0.5 * (lo + hi);
  // Surfaces of revolution keep their axis on x = z = 0.
  if (spec.symmetric) prior.raw_center.x() = prior.raw_center.z() = 0.0;
  prior.raw_scale = 1.0 / (hi - lo).norm();
  for (const auto& p : raw) {
    prior.points.points.push_back(prior.canonical(p));
    prior.colors.push_back(canonical_color(prior.points.points.back(), 0.0));
  }
  return prior;
}

Vec3 canonical_color(const Vec3& p, double hue) {
  Vec3 c;
  for (int k = 0; k < 3; ++k) {
    c(k) = std::clamp(0.5 + 0.45 * std::sin(kPi * p(k) * (k + 1) + hue + 2.0 * k), 0.0, 1.0);
  }
  return c;
}

Vec3 InstanceModel::deform(const Vec3& p) const {
  double w = 0.0;
  if (spec.symmetric) {
    w = std::sin(frequency.y() * p.y() + phase.y());
  } else {
    for (int k = 0; k < 3; ++k) w += std::sin(frequency(k) * p(k) + phase(k)) / 3.0;
  }
  const Vec3 q = axis_scale.cwiseProduct(p) * (1.0 + amplitude * w);
  return (q - center) * scale;
}

Vec3 InstanceModel::color(const Vec3& p) const { return canonical_color(p, hue); }

InstanceModel sample_instance(const Prior& prior, const Variation& variation, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double a, double b) { return a + (b - a) * unit(rng); };

  InstanceModel inst;
  inst.spec = prior.spec;
  inst.seed = seed;
  inst.prior_center = prior.raw_center;
  inst.prior_scale = prior.raw_scale;
  for (int k = 0; k < 3; ++k) inst.axis_scale(k) = between(variation.min_axis_scale, variation.max_axis_scale);
  if (prior.spec.symmetric) inst.axis_scale.z() = inst.axis_scale.x();
  inst.amplitude = between(0.0, variation.amplitude);
  for (int k = 0; k < 3; ++k) {
    inst.frequency(k) = between(kPi, 2.0 * kPi);
    inst.phase(k) = between(0.0, 2.0 * kPi);
  }
  inst.hue = between(-variation.hue_range, variation.hue_range);

  // Renormalize on the deformed prior points.
  std::vector<Vec3> deformed;
  deformed.reserve(prior.points.size());
  for (const auto& p : prior.points.points) deformed.push_back(inst.deform(p));
  const auto [lo, hi] = PointCloud(deformed).bounds();
  Vec3 center = 0.5 * (lo + hi);
  if (prior.spec.symmetric) center.x() = center.z() = 0.0;
  const double diag = (hi - lo).norm();
  // Already normalized (zero variation): keep the prior untouched.
  if (center.norm() > 1e-12 || std::abs(diag - 1.0) > 1e-12) {
    inst.center = center;
    inst.scale = 1.0 / diag;
  }

  inst.gt_deformation = Tensor2(prior.points.size(), 3);
  inst.handle = prior.handle;
  for (std::size_t i = 0; i < prior.points.size(); ++i) {
    const Vec3& p = prior.points[i];
    const Vec3 q = inst.deform(p);
    Vec3 v;
    for (int k = 0; k < 3; ++k) {
      const double d = q(k) - p(k);
      inst.gt_deformation(i, static_cast<std::size_t>(k)) = d;
      v(k) = p(k) + d;
    }
    inst.points.points.push_back(v);
    inst.colors.push_back(inst.color(v));
  }
  return inst;
}

namespace {

Mat3 uniform_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q;
  do {
    q = Eigen::Quaterniond(g(rng), g(rng), g(rng), g(rng));
  } while (q.norm() < 1e-9);
  return q.normalized().toRotationMatrix();
}

}  // namespace

Observation render_observation(std::shared_ptr<const InstanceModel> instance, const RenderOptions& options,
                               std::uint64_t seed) {
  if (!instance) throw Error(ErrorCode::ConfigError, "render_observation: no instance");
  if (options.points == 0) throw Error(ErrorCode::ConfigError, "render_observation: N_p must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& ps = options.pose;

  Observation obs;
  obs.category = instance->spec.category;
  obs.seed = seed;
  obs.gt_pose.scale = ps.min_scale + (ps.max_scale - ps.min_scale) * unit(rng);
  if (unit(rng) < ps.yaw_only_fraction) {
    obs.gt_pose.rotation = rotation_y(2.0 * kPi * unit(rng));
  } else {
    obs.gt_pose.rotation = uniform_rotation(rng);
  }
  for (int k = 0; k < 3; ++k) obs.gt_pose.translation(k) = (2.0 * unit(rng) - 1.0) * ps.max_translation;

  // Candidate canonical samples.
  const std::size_t n = options.points;
  std::vector<Vec3> canon;
  std::vector<bool> handle;
  std::vector<std::size_t> index;
  canon.reserve(n);
  if (options.from_model_points) {
    std::uniform_int_distribution<std::size_t> any(0, instance->points.size() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t m = any(rng);
      index.push_back(m);
      canon.push_back(instance->points[m]);
      handle.push_back(instance->handle.empty() ? false : static_cast<bool>(instance->handle[m]));
    }
  } else {
    for (const auto& s : sample_surface(instance->spec.category, n, rng)) {
      canon.push_back(instance->from_raw(s.point));
      handle.push_back(s.handle);
    }
  }

  // Crop: drop the share of samples farthest from the camera (largest z).
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<std::size_t> keep = order;
  const auto drop = static_cast<std::size_t>(std::floor(options.crop_fraction * static_cast<double>(n)));
  if (drop > 0) {
    std::vector<double> depth(n);
    for (std::size_t i = 0; i < n; ++i) depth[i] = obs.gt_pose.apply(canon[i]).z();
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return depth[a] < depth[b]; });
    keep.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(std::min(drop, n)));
    if (2 * keep.size() < n) {
      throw Error(ErrorCode::TooFewVisiblePoints,
                  std::to_string(keep.size()) + " of " + std::to_string(n) + " samples survive the crop");
    }
  }
  std::size_t handle_before = 0, handle_after = 0;
  for (std::size_t i = 0; i < n; ++i) handle_before += handle[i] ? 1 : 0;
  for (std::size_t i : keep) handle_after += handle[i] ? 1 : 0;
  obs.handle_visible = handle_before > 0 && 10 * handle_after > handle_before;

  std::vector<std::size_t> chosen = keep;
  if (drop > 0) {
    std::uniform_int_distribution<std::size_t> any(0, keep.size() - 1);
    chosen.clear();
    for (std::size_t i = 0; i < n; ++i) chosen.push_back(keep[any(rng)]);
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i : chosen) {
    const Vec3& x = canon[i];
    obs.gt_nocs.points.push_back(x);
    if (options.from_model_points) obs.model_index.push_back(index[i]);
    Vec3 p = obs.gt_pose.apply(x);
    if (options.noise_sigma > 0.0) {
      for (int k = 0; k < 3; ++k) p(k) += options.noise_sigma * noise(rng);
    }
    Vec3 c = instance->color(x);
    if (options.color_noise > 0.0) {
      for (int k = 0; k < 3; ++k) c(k) = std::clamp(c(k) + options.color_noise * noise(rng), 0.0, 1.0);
    }
    obs.cloud.points.points.push_back(p);
    obs.cloud.colors.push_back(c);
  }
  obs.instance = std::move(instance);
  return obs;
}

std::uint64_t split_seed(std::uint64_t master, std::uint64_t index) {
  // splitmix64 over the mixed pair
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const Prior& PriorLibrary::get(Category c) {
  for (const auto& [cat, prior] : cache_) {
    if (cat == c) return *prior;
  }
  cache_.emplace_back(c, std::make_unique<Prior>(make_prior(category_spec(c, prior_points_))));
  return *cache_.back().second;
}

std::shared_ptr<const InstanceModel> regenerate_instance(const DatasetConfig& config, PriorLibrary& priors,
                                                         Category c, std::uint64_t observation_seed) {
  return std::make_shared<const InstanceModel>(
      sample_instance(priors.get(c), config.variation, split_seed(observation_seed, 0)));
}

std::vector<Observation> generate_dataset(const DatasetConfig& config, PriorLibrary& priors) {
  if (config.categories.empty()) throw Error(ErrorCode::ConfigError, "dataset needs at least one category");
  if (priors.prior_points() != config.prior_points) {
    throw Error(ErrorCode::ConfigError, "prior library N_c differs from the dataset config");
  }
  std::vector<Observation> out;
  out.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) {
    const Category c = config.categories[i % config.categories.size()];
    const std::uint64_t s = split_seed(config.seed, i);
    out.push_back(render_observation(regenerate_instance(config, priors, c, s), config.render, split_seed(s, 1)));
    out.back().seed = s;
  }
  return out;
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  std::vector<std::string> names;
  for (Category k : c.categories) names.emplace_back(to_string(k));
  j = nlohmann::json{
      {"categories", names},
      {"count", c.count},
      {"prior_points", c.prior_points},
      {"seed", c.seed},
      {"variation",
       {{"min_axis_scale", c.variation.min_axis_scale},
        {"max_axis_scale", c.variation.max_axis_scale},
        {"amplitude", c.variation.amplitude},
        {"hue_range", c.variation.hue_range}}},
      {"render",
       {{"min_scale", c.render.pose.min_scale},
        {"max_scale", c.render.pose.max_scale},
        {"yaw_only_fraction", c.render.pose.yaw_only_fraction},
        {"max_translation", c.render.pose.max_translation},
        {"noise_sigma", c.render.noise_sigma},
        {"color_noise", c.render.color_noise},
        {"crop_fraction", c.render.crop_fraction},
        {"points", c.render.points},
        {"from_model_points", c.render.from_model_points}}},
  };
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  try {
    DatasetConfig d;
    if (j.contains("categories")) {
      d.categories.clear();
      for (const auto& name : j.at("categories")) d.categories.push_back(category_from_string(name.get<std::string>()));
    }
    d.count = j.value("count", d.count);
    d.prior_points = j.value("prior_points", d.prior_points);
    d.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("variation")) {
      const auto& v = j.at("variation");
      d.variation.min_axis_scale = v.value("min_axis_scale", d.variation.min_axis_scale);
      d.variation.max_axis_scale = v.value("max_axis_scale", d.variation.max_axis_scale);
      d.variation.amplitude = v.value("amplitude", d.variation.amplitude);
      d.variation.hue_range = v.value("hue_range", d.variation.hue_range);
    }
    if (j.contains("render")) {
      const auto& r = j.at("render");
      d.render.pose.min_scale = r.value("min_scale", d.render.pose.min_scale);
      d.render.pose.max_scale = r.value("max_scale", d.render.pose.max_scale);
      d.render.pose.yaw_only_fraction = r.value("yaw_only_fraction", d.render.pose.yaw_only_fraction);
      d.render.pose.max_translation = r.value("max_translation", d.render.pose.max_translation);
      d.render.noise_sigma = r.value("noise_sigma", d.render.noise_sigma);
      d.render.color_noise = r.value("color_noise", d.render.color_noise);
      d.render.crop_fraction = r.value("crop_fraction", d.render.crop_fraction);
      d.render.points = r.value("points", d.render.points);
      d.render.from_model_points = r.value("from_model_points", d.render.from_model_points);
    }
    if (d.count == 0 || d.prior_points < 32 || d.render.points == 0 || d.categories.empty()) {
      throw Error(ErrorCode::ConfigError, "dataset counts must be positive and N_c at least 32");
    }
    if (d.render.crop_fraction < 0.0 || d.render.crop_fraction >= 1.0) {
      throw Error(ErrorCode::ConfigError, "crop_fraction must lie in [0, 1)");
    }
    c = std::move(d);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("dataset config: ") + e.what());
  }
}

namespace {

constexpr char kDatasetMagic[4] = {'N', 'F', 'D', '1'};
constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint32_t kFlagHandleVisible = 1u << 0;
constexpr std::uint32_t kFlagModelIndex = 1u << 1;

void put_points(std::ostream& out, const std::vector<Vec3>& pts) {
  for (const auto& p : pts) {
    for (int k = 0; k < 3; ++k) binio::put<double>(out, p(k));
  }
}

std::vector<Vec3> get_points(std::istream& in, std::size_t n, const char* what) {
  std::vector<Vec3> pts(n);
  for (auto& p : pts) {
    for (int k = 0; k < 3; ++k) p(k) = binio::get<double>(in, what);
  }
  return pts;
}

}  // namespace

void write_dataset(std::ostream& out, const Dataset& dataset) {
  std::ostringstream body;
  body.write(kDatasetMagic, 4);
  binio::put<std::uint32_t>(body, kDatasetVersion);
  const std::string config = nlohmann::json(dataset.config).dump();
  binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(config.size()));
  binio::put_bytes(body, config);
  binio::put<std::uint64_t>(body, dataset.observations.size());
  for (const auto& o : dataset.observations) {
    binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(o.category));
    binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(o.cloud.size()));
    put_points(body, o.cloud.points.points);
    put_points(body, o.cloud.colors);
    put_points(body, o.gt_nocs.points);
    binio::put<double>(body, o.gt_pose.scale);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) binio::put<double>(body, o.gt_pose.rotation(r, c));
    }
    for (int k = 0; k < 3; ++k) binio::put<double>(body, o.gt_pose.translation(k));
    std::uint32_t flags = o.handle_visible ? kFlagHandleVisible : 0u;
    if (!o.model_index.empty()) flags |= kFlagModelIndex;
    binio::put<std::uint32_t>(body, flags);
    binio::put<std::uint64_t>(body, o.seed);
    for (std::size_t m : o.model_index) binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(m));
  }
  const std::string bytes = body.str();
  binio::put_bytes(out, bytes);
  binio::put<std::uint64_t>(out, binio::fnv1a(bytes));
  if (!out) throw Error(ErrorCode::IoError, "failed writing dataset");
}

Dataset read_dataset(std::istream& in, PriorLibrary* priors) {
  const std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (all.size() < 4 + 4 + 4 + 8 + 8) throw Error(ErrorCode::FormatError, "dataset file too short");
  if (all.compare(0, 4, kDatasetMagic, 4) != 0) throw Error(ErrorCode::FormatError, "bad dataset magic");
  const std::string bytes = all.substr(0, all.size() - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, all.data() + bytes.size(), 8);

  std::istringstream body(bytes);
  body.ignore(4);
  const auto version = binio::get<std::uint32_t>(body, "version");
  if (version != kDatasetVersion) {
    throw Error(ErrorCode::FormatError, "unsupported dataset version " + std::to_string(version));
  }

  // Structural parse first so truncation reports FormatError, then the checksum.
  Dataset ds;
  try {
    const auto config_len = binio::get<std::uint32_t>(body, "config length");
    if (config_len > bytes.size()) throw Error(ErrorCode::FormatError, "config length exceeds file size");
    ds.config = nlohmann::json::parse(binio::get_bytes(body, config_len, "config")).get<DatasetConfig>();
    const auto count = binio::get<std::uint64_t>(body, "observation count");
    for (std::uint64_t i = 0; i < count; ++i) {
      Observation o;
      o.category = category_from_id(binio::get<std::uint32_t>(body, "category"));
      const auto n = binio::get<std::uint32_t>(body, "point count");
      if (static_cast<std::size_t>(n) * 72 > bytes.size()) throw Error(ErrorCode::FormatError, "point count exceeds file size");
      o.cloud.points.points = get_points(body, n, "cloud");
      o.cloud.colors = get_points(body, n, "colors");
      o.gt_nocs.points = get_points(body, n, "gt_nocs");
      o.gt_pose.scale = binio::get<double>(body, "pose");
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) o.gt_pose.rotation(r, c) = binio::get<double>(body, "pose");
      }
      for (int k = 0; k < 3; ++k) o.gt_pose.translation(k) = binio::get<double>(body, "pose");
      const auto flags = binio::get<std::uint32_t>(body, "flags");
      o.handle_visible = (flags & kFlagHandleVisible) != 0;
      o.seed = binio::get<std::uint64_t>(body, "seed");
      if (flags & kFlagModelIndex) {
        for (std::uint32_t k = 0; k < n; ++k) o.model_index.push_back(binio::get<std::uint32_t>(body, "model index"));
      }
      ds.observations.push_back(std::move(o));
    }
    if (body.peek() != std::char_traits<char>::eof()) throw Error(ErrorCode::FormatError, "trailing bytes in dataset");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("dataset config: ") + e.what());
  }
  if (binio::fnv1a(bytes) != stored) throw Error(ErrorCode::ChecksumMismatch, "dataset checksum mismatch");

  PriorLibrary local(ds.config.prior_points);
  PriorLibrary& lib = priors && priors->prior_points() == ds.config.prior_points ? *priors : local;
  for (auto& o : ds.observations) o.instance = regenerate_instance(ds.config, lib, o.category, o.seed);
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  write_dataset(out, dataset);
}

Dataset load_dataset(const std::filesystem::path& path, PriorLibrary* priors) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return read_dataset(in, priors);
}

}  // namespace nf
