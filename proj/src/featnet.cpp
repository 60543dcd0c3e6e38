#include "nocsfit/featnet.hpp"

#include <cctype>
#include <cmath>

#include "nocsfit/error.hpp"

namespace nf {

std::string_view to_string(RelationKind kind) {
  switch (kind) {
    case RelationKind::None: return "none";
    case RelationKind::Mlp: return "mlp";
    case RelationKind::NonLocal: return "nonlocal";
    case RelationKind::Transformer: return "transformer";
  }
  return "none";
}

RelationKind relation_kind_from_string(std::string_view name) {
  std::string s;
  for (char c : name) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (s == "none" || s == "-") return RelationKind::None;
  if (s == "mlp" || s == "m") return RelationKind::Mlp;
  if (s == "nonlocal" || s == "non-local" || s == "n") return RelationKind::NonLocal;
  if (s == "transformer" || s == "t") return RelationKind::Transformer;
  throw Error(ErrorCode::ConfigError, "unknown relation kind '" + std::string(name) + "'");
}

Linear::Linear(ParameterSet& params, const std::string& id, std::size_t in, std::size_t out, WeightInit init,
               std::mt19937_64& rng)
    : in_(in), out_(out) {
  Tensor2 w(out, in);
  if (init == WeightInit::KaimingUniform) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : w.values()) v = dist(rng);
  }
  weight_ = &params.add(id + ".weight", std::move(w));
  bias_ = &params.add(id + ".bias", Tensor2(out, 1));
}

Var Linear::operator()(const Var& x) const {
  if (x.rows() != in_) {
    throw Error(ErrorCode::ShapeMismatch, weight_->id + ": expects " + std::to_string(in_) + " channels, got " +
                                              std::to_string(x.rows()));
  }
  Tape& t = x.tape();
  return ops::add_bias(ops::matmul(t.parameter(*weight_), x), t.parameter(*bias_));
}

PointMlp::PointMlp(ParameterSet& params, const std::string& prefix, const std::vector<std::size_t>& widths,
                   bool rectify_output, WeightInit last_init, std::mt19937_64& rng)
    : rectify_output_(rectify_output) {
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    layers_.emplace_back(params, prefix + ".fc" + std::to_string(i), widths[i], widths[i + 1],
                         last ? last_init : WeightInit::KaimingUniform, rng);
  }
}

Var PointMlp::operator()(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size() || rectify_output_) h = ops::relu(h);
  }
  return h;
}

namespace {

void require_same_channels(const char* what, const Var& a, const Var& b, std::size_t channels) {
  if (a.rows() != channels || b.rows() != channels) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": expects " + std::to_string(channels) +
                                              " channels, got " + std::to_string(a.rows()) + " and " +
                                              std::to_string(b.rows()));
  }
}

}  // namespace

TransformerRelation::TransformerRelation(ParameterSet& params, const std::string& prefix, std::size_t channels,
                                         std::mt19937_64& rng)
    : query_(params, prefix + ".query", channels, channels, WeightInit::KaimingUniform, rng),
      key_(params, prefix + ".key", channels, channels, WeightInit::KaimingUniform, rng),
      value_(params, prefix + ".value", channels, channels, WeightInit::KaimingUniform, rng),
      out_(params, prefix + ".out", channels, channels, WeightInit::Zero, rng),
      channels_(channels) {}

Var TransformerRelation::attention(const Var& a, const Var& b) const {
  require_same_channels("transformer relation", a, b, channels_);
  const Var logits = ops::matmul(ops::transpose(query_(a)), key_(b));  // Na x Nb
  return ops::softmax_rows(ops::scale(logits, 1.0 / std::sqrt(static_cast<double>(channels_))));
}

Var TransformerRelation::apply(const Var& a, const Var& b) const {
  const Var attn = attention(a, b);
  return out_(ops::matmul(value_(b), ops::transpose(attn)));
}

std::vector<Parameter*> TransformerRelation::output_projection() const { return {&out_.weight(), &out_.bias()}; }

NonLocalRelation::NonLocalRelation(ParameterSet& params, const std::string& prefix, std::size_t channels,
                                   std::mt19937_64& rng)
    : theta_(params, prefix + ".theta", channels, std::max<std::size_t>(1, channels / 2), WeightInit::KaimingUniform, rng),
      phi_(params, prefix + ".phi", channels, std::max<std::size_t>(1, channels / 2), WeightInit::KaimingUniform, rng),
      g_(params, prefix + ".g", channels, std::max<std::size_t>(1, channels / 2), WeightInit::KaimingUniform, rng),
      out_(params, prefix + ".out", std::max<std::size_t>(1, channels / 2), channels, WeightInit::Zero, rng),
      channels_(channels) {}

Var NonLocalRelation::attention(const Var& a, const Var& b) const {
  require_same_channels("non-local relation", a, b, channels_);
  return ops::softmax_rows(ops::matmul(ops::transpose(theta_(a)), phi_(b)));
}

Var NonLocalRelation::apply(const Var& a, const Var& b) const {
  const Var attn = attention(a, b);
  return out_(ops::matmul(g_(b), ops::transpose(attn)));
}

std::vector<Parameter*> NonLocalRelation::output_projection() const { return {&out_.weight(), &out_.bias()}; }

MlpRelation::MlpRelation(ParameterSet& params, const std::string& prefix, std::size_t channels, std::mt19937_64& rng)
    : hidden_(params, prefix + ".hidden", 2 * channels, channels, WeightInit::KaimingUniform, rng),
      out_(params, prefix + ".out", channels, channels, WeightInit::Zero, rng),
      channels_(channels) {}

Var MlpRelation::apply(const Var& a, const Var& b) const {
  require_same_channels("mlp relation", a, b, channels_);
  const Var context = ops::tile_cols(ops::max_pool_cols(b), a.cols());
  return out_(ops::relu(hidden_(ops::concat_rows(a, context))));
}

std::vector<Parameter*> MlpRelation::output_projection() const { return {&out_.weight(), &out_.bias()}; }

std::unique_ptr<Relation> make_relation(RelationKind kind, ParameterSet& params, const std::string& prefix,
                                        std::size_t channels, std::mt19937_64& rng) {
  switch (kind) {
    case RelationKind::None: return nullptr;
    case RelationKind::Mlp: return std::make_unique<MlpRelation>(params, prefix, channels, rng);
    case RelationKind::NonLocal: return std::make_unique<NonLocalRelation>(params, prefix, channels, rng);
    case RelationKind::Transformer: return std::make_unique<TransformerRelation>(params, prefix, channels, rng);
  }
  return nullptr;
}

FeatNet::FeatNet(const FeatNetConfig& config, ParameterSet& params, std::mt19937_64& rng) : config_(config) {
  const std::size_t h = config.hidden;
  texture_encoder_ = PointMlp(params, "featnet.texture", {6, h, h, config.texture_channels}, true,
                              WeightInit::KaimingUniform, rng);
  geometry_encoder_ = PointMlp(params, "featnet.geometry", {3, h, h, config.geometry_channels}, true,
                               WeightInit::KaimingUniform, rng);
  category_encoder_ = PointMlp(params, "featnet.category", {3, h, h, config.category_channels}, true,
                               WeightInit::KaimingUniform, rng);
  if (config.instance_relation != RelationKind::None && config.texture_channels != config.geometry_channels) {
    throw Error(ErrorCode::ConfigError, "instance relation needs equal texture and geometry channel counts");
  }
  instance_relation_ = make_relation(config.instance_relation, params, "featnet.irn", config.texture_channels, rng);
  if (config.instance_channels() != config.category_channels) {
    adapter_ = std::make_unique<Linear>(params, "featnet.adapter", config.instance_channels(),
                                        config.category_channels, WeightInit::KaimingUniform, rng);
  }
  category_relation_ = make_relation(config.category_relation, params, "featnet.crn", config.category_channels, rng);
}

Var FeatNet::encode_geometry(const Var& xyz) const { return geometry_encoder_(xyz); }
Var FeatNet::encode_texture(const Var& xyzrgb) const { return texture_encoder_(xyzrgb); }
Var FeatNet::encode_category(const Var& xyz) const { return category_encoder_(xyz); }

InstanceFeatures FeatNet::irn(const Var& texture, const Var& geometry) const {
  if (texture.cols() != geometry.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "irn: texture has " + std::to_string(texture.cols()) +
                                              " points, geometry has " + std::to_string(geometry.cols()));
  }
  InstanceFeatures out{texture, geometry, {}};
  if (instance_relation_) {
    out.texture = ops::add(texture, instance_relation_->apply(texture, geometry));
    out.geometry = ops::add(geometry, instance_relation_->apply(geometry, texture));
  }
  out.instance = ops::concat_rows(out.texture, out.geometry);
  return out;
}

CategoryFeatures FeatNet::crn(const Var& instance, const Var& category) const {
  Var fi = instance;
  if (adapter_ && instance.rows() == adapter_->in_features()) fi = (*adapter_)(instance);
  if (fi.rows() != category.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "crn: instance has " + std::to_string(fi.rows()) +
                                              " channels, category has " + std::to_string(category.rows()));
  }
  CategoryFeatures out{fi, category};
  if (category_relation_) {
    out.instance = ops::add(fi, category_relation_->apply(fi, category));
    out.category = ops::add(category, category_relation_->apply(category, fi));
  }
  return out;
}

Tensor2 coordinates_by_column(const PointCloud& cloud) {
  Tensor2 t(3, cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) t(c, i) = cloud[i](static_cast<Eigen::Index>(c));
  }
  return t;
}

Tensor2 coordinates_and_colors_by_column(const PointCloud& cloud, const std::vector<Vec3>& colors) {
  if (colors.size() != cloud.size()) throw Error(ErrorCode::LengthMismatch, "one color per point required");
  Tensor2 t(6, cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      t(c, i) = cloud[i](static_cast<Eigen::Index>(c));
      t(c + 3, i) = colors[i](static_cast<Eigen::Index>(c));
    }
  }
  return t;
}

}  // namespace nf
