#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "nocsfit/diffcore/ops.hpp"
#include "nocsfit/geometry.hpp"

namespace nf {

enum class RelationKind { None, Mlp, NonLocal, Transformer };

std::string_view to_string(RelationKind kind);
RelationKind relation_kind_from_string(std::string_view name);  // "none"/"-", "mlp"/"M", "nonlocal"/"N", "transformer"/"T"

enum class WeightInit { KaimingUniform, Zero };

// y = W x + b applied to every column of x.
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& id, std::size_t in, std::size_t out, WeightInit init,
         std::mt19937_64& rng);

  Var operator()(const Var& x) const;
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Parameter& weight() const { return *weight_; }
  Parameter& bias() const { return *bias_; }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  std::size_t in_ = 0, out_ = 0;
};

// Shared per-point MLP over feature columns; ReLU after every hidden layer and,
// when rectify_output is set, after the last one too.
class PointMlp {
 public:
  PointMlp() = default;
  PointMlp(ParameterSet& params, const std::string& prefix, const std::vector<std::size_t>& widths,
           bool rectify_output, WeightInit last_init, std::mt19937_64& rng);

  Var operator()(const Var& x) const;
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
  bool rectify_output_ = true;
};

// G(A, B): message into the columns of A aggregated from the columns of B.
// Output keeps the shape of A. The last projection starts at zero.
class Relation {
 public:
  virtual ~Relation() = default;
  virtual RelationKind kind() const = 0;
  virtual Var apply(const Var& a, const Var& b) const = 0;
  // Na x Nb attention weights for pairwise kinds; invalid Var for Mlp.
  virtual Var attention(const Var& a, const Var& b) const = 0;
  virtual std::vector<Parameter*> output_projection() const = 0;
};

std::unique_ptr<Relation> make_relation(RelationKind kind, ParameterSet& params, const std::string& prefix,
                                        std::size_t channels, std::mt19937_64& rng);

// Single-head scaled dot-product cross attention, no positional encoding.
class TransformerRelation final : public Relation {
 public:
  TransformerRelation(ParameterSet& params, const std::string& prefix, std::size_t channels, std::mt19937_64& rng);
  RelationKind kind() const override { return RelationKind::Transformer; }
  Var apply(const Var& a, const Var& b) const override;
  Var attention(const Var& a, const Var& b) const override;
  std::vector<Parameter*> output_projection() const override;

 private:
  Linear query_, key_, value_, out_;
  std::size_t channels_;
};

// Embedded-Gaussian non-local block with a C/2 embedding.
class NonLocalRelation final : public Relation {
 public:
  NonLocalRelation(ParameterSet& params, const std::string& prefix, std::size_t channels, std::mt19937_64& rng);
  RelationKind kind() const override { return RelationKind::NonLocal; }
  Var apply(const Var& a, const Var& b) const override;
  Var attention(const Var& a, const Var& b) const override;
  std::vector<Parameter*> output_projection() const override;

 private:
  Linear theta_, phi_, g_, out_;
  std::size_t channels_;
};

// Each column of A joined with the max-pooled global of B through a two-layer MLP.
class MlpRelation final : public Relation {
 public:
  MlpRelation(ParameterSet& params, const std::string& prefix, std::size_t channels, std::mt19937_64& rng);
  RelationKind kind() const override { return RelationKind::Mlp; }
  Var apply(const Var& a, const Var& b) const override;
  Var attention(const Var&, const Var&) const override { return {}; }
  std::vector<Parameter*> output_projection() const override;

 private:
  Linear hidden_, out_;
  std::size_t channels_;
};

struct FeatNetConfig {
  std::size_t texture_channels = 64;
  std::size_t geometry_channels = 64;
  std::size_t category_channels = 64;
  std::size_t hidden = 64;
  RelationKind instance_relation = RelationKind::Transformer;
  RelationKind category_relation = RelationKind::Transformer;

  std::size_t instance_channels() const { return texture_channels + geometry_channels; }
};

struct InstanceFeatures {
  Var texture;   // F̂_t, C_t x N_p
  Var geometry;  // F̂_g, C_g x N_p
  Var instance;  // F_I, (C_t + C_g) x N_p
};

struct CategoryFeatures {
  Var instance;  // F̂_I, C_c x N_p
  Var category;  // F̂_c, C_c x N_c
};

// Encoders plus the instance (texture <-> geometry) and category (instance <-> prior)
// relation stages. Parameters are registered under "featnet.".
class FeatNet {
 public:
  FeatNet(const FeatNetConfig& config, ParameterSet& params, std::mt19937_64& rng);

  // Inputs are channel-major: 3 x N coordinates, or 6 x N coordinates+colors.
  Var encode_geometry(const Var& xyz) const;
  Var encode_texture(const Var& xyzrgb) const;
  Var encode_category(const Var& xyz) const;

  InstanceFeatures irn(const Var& texture, const Var& geometry) const;
  // F_I passes through the C_I -> C_c adapter first when the widths differ.
  CategoryFeatures crn(const Var& instance, const Var& category) const;

  const FeatNetConfig& config() const { return config_; }
  const Relation* instance_relation() const { return instance_relation_.get(); }
  const Relation* category_relation() const { return category_relation_.get(); }

 private:
  FeatNetConfig config_;
  PointMlp texture_encoder_;
  PointMlp geometry_encoder_;
  PointMlp category_encoder_;
  std::unique_ptr<Relation> instance_relation_;
  std::unique_ptr<Relation> category_relation_;
  std::unique_ptr<Linear> adapter_;
};

// 3 x N (or 6 x N with colors) channel-major tensors from clouds.
Tensor2 coordinates_by_column(const PointCloud& cloud);
Tensor2 coordinates_and_colors_by_column(const PointCloud& cloud, const std::vector<Vec3>& colors);

}  // namespace nf
