#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "nocsfit/featnet.hpp"

namespace nf {

struct HeadConfig {
  std::size_t hidden = 64;
  // Initial diagonal logit of the residual correspondence; large values start M̄ near identity.
  double residual_diagonal_logit = 10.0;
};

// Deformation, correspondence and residual-correspondence heads, registered under "recon.".
class ReconstructionHeads {
 public:
  ReconstructionHeads(const HeadConfig& config, std::size_t instance_channels, std::size_t category_channels,
                      ParameterSet& params, std::mt19937_64& rng);

  // N_c x 3 offsets from [F̂_c column | mean-pooled F̂_I].
  Var deformation(const Var& category, const Var& instance) const;
  // N_p x N_c row-stochastic matrix.
  Var correspondence(const Var& instance, const Var& category) const;
  // N_c x N_c row-stochastic redistribution between consecutive category features.
  Var residual_correspondence(const Var& current, const Var& previous) const;
  // Same form as deformation(), own weights, used for D̄ at every recurrent step.
  Var residual_deformation(const Var& category, const Var& instance) const;

  Parameter& residual_diagonal() const { return *residual_diagonal_; }
  const PointMlp& deformation_mlp() const { return deformation_mlp_; }

 private:
  std::size_t channels_;
  PointMlp deformation_mlp_;
  Linear corr_query_, corr_key_;
  Linear residual_query_, residual_key_;
  PointMlp residual_deformation_mlp_;
  Parameter* residual_diagonal_ = nullptr;
};

struct ModelConfig {
  FeatNetConfig features;
  HeadConfig heads;
};

// FeatNet plus heads over one parameter set.
class RecurrentModel {
 public:
  RecurrentModel(const ModelConfig& config, std::uint64_t seed);
  RecurrentModel(const RecurrentModel&) = delete;
  RecurrentModel& operator=(const RecurrentModel&) = delete;

  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const FeatNet& features() const { return features_; }
  const ReconstructionHeads& heads() const { return heads_; }
  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
  ParameterSet params_;
  std::mt19937_64 rng_;
  FeatNet features_;
  ReconstructionHeads heads_;
};

struct StepOutput {
  Var deformation;     // D^k, N_c x 3
  Var correspondence;  // M^k, N_p x N_c
  Var model;           // V_c + D^k, N_c x 3
  Var coordinates;     // M^k (V_c + D^k), N_p x 3
};

struct RecurrentOutput {
  std::vector<StepOutput> steps;  // K + 1 entries
};

struct RecurrentOptions {
  std::size_t steps = 0;  // K
  // Test harness: replace every residual with its identity element (D̄ = 0, M̄ = I).
  bool identity_residuals = false;
};

// Observation preprocessing: centered on the centroid and divided by the RMS radius.
struct NormalizedInput {
  Tensor2 geometry;  // 3 x N_p
  Tensor2 texture;   // 6 x N_p
};
NormalizedInput normalize_observation(const ColoredPointCloud& cloud);

RecurrentOutput recurrent_reconstruct(const RecurrentModel& model, Tape& tape, const ColoredPointCloud& observation,
                                      const PointCloud& prior, const RecurrentOptions& options);

// Pointwise V_c + D; D is N_c x 3.
PointCloud reconstruct_model(const PointCloud& prior, const Tensor2& deformation);
// x = M · V_nocs.
Tensor2 predicted_nocs_coords(const Tensor2& correspondence, const PointCloud& model);

PointCloud cloud_from_rows(const Tensor2& rows);  // N x 3 -> cloud
Tensor2 rows_from_cloud(const PointCloud& cloud);  // cloud -> N x 3

// Loss terms. All return 1x1 nodes.
Var loss_reconstruction(const Var& model, const PointCloud& target);  // two-sided Chamfer sum
Var loss_deformation_reg(const Var& deformation);                      // mean row norm
Var loss_correspondence(const Var& coords, const Tensor2& target);     // soft L1, mean over elements
Var loss_corr_reg(const Var& correspondence);                          // mean row entropy

inline constexpr double kEntropyClamp = 1e-12;
double soft_l1(double e);

struct LossWeights {
  double reconstruction = 1.0;
  double deformation = 1.0;
  double correspondence = 1.0;
  double sparsity = 1e-4;
};

struct LossTargets {
  PointCloud model;   // R_gt
  Tensor2 nocs;       // x_gt, N_p x 3
};

struct LossBreakdown {
  Var total;
  // Per-component values summed over steps, each weighted by its λ_k.
  double reconstruction = 0.0;
  double deformation = 0.0;
  double correspondence = 0.0;
  double sparsity = 0.0;
};

// Composite for one step: w_r L_r + w_def L_def + w_o L_o + w_reg L_reg.
Var step_loss(const StepOutput& step, const LossTargets& targets, const LossWeights& weights);
// Σ_k λ_k · step_loss(k). Throws LengthMismatch unless λ has one entry per step.
LossBreakdown loss_overall(const RecurrentOutput& out, const LossTargets& targets, std::span<const double> lambda,
                           const LossWeights& weights);

}  // namespace nf
