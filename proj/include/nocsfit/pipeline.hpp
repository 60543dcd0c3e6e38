#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nocsfit/diffcore/adam.hpp"
#include "nocsfit/diffcore/gradcheck.hpp"
#include "nocsfit/evalmetrics.hpp"
#include "nocsfit/reconstruction.hpp"
#include "nocsfit/synthdata.hpp"

namespace nf {

struct SplitConfig {
  std::size_t count = 16;
  std::uint64_t seed = 0;
};

struct OptimizerConfig {
  AdamOptions adam;
  std::size_t decay_every = 10;  // epochs between lr decays
  double decay_factor = 0.1;
  std::size_t accumulate = 1;  // instances per optimizer step
};

struct ExperimentConfig {
  DatasetConfig dataset;  // shared generation parameters; count and seed come from the splits
  SplitConfig train{200, 1};
  SplitConfig validation{20, 2};
  SplitConfig test{50, 3};

  ModelConfig model;
  std::size_t steps = 0;       // K
  std::vector<double> lambda;  // K + 1 step weights; empty means all ones
  LossWeights loss;
  OptimizerConfig optimizer;
  std::size_t epochs = 30;

  std::uint64_t model_seed = 0;
  std::uint64_t shuffle_seed = 0;
  RansacOptions ransac;  // seed is per observation, split from ransac.seed

  // Throws ConfigError on non-positive counts or a λ length other than K + 1.
  void validate() const;
  std::vector<double> step_weights() const;
  DatasetConfig split(const SplitConfig& s) const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct LossLog {
  double reconstruction = 0.0;
  double deformation = 0.0;
  double correspondence = 0.0;
  double sparsity = 0.0;
  double total = 0.0;
};

struct EpochLog {
  std::size_t epoch = 0;  // 0 is the untrained model, no optimization
  double lr = 0.0;
  LossLog train;       // mean over training instances
  LossLog validation;  // mean over validation instances
  double validation_cd = 0.0;  // mean last-step Chamfer distance
};

nlohmann::json to_json(const EpochLog& e);
void from_json(const nlohmann::json& j, EpochLog& e);
// Component keys present in every logged loss record.
const std::vector<std::string>& loss_log_keys();

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_validation_cd = 0.0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint;  // best-validation weights, NFW1
  std::function<void(const EpochLog&)> on_epoch;
};

// Per-instance Adam training on Σ_k λ_k L_k. Leaves the best-validation weights in the model.
TrainResult train(const ExperimentConfig& config, RecurrentModel& model, const std::vector<Observation>& train_set,
                  const std::vector<Observation>& validation_set, PriorLibrary& priors, const TrainOptions& options = {});

// Mean losses and last-step Chamfer distance without updating weights.
LossLog evaluate_losses(const ExperimentConfig& config, const RecurrentModel& model,
                        const std::vector<Observation>& set, PriorLibrary& priors, double* mean_cd = nullptr);

struct PoseEstimate {
  SimilarityTransform transform;
  PointCloud model;    // V_c + D̂
  Tensor2 coordinates;  // x = M̂ V_nocs, N_p x 3
  std::size_t inlier_count = 0;
};

// Pose from a deformation and a correspondence matrix: x = M (V_c + D), then RANSAC + Umeyama
// onto the observed points. Throws NoConsensus or DegenerateConfiguration.
PoseEstimate pose_from_reconstruction(const Tensor2& deformation, const Tensor2& correspondence,
                                      const PointCloud& prior, const PointCloud& observed, const RansacOptions& ransac);

PoseEstimate estimate_pose(const RecurrentModel& model, const Observation& obs, const PointCloud& prior,
                           std::size_t steps, const RansacOptions& ransac);

// Test harness: ground-truth deformation and one-hot correspondences from the rendered model indices.
struct OracleInputs {
  Tensor2 deformation;
  Tensor2 correspondence;
};
OracleInputs oracle_inputs(const Observation& obs);
PoseEstimate estimate_pose_oracle(const Observation& obs, const PointCloud& prior, const RansacOptions& ransac);

struct EvaluationResult {
  std::vector<MetricTable> tables;  // one per step k = 0..K
  std::vector<std::vector<PoseErrorRecord>> records;
};

struct EvaluateOptions {
  bool oracle = false;  // ground-truth deformation and correspondences in place of the model
};

// Runs the recurrent model once at K and scores every intermediate step. A failed
// pose estimate is recorded as incorrect.
EvaluationResult evaluate(const ExperimentConfig& config, const RecurrentModel* model,
                          const std::vector<Observation>& test_set, PriorLibrary& priors,
                          const EvaluateOptions& options = {});

PoseErrorRecord score_estimate(const PoseEstimate& estimate, const Observation& obs, std::size_t index);

nlohmann::ordered_json to_json(const EvaluationResult& result);
std::string metrics_document(const EvaluationResult& result);  // deterministic dump

// Figure data: loss curves, K-sweep bars and per-category Chamfer distance. The sweep
// writers read the metrics document produced by to_json(EvaluationResult).
void write_loss_curve_csv(std::ostream& out, const std::vector<EpochLog>& log);
void write_k_sweep_csv(std::ostream& out, const nlohmann::json& metrics);
void write_category_cd_csv(std::ostream& out, const nlohmann::json& metrics);

// Finite-difference sweep over every parameter of a model built from `config`, on a random
// `points`-point observation and prior, through K recurrent steps and all four loss terms.
// Zero-initialized projections are first randomized so that every path carries gradient.
GradCheckReport gradient_sweep(const ModelConfig& config, std::size_t points, std::size_t steps,
                               const GradCheckOptions& options, std::uint64_t seed);

struct ExperimentRun {
  TrainResult training;
  EvaluationResult evaluation;
};

// Generates the splits, trains a fresh model from config.model_seed and evaluates it.
ExperimentRun run_experiment(const ExperimentConfig& config, const TrainOptions& options = {});

}  // namespace nf
