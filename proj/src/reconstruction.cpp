#include "nocsfit/reconstruction.hpp"

#include <cmath>

#include "nocsfit/error.hpp"

namespace nf {

ReconstructionHeads::ReconstructionHeads(const HeadConfig& config, std::size_t instance_channels,
                                         std::size_t category_channels, ParameterSet& params, std::mt19937_64& rng)
    : channels_(category_channels),
      deformation_mlp_(params, "recon.deform", {category_channels + instance_channels, config.hidden, config.hidden, 3},
                       false, WeightInit::Zero, rng),
      corr_query_(params, "recon.corr.query", instance_channels, category_channels, WeightInit::KaimingUniform, rng),
      corr_key_(params, "recon.corr.key", category_channels, category_channels, WeightInit::KaimingUniform, rng),
      residual_query_(params, "recon.residual.query", category_channels, category_channels, WeightInit::KaimingUniform,
                      rng),
      residual_key_(params, "recon.residual.key", category_channels, category_channels, WeightInit::KaimingUniform,
                    rng),
      residual_deformation_mlp_(params, "recon.residual.deform",
                                {category_channels + instance_channels, config.hidden, config.hidden, 3}, false,
                                WeightInit::Zero, rng) {
  residual_diagonal_ = &params.add("recon.residual.diagonal", Tensor2(1, 1, config.residual_diagonal_logit));
}

namespace {

Var per_prior_point(const PointMlp& mlp, const Var& category, const Var& instance) {
  const Var global = ops::tile_cols(ops::mean_pool_cols(instance), category.cols());
  return ops::transpose(mlp(ops::concat_rows(category, global)));
}

}  // namespace

Var ReconstructionHeads::deformation(const Var& category, const Var& instance) const {
  return per_prior_point(deformation_mlp_, category, instance);
}

Var ReconstructionHeads::residual_deformation(const Var& category, const Var& instance) const {
  return per_prior_point(residual_deformation_mlp_, category, instance);
}

Var ReconstructionHeads::correspondence(const Var& instance, const Var& category) const {
  const Var logits = ops::matmul(ops::transpose(corr_query_(instance)), corr_key_(category));
  return ops::softmax_rows(ops::scale(logits, 1.0 / std::sqrt(static_cast<double>(channels_))));
}

Var ReconstructionHeads::residual_correspondence(const Var& current, const Var& previous) const {
  if (current.cols() != previous.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "residual correspondence: " + std::to_string(current.cols()) + " vs " +
                                              std::to_string(previous.cols()) + " prior points");
  }
  Var logits = ops::matmul(ops::transpose(residual_query_(current)), residual_key_(previous));
  logits = ops::scale(logits, 1.0 / std::sqrt(static_cast<double>(channels_)));
  logits = ops::add_scaled_identity(logits, current.tape().parameter(*residual_diagonal_));
  return ops::softmax_rows(logits);
}

RecurrentModel::RecurrentModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config),
      rng_(seed),
      features_(config.features, params_, rng_),
      heads_(config.heads, config.features.category_channels, config.features.category_channels, params_, rng_) {}

NormalizedInput normalize_observation(const ColoredPointCloud& cloud) {
  if (cloud.points.empty()) throw Error(ErrorCode::EmptyCloud, "observation has no points");
  const Vec3 c = cloud.points.centroid();
  double ss = 0.0;
  for (const auto& p : cloud.points.points) ss += (p - c).squaredNorm();
  const double rms = std::sqrt(ss / static_cast<double>(cloud.size()));
  const double inv = rms > 0.0 ? 1.0 / rms : 1.0;
  PointCloud local;
  local.points.reserve(cloud.size());
  for (const auto& p : cloud.points.points) local.points.push_back((p - c) * inv);
  return {coordinates_by_column(local), coordinates_and_colors_by_column(local, cloud.colors)};
}

RecurrentOutput recurrent_reconstruct(const RecurrentModel& model, Tape& tape, const ColoredPointCloud& observation,
                                      const PointCloud& prior, const RecurrentOptions& options) {
  if (prior.empty()) throw Error(ErrorCode::EmptyCloud, "category prior has no points");
  const FeatNet& net = model.features();
  const ReconstructionHeads& heads = model.heads();

  const NormalizedInput input = normalize_observation(observation);
  const Var texture = net.encode_texture(tape.constant(input.texture));
  const Var geometry = net.encode_geometry(tape.constant(input.geometry));
  const InstanceFeatures inst = net.irn(texture, geometry);

  const Var prior_rows = tape.constant(rows_from_cloud(prior));
  const auto finish = [&](const Var& d, const Var& m) {
    const Var v = ops::add(prior_rows, d);
    return StepOutput{d, m, v, ops::matmul(m, v)};
  };

  CategoryFeatures rel = net.crn(inst.instance, net.encode_category(ops::transpose(prior_rows)));
  RecurrentOutput out;
  out.steps.push_back(finish(heads.deformation(rel.category, rel.instance), heads.correspondence(rel.instance, rel.category)));

  const std::size_t n_c = prior.size();
  for (std::size_t k = 1; k <= options.steps; ++k) {
    const StepOutput& prev = out.steps.back();
    const CategoryFeatures next = net.crn(inst.instance, net.encode_category(ops::transpose(prev.model)));
    Var d_res, m_res;
    if (options.identity_residuals) {
      d_res = tape.constant(Tensor2(n_c, 3));
      m_res = tape.constant(Tensor2::identity(n_c));
    } else {
      d_res = heads.residual_deformation(next.category, next.instance);
      m_res = heads.residual_correspondence(next.category, rel.category);
    }
    out.steps.push_back(finish(ops::add(prev.deformation, d_res), ops::matmul(prev.correspondence, m_res)));
    rel = next;
  }
  return out;
}

PointCloud reconstruct_model(const PointCloud& prior, const Tensor2& deformation) {
  if (deformation.rows() != prior.size() || deformation.cols() != 3) {
    throw Error(ErrorCode::ShapeMismatch, "deformation is " + std::to_string(deformation.rows()) + "x" +
                                              std::to_string(deformation.cols()) + " for " +
                                              std::to_string(prior.size()) + " prior points");
  }
  PointCloud out = prior;
  for (std::size_t i = 0; i < prior.size(); ++i) {
    out[i] += Vec3(deformation(i, 0), deformation(i, 1), deformation(i, 2));
  }
  return out;
}

Tensor2 predicted_nocs_coords(const Tensor2& correspondence, const PointCloud& model) {
  if (correspondence.cols() != model.size()) {
    throw Error(ErrorCode::ShapeMismatch, "correspondence has " + std::to_string(correspondence.cols()) +
                                              " columns for a model of " + std::to_string(model.size()) + " points");
  }
  const Tensor2 v = rows_from_cloud(model);
  Tensor2 x(correspondence.rows(), 3);
  x.map().noalias() = correspondence.map() * v.map();
  return x;
}

PointCloud cloud_from_rows(const Tensor2& rows) {
  if (rows.cols() != 3) throw Error(ErrorCode::ShapeMismatch, "expected N x 3 coordinates");
  PointCloud out;
  out.points.reserve(rows.rows());
  for (std::size_t i = 0; i < rows.rows(); ++i) out.points.emplace_back(rows(i, 0), rows(i, 1), rows(i, 2));
  return out;
}

Tensor2 rows_from_cloud(const PointCloud& cloud) {
  Tensor2 t(cloud.size(), 3);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    t(i, 0) = cloud[i].x();
    t(i, 1) = cloud[i].y();
    t(i, 2) = cloud[i].z();
  }
  return t;
}

Var loss_reconstruction(const Var& model, const PointCloud& target) {
  if (model.rows() == 0 || target.empty()) throw Error(ErrorCode::EmptyCloud, "loss_reconstruction on an empty cloud");
  const PointCloud pred = cloud_from_rows(model.value());
  auto to_target = nearest_neighbor_indices(pred, target);
  auto to_pred = nearest_neighbor_indices(target, pred);

  double value = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) value += (pred[i] - target[to_target[i]]).squaredNorm();
  for (std::size_t j = 0; j < target.size(); ++j) value += (target[j] - pred[to_pred[j]]).squaredNorm();

  return model.tape().record(
      Tensor2(1, 1, value), {model},
      [model, target, to_target = std::move(to_target), to_pred = std::move(to_pred)](Tape& tp, const Tensor2&,
                                                                                        const Tensor2& g) {
        const Tensor2& p = model.value();
        Tensor2& gp = tp.grad_buffer(model);
        const double s = 2.0 * g(0, 0);
        for (std::size_t i = 0; i < to_target.size(); ++i) {
          const Vec3& t = target[to_target[i]];
          for (int c = 0; c < 3; ++c) gp(i, c) += s * (p(i, c) - t(c));
        }
        for (std::size_t j = 0; j < to_pred.size(); ++j) {
          const std::size_t i = to_pred[j];
          for (int c = 0; c < 3; ++c) gp(i, c) += s * (p(i, c) - target[j](c));
        }
      });
}

Var loss_deformation_reg(const Var& deformation) {
  const Tensor2& d = deformation.value();
  if (d.cols() != 3 || d.rows() == 0) throw Error(ErrorCode::ShapeMismatch, "deformation must be N x 3");
  const double n = static_cast<double>(d.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < d.rows(); ++i) total += std::sqrt(d(i, 0) * d(i, 0) + d(i, 1) * d(i, 1) + d(i, 2) * d(i, 2));
  return deformation.tape().record(Tensor2(1, 1, total / n), {deformation}, [deformation, n](Tape& tp, const Tensor2&,
                                                                                             const Tensor2& g) {
    const Tensor2& d = deformation.value();
    Tensor2& gd = tp.grad_buffer(deformation);
    for (std::size_t i = 0; i < d.rows(); ++i) {
      const double norm = std::sqrt(d(i, 0) * d(i, 0) + d(i, 1) * d(i, 1) + d(i, 2) * d(i, 2));
      if (norm == 0.0) continue;  // subgradient 0 at the kink
      for (std::size_t c = 0; c < 3; ++c) gd(i, c) += g(0, 0) * d(i, c) / (n * norm);
    }
  });
}

double soft_l1(double e) {
  const double a = std::abs(e);
  return a <= 0.1 ? 5.0 * e * e : a - 0.05;
}

Var loss_correspondence(const Var& coords, const Tensor2& target) {
  if (!coords.value().same_shape(target) || target.size() == 0) {
    throw Error(ErrorCode::ShapeMismatch, "loss_correspondence: " + std::to_string(coords.rows()) + "x" +
                                              std::to_string(coords.cols()) + " vs " + std::to_string(target.rows()) +
                                              "x" + std::to_string(target.cols()));
  }
  const Tensor2& x = coords.value();
  const double n = static_cast<double>(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += soft_l1(x[i] - target[i]);
  return coords.tape().record(Tensor2(1, 1, total / n), {coords}, [coords, target, n](Tape& tp, const Tensor2&,
                                                                                      const Tensor2& g) {
    const Tensor2& x = coords.value();
    Tensor2& gx = tp.grad_buffer(coords);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = x[i] - target[i];
      const double de = std::abs(e) <= 0.1 ? 10.0 * e : (e > 0.0 ? 1.0 : -1.0);
      gx[i] += g(0, 0) * de / n;
    }
  });
}

Var loss_corr_reg(const Var& correspondence) {
  const Tensor2& m = correspondence.value();
  if (m.rows() == 0) throw Error(ErrorCode::ShapeMismatch, "loss_corr_reg on an empty matrix");
  const double rows = static_cast<double>(m.rows());
  double total = 0.0;
  for (double v : m.values()) {
    const double c = std::max(v, kEntropyClamp);
    total -= c * std::log(c);
  }
  return correspondence.tape().record(Tensor2(1, 1, total / rows), {correspondence},
                                      [correspondence, rows](Tape& tp, const Tensor2&, const Tensor2& g) {
                                        const Tensor2& m = correspondence.value();
                                        Tensor2& gm = tp.grad_buffer(correspondence);
                                        for (std::size_t i = 0; i < m.size(); ++i) {
                                          if (m[i] > kEntropyClamp) gm[i] -= g(0, 0) * (std::log(m[i]) + 1.0) / rows;
                                        }
                                      });
}

namespace {

struct StepTerms {
  Var reconstruction, deformation, correspondence, sparsity;
};

StepTerms step_terms(const StepOutput& step, const LossTargets& targets) {
  return {loss_reconstruction(step.model, targets.model), loss_deformation_reg(step.deformation),
          loss_correspondence(step.coordinates, targets.nocs), loss_corr_reg(step.correspondence)};
}

Var combine(const StepTerms& t, const LossWeights& w) {
  Var total = ops::scale(t.reconstruction, w.reconstruction);
  total = ops::add(total, ops::scale(t.deformation, w.deformation));
  total = ops::add(total, ops::scale(t.correspondence, w.correspondence));
  return ops::add(total, ops::scale(t.sparsity, w.sparsity));
}

}  // namespace

Var step_loss(const StepOutput& step, const LossTargets& targets, const LossWeights& weights) {
  return combine(step_terms(step, targets), weights);
}

LossBreakdown loss_overall(const RecurrentOutput& out, const LossTargets& targets, std::span<const double> lambda,
                           const LossWeights& weights) {
  if (lambda.size() != out.steps.size()) {
    throw Error(ErrorCode::LengthMismatch, "lambda has " + std::to_string(lambda.size()) + " weights for " +
                                               std::to_string(out.steps.size()) + " steps");
  }
  if (out.steps.empty()) throw Error(ErrorCode::LengthMismatch, "no recurrent steps to supervise");
  LossBreakdown b;
  for (std::size_t k = 0; k < out.steps.size(); ++k) {
    if (lambda[k] < 0.0) throw Error(ErrorCode::ConfigError, "lambda weights must be nonnegative");
    const StepTerms t = step_terms(out.steps[k], targets);
    const Var weighted = ops::scale(combine(t, weights), lambda[k]);
    b.total = k == 0 ? weighted : ops::add(b.total, weighted);
    b.reconstruction += lambda[k] * t.reconstruction.scalar();
    b.deformation += lambda[k] * t.deformation.scalar();
    b.correspondence += lambda[k] * t.correspondence.scalar();
    b.sparsity += lambda[k] * t.sparsity.scalar();
  }
  return b;
}

}  // namespace nf
