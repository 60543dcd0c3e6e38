#include "nocsfit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>

#include "nocsfit/diffcore/weights_io.hpp"
#include "nocsfit/error.hpp"

namespace nf {

void ExperimentConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::ConfigError, what);
  };
  require(!dataset.categories.empty(), "at least one category is required");
  require(dataset.prior_points >= 32, "prior_points must be at least 32");
  require(dataset.render.points > 0, "points must be positive");
  require(train.count > 0 && validation.count > 0 && test.count > 0, "split counts must be positive");
  const auto& f = model.features;
  require(f.texture_channels > 0 && f.geometry_channels > 0 && f.category_channels > 0 && f.hidden > 0 &&
              model.heads.hidden > 0,
          "channel sizes must be positive");
  require(epochs > 0, "epochs must be positive");
  require(optimizer.accumulate > 0, "accumulate must be positive");
  require(optimizer.decay_every > 0, "decay_every must be positive");
  require(optimizer.adam.lr > 0.0, "learning rate must be positive");
  require(ransac.iterations > 0 && ransac.inlier_threshold > 0.0, "ransac settings must be positive");
  require(lambda.empty() || lambda.size() == steps + 1,
          "lambda needs K + 1 = " + std::to_string(steps + 1) + " entries, got " + std::to_string(lambda.size()));
  for (double l : lambda) require(l >= 0.0, "lambda weights must be nonnegative");
}

std::vector<double> ExperimentConfig::step_weights() const {
  return lambda.empty() ? std::vector<double>(steps + 1, 1.0) : lambda;
}

DatasetConfig ExperimentConfig::split(const SplitConfig& s) const {
  DatasetConfig d = dataset;
  d.count = s.count;
  d.seed = s.seed;
  return d;
}

namespace {

nlohmann::json split_json(const SplitConfig& s) { return {{"count", s.count}, {"seed", s.seed}}; }

SplitConfig split_from_json(const nlohmann::json& j) { return {j.at("count").get<std::size_t>(), j.at("seed").get<std::uint64_t>()}; }

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json dataset = c.dataset;
  dataset.erase("count");
  dataset.erase("seed");
  const auto& f = c.model.features;
  const auto& a = c.optimizer.adam;
  j = nlohmann::json{
      {"dataset", dataset},
      {"splits", {{"train", split_json(c.train)}, {"validation", split_json(c.validation)}, {"test", split_json(c.test)}}},
      {"model",
       {{"texture_channels", f.texture_channels},
        {"geometry_channels", f.geometry_channels},
        {"category_channels", f.category_channels},
        {"hidden", f.hidden},
        {"instance_relation", std::string(to_string(f.instance_relation))},
        {"category_relation", std::string(to_string(f.category_relation))},
        {"head_hidden", c.model.heads.hidden},
        {"residual_diagonal_logit", c.model.heads.residual_diagonal_logit}}},
      {"recurrent_steps", c.steps},
      {"lambda", c.step_weights()},
      {"loss_weights",
       {{"reconstruction", c.loss.reconstruction},
        {"deformation", c.loss.deformation},
        {"correspondence", c.loss.correspondence},
        {"sparsity", c.loss.sparsity}}},
      {"optimizer",
       {{"lr", a.lr},
        {"beta1", a.beta1},
        {"beta2", a.beta2},
        {"eps", a.eps},
        {"weight_decay", a.weight_decay},
        {"decay_every", c.optimizer.decay_every},
        {"decay_factor", c.optimizer.decay_factor},
        {"accumulate", c.optimizer.accumulate}}},
      {"epochs", c.epochs},
      {"ransac", {{"iterations", c.ransac.iterations}, {"inlier_threshold", c.ransac.inlier_threshold}}},
      {"seeds", {{"model", c.model_seed}, {"shuffle", c.shuffle_seed}, {"ransac", c.ransac.seed}}},
  };
}

void from_json(const nlohmann::json& j, ExperimentConfig& out) {
  try {
    ExperimentConfig c;
    nlohmann::json dataset = j.contains("dataset") ? j.at("dataset") : nlohmann::json::object();
    dataset["seed"] = 0;
    dataset["count"] = 1;
    c.dataset = dataset.get<DatasetConfig>();
    const auto& splits = j.at("splits");
    c.train = split_from_json(splits.at("train"));
    c.validation = split_from_json(splits.at("validation"));
    c.test = split_from_json(splits.at("test"));
    if (j.contains("model")) {
      const auto& m = j.at("model");
      auto& f = c.model.features;
      f.texture_channels = m.value("texture_channels", f.texture_channels);
      f.geometry_channels = m.value("geometry_channels", f.geometry_channels);
      f.category_channels = m.value("category_channels", f.category_channels);
      f.hidden = m.value("hidden", f.hidden);
      if (m.contains("instance_relation")) {
        f.instance_relation = relation_kind_from_string(m.at("instance_relation").get<std::string>());
      }
      if (m.contains("category_relation")) {
        f.category_relation = relation_kind_from_string(m.at("category_relation").get<std::string>());
      }
      c.model.heads.hidden = m.value("head_hidden", c.model.heads.hidden);
      c.model.heads.residual_diagonal_logit = m.value("residual_diagonal_logit", c.model.heads.residual_diagonal_logit);
    }
    c.steps = j.value("recurrent_steps", c.steps);
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<std::vector<double>>();
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      c.loss.reconstruction = w.value("reconstruction", c.loss.reconstruction);
      c.loss.deformation = w.value("deformation", c.loss.deformation);
      c.loss.correspondence = w.value("correspondence", c.loss.correspondence);
      c.loss.sparsity = w.value("sparsity", c.loss.sparsity);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      auto& a = c.optimizer.adam;
      a.lr = o.value("lr", a.lr);
      a.beta1 = o.value("beta1", a.beta1);
      a.beta2 = o.value("beta2", a.beta2);
      a.eps = o.value("eps", a.eps);
      a.weight_decay = o.value("weight_decay", a.weight_decay);
      c.optimizer.decay_every = o.value("decay_every", c.optimizer.decay_every);
      c.optimizer.decay_factor = o.value("decay_factor", c.optimizer.decay_factor);
      c.optimizer.accumulate = o.value("accumulate", c.optimizer.accumulate);
    }
    c.epochs = j.value("epochs", c.epochs);
    if (j.contains("ransac")) {
      const auto& r = j.at("ransac");
      c.ransac.iterations = r.value("iterations", c.ransac.iterations);
      c.ransac.inlier_threshold = r.value("inlier_threshold", c.ransac.inlier_threshold);
    }
    const auto& seeds = j.at("seeds");
    c.model_seed = seeds.at("model").get<std::uint64_t>();
    c.shuffle_seed = seeds.at("shuffle").get<std::uint64_t>();
    c.ransac.seed = seeds.at("ransac").get<std::uint64_t>();
    c.validate();
    out = std::move(c);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  return j.get<ExperimentConfig>();
}

const std::vector<std::string>& loss_log_keys() {
  static const std::vector<std::string> keys = {"reconstruction", "deformation", "correspondence", "sparsity", "total"};
  return keys;
}

namespace {

nlohmann::json loss_json(const LossLog& l) {
  return {{"reconstruction", l.reconstruction},
          {"deformation", l.deformation},
          {"correspondence", l.correspondence},
          {"sparsity", l.sparsity},
          {"total", l.total}};
}

void add_to(LossLog& acc, const LossBreakdown& b) {
  acc.reconstruction += b.reconstruction;
  acc.deformation += b.deformation;
  acc.correspondence += b.correspondence;
  acc.sparsity += b.sparsity;
  acc.total += b.total.scalar();
}

void divide(LossLog& acc, double n) {
  acc.reconstruction /= n;
  acc.deformation /= n;
  acc.correspondence /= n;
  acc.sparsity /= n;
  acc.total /= n;
}

LossTargets targets_for(const Observation& obs) {
  if (!obs.instance) throw Error(ErrorCode::ConfigError, "observation has no instance model");
  return {obs.instance->points, rows_from_cloud(obs.gt_nocs)};
}

void check_set(const std::vector<Observation>& set, const char* name, std::size_t prior_points) {
  if (set.empty()) throw Error(ErrorCode::ConfigError, std::string(name) + " set is empty");
  for (const auto& o : set) {
    if (!o.instance) throw Error(ErrorCode::ConfigError, std::string(name) + " observation without instance model");
    if (o.instance->points.size() != prior_points) {
      throw Error(ErrorCode::ShapeMismatch, std::string(name) + " instance has " +
                                                std::to_string(o.instance->points.size()) + " points, expected " +
                                                std::to_string(prior_points));
    }
    if (o.cloud.size() == 0 || o.cloud.size() != o.gt_nocs.size()) {
      throw Error(ErrorCode::ShapeMismatch, std::string(name) + " observation has inconsistent point counts");
    }
  }
}

std::vector<Tensor2> snapshot(const ParameterSet& params) {
  std::vector<Tensor2> out;
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

void restore(ParameterSet& params, const std::vector<Tensor2>& values) {
  std::size_t i = 0;
  for (auto& p : params) p.value = values[i++];
}

}  // namespace

nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"lr", e.lr},
          {"train", loss_json(e.train)},
          {"validation", loss_json(e.validation)},
          {"validation_cd", e.validation_cd}};
}

void from_json(const nlohmann::json& j, EpochLog& e) {
  auto losses = [](const nlohmann::json& l) {
    return LossLog{l.at("reconstruction").get<double>(), l.at("deformation").get<double>(),
                   l.at("correspondence").get<double>(), l.at("sparsity").get<double>(), l.at("total").get<double>()};
  };
  e.epoch = j.at("epoch").get<std::size_t>();
  e.lr = j.at("lr").get<double>();
  e.train = losses(j.at("train"));
  e.validation = losses(j.at("validation"));
  e.validation_cd = j.at("validation_cd").get<double>();
}

LossLog evaluate_losses(const ExperimentConfig& config, const RecurrentModel& model,
                        const std::vector<Observation>& set, PriorLibrary& priors, double* mean_cd) {
  const auto lambda = config.step_weights();
  LossLog acc;
  double cd = 0.0;
  for (const auto& obs : set) {
    Tape tape;
    const auto out = recurrent_reconstruct(model, tape, obs.cloud, priors.get(obs.category).points, {config.steps});
    const LossTargets targets = targets_for(obs);
    add_to(acc, loss_overall(out, targets, lambda, config.loss));
    cd += chamfer_distance(cloud_from_rows(out.steps.back().model.value()), targets.model);
  }
  const double n = static_cast<double>(set.size());
  divide(acc, n);
  if (mean_cd) *mean_cd = cd / n;
  return acc;
}

TrainResult train(const ExperimentConfig& config, RecurrentModel& model, const std::vector<Observation>& train_set,
                  const std::vector<Observation>& validation_set, PriorLibrary& priors, const TrainOptions& options) {
  config.validate();
  check_set(train_set, "training", config.dataset.prior_points);
  check_set(validation_set, "validation", config.dataset.prior_points);
  if (priors.prior_points() != config.dataset.prior_points) {
    throw Error(ErrorCode::ConfigError, "prior library N_c differs from the experiment config");
  }

  ParameterSet& params = model.parameters();
  const auto lambda = config.step_weights();
  AdamState state{config.optimizer.adam, 0, {}, {}};
  TrainResult result;

  EpochLog initial;
  initial.lr = config.optimizer.adam.lr;
  initial.train = evaluate_losses(config, model, train_set, priors);
  initial.validation = evaluate_losses(config, model, validation_set, priors, &initial.validation_cd);
  result.log.push_back(initial);
  if (options.on_epoch) options.on_epoch(initial);
  result.best_validation_cd = initial.validation_cd;
  auto best = snapshot(params);

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = config.optimizer.adam.lr *
             std::pow(config.optimizer.decay_factor, static_cast<double>((epoch - 1) / config.optimizer.decay_every));
    state.options.lr = log.lr;

    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle(split_seed(config.shuffle_seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle);

    params.zero_grad();
    std::size_t pending = 0;
    for (std::size_t n = 0; n < order.size(); ++n) {
      const Observation& obs = train_set[order[n]];
      Tape tape;
      const auto out = recurrent_reconstruct(model, tape, obs.cloud, priors.get(obs.category).points, {config.steps});
      const LossBreakdown loss = loss_overall(out, targets_for(obs), lambda, config.loss);
      if (!std::isfinite(loss.total.scalar())) {
        throw Error(ErrorCode::ConfigError, "non-finite training loss at epoch " + std::to_string(epoch));
      }
      tape.backward(loss.total);
      add_to(log.train, loss);
      if (++pending == config.optimizer.accumulate || n + 1 == order.size()) {
        if (pending > 1) {
          for (auto& p : params) {
            for (auto& g : p.grad.values()) g /= static_cast<double>(pending);
          }
        }
        adam_step(params, state);
        params.zero_grad();
        pending = 0;
      }
    }
    divide(log.train, static_cast<double>(train_set.size()));
    log.validation = evaluate_losses(config, model, validation_set, priors, &log.validation_cd);
    if (log.validation_cd < result.best_validation_cd) {
      result.best_validation_cd = log.validation_cd;
      result.best_epoch = epoch;
      best = snapshot(params);
    }
    result.log.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
  }

  restore(params, best);
  if (options.checkpoint) save_weights(*options.checkpoint, params);
  return result;
}

PoseEstimate pose_from_reconstruction(const Tensor2& deformation, const Tensor2& correspondence,
                                      const PointCloud& prior, const PointCloud& observed,
                                      const RansacOptions& ransac) {
  if (correspondence.rows() != observed.size()) {
    throw Error(ErrorCode::ShapeMismatch, "correspondence has " + std::to_string(correspondence.rows()) +
                                              " rows for " + std::to_string(observed.size()) + " observed points");
  }
  PoseEstimate est;
  est.model = reconstruct_model(prior, deformation);
  est.coordinates = predicted_nocs_coords(correspondence, est.model);
  const RansacResult fit = ransac_umeyama(cloud_from_rows(est.coordinates), observed, ransac);
  est.transform = fit.transform;
  est.inlier_count = fit.inlier_count();
  return est;
}

PoseEstimate estimate_pose(const RecurrentModel& model, const Observation& obs, const PointCloud& prior,
                           std::size_t steps, const RansacOptions& ransac) {
  Tape tape;
  const auto out = recurrent_reconstruct(model, tape, obs.cloud, prior, {steps});
  const auto& last = out.steps.back();
  return pose_from_reconstruction(last.deformation.value(), last.correspondence.value(), prior, obs.cloud.points,
                                  ransac);
}

OracleInputs oracle_inputs(const Observation& obs) {
  if (!obs.instance) throw Error(ErrorCode::ConfigError, "oracle needs the instance model");
  const std::size_t n_c = obs.instance->points.size();
  if (obs.model_index.size() != obs.cloud.size()) {
    throw Error(ErrorCode::ConfigError, "oracle needs observations rendered from model points");
  }
  OracleInputs in{obs.instance->gt_deformation, Tensor2(obs.cloud.size(), n_c)};
  for (std::size_t i = 0; i < obs.model_index.size(); ++i) in.correspondence(i, obs.model_index[i]) = 1.0;
  return in;
}

PoseEstimate estimate_pose_oracle(const Observation& obs, const PointCloud& prior, const RansacOptions& ransac) {
  const OracleInputs in = oracle_inputs(obs);
  return pose_from_reconstruction(in.deformation, in.correspondence, prior, obs.cloud.points, ransac);
}

namespace {

OrientedBox box_of(const PointCloud& canonical, const SimilarityTransform& pose) {
  const auto [lo, hi] = canonical.bounds();
  return {pose.apply(0.5 * (lo + hi)), pose.rotation, pose.scale * (hi - lo)};
}

}  // namespace

PoseErrorRecord score_estimate(const PoseEstimate& estimate, const Observation& obs, std::size_t index) {
  PoseErrorRecord r;
  r.index = index;
  r.category = obs.category;
  r.symmetric = mug_symmetry(obs.category, obs.handle_visible);
  const PoseError e = pose_errors(estimate.transform, obs.gt_pose, r.symmetric);
  r.rotation_deg = e.degrees;
  r.translation_m = e.meters;
  r.iou = iou_3d(box_of(estimate.model, estimate.transform), box_of(obs.instance->points, obs.gt_pose), r.symmetric);
  r.chamfer = chamfer_distance(estimate.model, obs.instance->points);
  return r;
}

EvaluationResult evaluate(const ExperimentConfig& config, const RecurrentModel* model,
                          const std::vector<Observation>& test_set, PriorLibrary& priors,
                          const EvaluateOptions& options) {
  if (test_set.empty()) throw Error(ErrorCode::ConfigError, "test set is empty");
  if (!model && !options.oracle) throw Error(ErrorCode::ConfigError, "evaluate needs a model unless in oracle mode");
  const std::size_t steps = config.steps;
  EvaluationResult result;
  result.records.assign(steps + 1, {});
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const Observation& obs = test_set[i];
    if (!obs.instance) throw Error(ErrorCode::ConfigError, "observation without instance model");
    const PointCloud& prior = priors.get(obs.category).points;
    RansacOptions ransac = config.ransac;
    ransac.seed = split_seed(config.ransac.seed, i);

    Tape tape;
    RecurrentOutput out;
    OracleInputs oracle;
    if (options.oracle) {
      oracle = oracle_inputs(obs);
    } else {
      out = recurrent_reconstruct(*model, tape, obs.cloud, prior, {steps});
    }
    for (std::size_t k = 0; k <= steps; ++k) {
      const Tensor2& d = options.oracle ? oracle.deformation : out.steps[k].deformation.value();
      const Tensor2& m = options.oracle ? oracle.correspondence : out.steps[k].correspondence.value();
      PoseErrorRecord r;
      try {
        r = score_estimate(pose_from_reconstruction(d, m, prior, obs.cloud.points, ransac), obs, i);
      } catch (const Error&) {
        r.index = i;
        r.category = obs.category;
        r.symmetric = mug_symmetry(obs.category, obs.handle_visible);
        r.failed = true;
        r.chamfer = chamfer_distance(reconstruct_model(prior, d), obs.instance->points);
      }
      result.records[k].push_back(r);
    }
  }
  for (const auto& recs : result.records) {
    result.tables.push_back(accuracy_table(recs, Thresholds{}, config.dataset.categories));
  }
  return result;
}

nlohmann::ordered_json to_json(const EvaluationResult& result) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json steps = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < result.tables.size(); ++k) {
    nlohmann::ordered_json t = to_json(result.tables[k]);
    std::size_t failed = 0;
    for (const auto& r : result.records[k]) failed += r.failed ? 1 : 0;
    nlohmann::ordered_json entry;
    entry["step"] = k;
    entry["failed"] = failed;
    for (auto it = t.begin(); it != t.end(); ++it) entry[it.key()] = it.value();
    steps.push_back(entry);
  }
  j["steps"] = steps;
  return j;
}

std::string metrics_document(const EvaluationResult& result) { return to_json(result).dump(2) + "\n"; }

void write_loss_curve_csv(std::ostream& out, const std::vector<EpochLog>& log) {
  out << "epoch,lr";
  for (const char* split : {"train", "validation"}) {
    for (const auto& k : loss_log_keys()) out << ',' << split << '_' << k;
  }
  out << ",validation_cd\n";
  const auto old = out.precision(17);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.lr;
    for (const LossLog* l : {&e.train, &e.validation}) {
      out << ',' << l->reconstruction << ',' << l->deformation << ',' << l->correspondence << ',' << l->sparsity << ','
          << l->total;
    }
    out << ',' << e.validation_cd << '\n';
  }
  out.precision(old);
}

void write_k_sweep_csv(std::ostream& out, const nlohmann::json& metrics) {
  out << "step,metric,value\n";
  const auto old = out.precision(17);
  for (const auto& step : metrics.at("steps")) {
    const auto k = step.at("step").get<std::size_t>();
    const auto& mean = step.at("mean");
    for (const auto& name : step.at("metrics")) {
      out << k << ',' << name.get<std::string>() << ',' << mean.at(name.get<std::string>()).get<double>() << '\n';
    }
    out << k << ",mean_cd," << mean.at("mean_cd").get<double>() << '\n';
  }
  out.precision(old);
}

void write_category_cd_csv(std::ostream& out, const nlohmann::json& metrics) {
  out << "step,category,mean_cd\n";
  const auto old = out.precision(17);
  for (const auto& step : metrics.at("steps")) {
    const auto k = step.at("step").get<std::size_t>();
    for (auto it = step.at("categories").begin(); it != step.at("categories").end(); ++it) {
      out << k << ',' << it.key() << ',' << it.value().at("mean_cd").get<double>() << '\n';
    }
  }
  out.precision(old);
}

GradCheckReport gradient_sweep(const ModelConfig& config, std::size_t points, std::size_t steps,
                               const GradCheckOptions& options, std::uint64_t seed) {
  // A moderate diagonal keeps the residual softmax out of saturation.
  ModelConfig unsaturated = config;
  unsaturated.heads.residual_diagonal_logit = 1.0;
  RecurrentModel model(unsaturated, seed);
  std::mt19937_64 rng(split_seed(seed, 1));
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& p : model.parameters()) {
    if (p.value.max_abs() == 0.0) {
      for (auto& v : p.value.values()) v = 0.05 * g(rng);
    }
  }
  std::uniform_real_distribution<double> unit(-0.5, 0.5);
  ColoredPointCloud obs;
  PointCloud prior;
  LossTargets targets{PointCloud{}, Tensor2(points, 3)};
  for (std::size_t i = 0; i < points; ++i) {
    obs.points.points.emplace_back(unit(rng), unit(rng), unit(rng));
    obs.colors.emplace_back(unit(rng) + 0.5, unit(rng) + 0.5, unit(rng) + 0.5);
    prior.points.emplace_back(unit(rng), unit(rng), unit(rng));
    targets.model.points.emplace_back(unit(rng), unit(rng), unit(rng));
    for (std::size_t c = 0; c < 3; ++c) targets.nocs(i, c) = unit(rng);
  }
  const std::vector<double> lambda(steps + 1, 1.0);
  const LossWeights weights;
  return finite_diff_check(
      model.parameters(),
      [&](Tape& tape) {
        const auto out = recurrent_reconstruct(model, tape, obs, prior, {steps});
        return loss_overall(out, targets, lambda, weights).total;
      },
      options);
}

ExperimentRun run_experiment(const ExperimentConfig& config, const TrainOptions& options) {
  config.validate();
  PriorLibrary priors(config.dataset.prior_points);
  const auto train_set = generate_dataset(config.split(config.train), priors);
  const auto validation_set = generate_dataset(config.split(config.validation), priors);
  const auto test_set = generate_dataset(config.split(config.test), priors);
  RecurrentModel model(config.model, config.model_seed);
  ExperimentRun run;
  run.training = train(config, model, train_set, validation_set, priors, options);
  run.evaluation = evaluate(config, &model, test_set, priors);
  return run;
}

}  // namespace nf
