// Command-line front end: dataset generation, training, evaluation, single-observation
// inference, gradient checking and figure-data export.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <Eigen/Geometry>

#include "CLI11.hpp"
#include "json.hpp"
#include "nocsfit/diffcore/weights_io.hpp"
#include "nocsfit/error.hpp"
#include "nocsfit/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kUsageExit = 2;

void report_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << '\n';
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw nf::Error(nf::ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  return out;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw nf::Error(nf::ErrorCode::IoError, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw nf::Error(nf::ErrorCode::FormatError, path.string() + ": " + e.what());
  }
}

const nf::SplitConfig& pick_split(const nf::ExperimentConfig& c, const std::string& name) {
  if (name == "train") return c.train;
  if (name == "validation") return c.validation;
  if (name == "test") return c.test;
  throw nf::Error(nf::ErrorCode::ConfigError, "unknown split '" + name + "'");
}

std::vector<nf::Observation> load_or_generate(const nf::ExperimentConfig& c, const std::string& split,
                                              const std::string& dataset_path, nf::PriorLibrary& priors) {
  if (!dataset_path.empty()) return nf::load_dataset(dataset_path, &priors).observations;
  return nf::generate_dataset(c.split(pick_split(c, split)), priors);
}

// qw qx qy qz, tx ty tz, then the metric box size (scale times the model's extents).
nlohmann::json pose_json(const nf::PoseEstimate& est) {
  const auto& t = est.transform;
  Eigen::Quaterniond q(t.rotation);
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const auto [lo, hi] = est.model.bounds();
  const nf::Vec3 size = t.scale * (hi - lo);
  const std::vector<double> pose{q.w(),          q.x(),          q.y(),          q.z(),   t.translation(0),
                                 t.translation(1), t.translation(2), size(0), size(1), size(2)};
  return {{"pose", pose}, {"inliers", est.inlier_count}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Category-level object pose and shape estimation on synthetic point clouds"};
  app.require_subcommand(1);

  std::string config_path, out_path, weights_path, dataset_path, split = "test", log_path, metrics_path;
  std::size_t index = 0, points = 8, steps = 2, samples = 16;
  std::uint64_t seed = 0;
  bool oracle = false, full = false;

  auto add_config = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("-c,--config", config_path, "Experiment config JSON")->envname("NF_CONFIG");
    if (required) o->required();
  };

  auto* gen = app.add_subcommand("gen", "Generate a dataset split and save it as NFD1");
  add_config(gen, true);
  gen->add_option("--split", split, "train, validation or test")->envname("NF_SPLIT");
  gen->add_option("-o,--out", out_path, "Output dataset file")->required()->envname("NF_OUT");
  gen->add_flag("--oracle", oracle, "Sample observed points from model points (records indices)")->envname("NF_ORACLE");

  auto* train = app.add_subcommand("train", "Train a model; writes best-validation weights");
  add_config(train, true);
  train->add_option("-o,--out", out_path, "Output NFW1 weights")->required()->envname("NF_OUT");
  train->add_option("--log", log_path, "Per-epoch log JSON")->envname("NF_LOG");

  auto* eval = app.add_subcommand("eval", "Evaluate weights on the test split; one table per recurrent step");
  add_config(eval, true);
  eval->add_option("-w,--weights", weights_path, "NFW1 weights")->envname("NF_WEIGHTS");
  eval->add_option("-d,--dataset", dataset_path, "NFD1 dataset instead of the generated test split")
      ->envname("NF_DATASET");
  eval->add_option("-o,--out", out_path, "Output directory")->required()->envname("NF_OUT");
  eval->add_flag("--oracle", oracle, "Ground-truth deformation and correspondences")->envname("NF_ORACLE");

  auto* infer = app.add_subcommand("infer", "Estimate the pose of one saved observation");
  add_config(infer, true);
  infer->add_option("-w,--weights", weights_path, "NFW1 weights")->required()->envname("NF_WEIGHTS");
  infer->add_option("-d,--dataset", dataset_path, "NFD1 dataset")->required()->envname("NF_DATASET");
  infer->add_option("-i,--index", index, "Observation index")->envname("NF_INDEX");

  auto* grad = app.add_subcommand("gradcheck", "Central finite-difference check of every parameter");
  add_config(grad, false);
  grad->add_option("--points", points, "Points in the random observation and prior")->envname("NF_POINTS");
  grad->add_option("--steps", steps, "Recurrent steps K")->envname("NF_STEPS");
  grad->add_option("--samples", samples, "Entries checked per parameter")->envname("NF_SAMPLES");
  grad->add_flag("--full", full, "Check every entry")->envname("NF_FULL");
  grad->add_option("--seed", seed, "Seed")->envname("NF_SEED");

  auto* plot = app.add_subcommand("plot-data", "Write CSV series behind loss curves and K-sweep plots");
  plot->add_option("--log", log_path, "Training log JSON")->envname("NF_LOG");
  plot->add_option("--metrics", metrics_path, "Metrics JSON from eval")->envname("NF_METRICS");
  plot->add_option("-o,--out", out_path, "Output directory")->required()->envname("NF_OUT");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("UsageError", e.what());
    std::cerr << app.help();
    return kUsageExit;
  }

  try {
    if (*gen) {
      auto c = nf::load_experiment_config(config_path);
      if (oracle) c.dataset.render.from_model_points = true;
      nf::PriorLibrary priors(c.dataset.prior_points);
      nf::Dataset ds{c.split(pick_split(c, split)), {}};
      ds.observations = nf::generate_dataset(ds.config, priors);
      nf::save_dataset(out_path, ds);
      std::cout << nlohmann::json{{"observations", ds.observations.size()}, {"out", out_path}}.dump() << '\n';
    } else if (*train) {
      const auto c = nf::load_experiment_config(config_path);
      nf::PriorLibrary priors(c.dataset.prior_points);
      const auto train_set = nf::generate_dataset(c.split(c.train), priors);
      const auto val_set = nf::generate_dataset(c.split(c.validation), priors);
      nf::RecurrentModel model(c.model, c.model_seed);
      nf::TrainOptions opts;
      opts.checkpoint = fs::path(out_path);
      opts.on_epoch = [](const nf::EpochLog& e) { std::cerr << nf::to_json(e).dump() << '\n'; };
      const auto result = nf::train(c, model, train_set, val_set, priors, opts);
      if (!log_path.empty()) {
        nlohmann::json log = nlohmann::json::array();
        for (const auto& e : result.log) log.push_back(nf::to_json(e));
        open_out(log_path) << log.dump(2) << '\n';
      }
      std::cout << nlohmann::json{{"best_epoch", result.best_epoch},
                                  {"best_validation_cd", result.best_validation_cd},
                                  {"weights", out_path}}
                       .dump()
                << '\n';
    } else if (*eval) {
      const auto c = nf::load_experiment_config(config_path);
      nf::PriorLibrary priors(c.dataset.prior_points);
      nf::ExperimentConfig ec = c;
      if (oracle) ec.dataset.render.from_model_points = true;
      const auto test_set = load_or_generate(ec, "test", dataset_path, priors);
      std::unique_ptr<nf::RecurrentModel> model;
      if (!oracle) {
        if (weights_path.empty()) throw nf::Error(nf::ErrorCode::ConfigError, "eval needs --weights unless --oracle");
        model = std::make_unique<nf::RecurrentModel>(c.model, c.model_seed);
        nf::load_weights(weights_path, model->parameters());
      }
      const auto result = nf::evaluate(c, model.get(), test_set, priors, {oracle});
      const fs::path dir(out_path);
      open_out(dir / "metrics.json") << nf::metrics_document(result);
      for (std::size_t k = 0; k < result.records.size(); ++k) {
        auto csv = open_out(dir / ("records_step" + std::to_string(k) + ".csv"));
        nf::write_records_csv(csv, result.records[k]);
      }
      std::cout << nf::to_json(result).at("steps").back().at("mean").dump() << '\n';
    } else if (*infer) {
      const auto c = nf::load_experiment_config(config_path);
      nf::PriorLibrary priors(c.dataset.prior_points);
      const auto ds = nf::load_dataset(dataset_path, &priors);
      if (index >= ds.observations.size()) {
        throw nf::Error(nf::ErrorCode::ConfigError, "index " + std::to_string(index) + " out of range");
      }
      nf::RecurrentModel model(c.model, c.model_seed);
      nf::load_weights(weights_path, model.parameters());
      const auto& obs = ds.observations[index];
      nf::RansacOptions ransac = c.ransac;
      ransac.seed = nf::split_seed(c.ransac.seed, index);
      const auto est = nf::estimate_pose(model, obs, priors.get(obs.category).points, c.steps, ransac);
      auto j = pose_json(est);
      j["category"] = std::string(nf::to_string(obs.category));
      std::cout << j.dump() << '\n';
    } else if (*grad) {
      nf::ModelConfig mc;
      if (!config_path.empty()) mc = nf::load_experiment_config(config_path).model;
      nf::GradCheckOptions opts;
      opts.max_entries_per_param = full ? 0 : samples;
      opts.seed = seed;
      nlohmann::json runs = nlohmann::json::array();
      bool all = true;
      for (auto kind : {nf::RelationKind::Transformer, nf::RelationKind::NonLocal, nf::RelationKind::Mlp}) {
        nf::ModelConfig variant = mc;
        variant.features.instance_relation = kind;
        variant.features.category_relation = kind;
        const auto report = nf::gradient_sweep(variant, points, steps, opts, seed);
        std::size_t checked = 0;
        for (const auto& e : report.entries) checked += e.checked;
        runs.push_back({{"relation", std::string(nf::to_string(kind))},
                        {"parameters", report.entries.size()},
                        {"entries", checked},
                        {"nonsmooth", report.nonsmooth},
                        {"max_rel_error", report.max_rel_error()},
                        {"passed", report.passed}});
        for (const auto& e : report.entries) {
          if (!e.passed) std::cerr << "failed: " << e.id << " rel " << e.max_rel_error << '\n';
          if (e.nonsmooth > 0) std::cerr << "non-smooth: " << e.id << ' ' << e.nonsmooth << '/' << e.checked << '\n';
        }
        all = all && report.passed;
      }
      std::cout << nlohmann::json{{"runs", runs}, {"tolerance", opts.tolerance}}.dump(2) << '\n';
      std::cout << (all ? "all passed" : "FAILED") << '\n';
      if (!all) return 1;
    } else if (*plot) {
      const fs::path dir(out_path);
      if (log_path.empty() && metrics_path.empty()) {
        throw nf::Error(nf::ErrorCode::ConfigError, "plot-data needs --log and/or --metrics");
      }
      if (!log_path.empty()) {
        std::vector<nf::EpochLog> log;
        for (const auto& e : read_json(log_path)) log.push_back(e.get<nf::EpochLog>());
        auto out = open_out(dir / "loss_curve.csv");
        nf::write_loss_curve_csv(out, log);
      }
      if (!metrics_path.empty()) {
        const auto metrics = read_json(metrics_path);
        auto sweep = open_out(dir / "k_sweep.csv");
        nf::write_k_sweep_csv(sweep, metrics);
        auto cd = open_out(dir / "category_cd.csv");
        nf::write_category_cd_csv(cd, metrics);
      }
    }
  } catch (const nf::Error& e) {
    report_error(std::string(nf::to_string(e.code())), e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    report_error("FormatError", e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("InternalError", e.what());
    return 1;
  }
  return 0;
}
