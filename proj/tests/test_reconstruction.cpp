#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "nocsfit/diffcore/gradcheck.hpp"
#include "nocsfit/error.hpp"
#include "nocsfit/reconstruction.hpp"

using namespace nf;

namespace {

Tensor2 random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Tensor2 t(r, c);
  for (auto& v : t.values()) v = g(rng);
  return t;
}

PointCloud random_cloud(std::mt19937_64& rng, std::size_t n, double half = 0.5) {
  std::uniform_real_distribution<double> u(-half, half);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.emplace_back(u(rng), u(rng), u(rng));
  return c;
}

ColoredPointCloud random_observation(std::mt19937_64& rng, std::size_t n) {
  ColoredPointCloud o;
  o.points = random_cloud(rng, n, 0.1);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t i = 0; i < n; ++i) o.colors.emplace_back(u(rng), u(rng), u(rng));
  return o;
}

Tensor2 random_stochastic(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::uniform_real_distribution<double> u(0, 1);
  Tensor2 m(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += m(i, j) = u(rng);
    for (std::size_t j = 0; j < c; ++j) m(i, j) /= s;
  }
  return m;
}

double max_row_sum_deviation(const Tensor2& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      CHECK(m(i, j) >= 0.0);
      s += m(i, j);
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

ModelConfig small_model(RelationKind kind = RelationKind::Transformer) {
  ModelConfig cfg;
  cfg.features.texture_channels = 4;
  cfg.features.geometry_channels = 4;
  cfg.features.category_channels = 4;
  cfg.features.hidden = 6;
  cfg.features.instance_relation = kind;
  cfg.features.category_relation = kind;
  cfg.heads.hidden = 6;
  return cfg;
}

void zero_params(ParameterSet& params, const std::string& prefix) {
  for (auto& p : params) {
    if (p.id.rfind(prefix, 0) == 0) p.value.fill(0.0);
  }
}

void randomize_zeros(ParameterSet& params, std::mt19937_64& rng, double sd = 0.3) {
  std::normal_distribution<double> g(0.0, sd);
  for (auto& p : params) {
    if (p.value.max_abs() == 0.0) {
      for (auto& v : p.value.values()) v = g(rng);
    }
  }
}

LossTargets random_targets(std::mt19937_64& rng, std::size_t n_p, std::size_t n_c) {
  LossTargets t;
  t.model = random_cloud(rng, n_c);
  t.nocs = random_tensor(rng, n_p, 3, 0.2);
  return t;
}

}  // namespace

TEST_CASE("deformation head: zero final layer and shapes") {
  std::mt19937_64 rng(1);
  RecurrentModel model(small_model(), 3);
  for (std::size_t n_c : {1u, 7u, 40u}) {
    Tape tape;
    auto d = model.heads().deformation(tape.constant(random_tensor(rng, 4, n_c)), tape.constant(random_tensor(rng, 4, 9)));
    CHECK(d.rows() == n_c);
    CHECK(d.cols() == 3);
    CHECK(d.value() == Tensor2(n_c, 3, 0.0));
    auto r = model.heads().residual_deformation(tape.constant(random_tensor(rng, 4, n_c)),
                                                tape.constant(random_tensor(rng, 4, 9)));
    CHECK(r.value() == Tensor2(n_c, 3, 0.0));
  }
}

TEST_CASE("correspondence head rows") {
  std::mt19937_64 rng(2);
  RecurrentModel model(small_model(), 4);
  Tape tape;
  const Tensor2 fi = random_tensor(rng, 4, 9);
  const Tensor2 fc = random_tensor(rng, 4, 11);
  auto m = model.heads().correspondence(tape.constant(fi), tape.constant(fc)).value();
  CHECK(m.rows() == 9);
  CHECK(m.cols() == 11);
  CHECK(max_row_sum_deviation(m) < 1e-12);

  zero_params(model.parameters(), "recon.corr.");
  auto u = model.heads().correspondence(tape.constant(fi), tape.constant(fc)).value();
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 11).epsilon(1e-15));
}

TEST_CASE("residual correspondence head") {
  std::mt19937_64 rng(3);
  RecurrentModel model(small_model(), 5);
  const Tensor2 cur = random_tensor(rng, 4, 12);
  const Tensor2 prev = random_tensor(rng, 4, 12);
  Tape tape;
  CHECK(max_row_sum_deviation(model.heads().residual_correspondence(tape.constant(cur), tape.constant(prev)).value()) <
        1e-12);
  CHECK_THROWS_AS(model.heads().residual_correspondence(tape.constant(cur), tape.constant(random_tensor(rng, 4, 5))),
                  Error);

  zero_params(model.parameters(), "recon.residual.");
  auto u = model.heads().residual_correspondence(tape.constant(cur), tape.constant(prev)).value();
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 12).epsilon(1e-15));

  // a sharp diagonal makes the redistribution an identity
  model.heads().residual_diagonal().value(0, 0) = 60.0;
  const Tensor2 m0 = random_stochastic(rng, 9, 12);
  auto bar = model.heads().residual_correspondence(tape.constant(cur), tape.constant(prev));
  auto composed = ops::matmul(tape.constant(m0), bar).value();
  for (std::size_t i = 0; i < m0.size(); ++i) CHECK(std::abs(composed[i] - m0[i]) < 1e-6);
}

TEST_CASE("products of row-stochastic matrices stay row-stochastic") {
  std::mt19937_64 rng(4);
  Tape tape;
  Var m = tape.constant(random_stochastic(rng, 20, 30));
  for (int k = 0; k < 3; ++k) m = ops::matmul(m, tape.constant(random_stochastic(rng, 30, 30)));
  CHECK(max_row_sum_deviation(m.value()) < 1e-9);
}

TEST_CASE("reconstruct_model") {
  std::mt19937_64 rng(5);
  auto prior = random_cloud(rng, 10);
  CHECK(reconstruct_model(prior, Tensor2(10, 3)).points == prior.points);
  Tensor2 shift(10, 3);
  for (std::size_t i = 0; i < 10; ++i) shift(i, 0) = 0.1;
  auto moved = reconstruct_model(prior, shift);
  for (std::size_t i = 0; i < 10; ++i) CHECK(moved[i] == prior[i] + Vec3(0.1, 0, 0));
  CHECK_THROWS_AS(reconstruct_model(prior, Tensor2(9, 3)), Error);
}

TEST_CASE("predicted NOCS coordinates") {
  std::mt19937_64 rng(6);
  auto model = random_cloud(rng, 6);
  Tensor2 onehot(3, 6);
  onehot(0, 4) = onehot(1, 0) = onehot(2, 4) = 1.0;
  auto x = predicted_nocs_coords(onehot, model);
  for (int c = 0; c < 3; ++c) {
    CHECK(x(0, c) == model[4](c));
    CHECK(x(1, c) == model[0](c));
    CHECK(x(2, c) == model[4](c));
  }

  auto uniform = predicted_nocs_coords(Tensor2(5, 6, 1.0 / 6), model);
  const Vec3 centroid = model.centroid();
  for (std::size_t i = 0; i < 5; ++i) {
    for (int c = 0; c < 3; ++c) CHECK(std::abs(uniform(i, c) - centroid(c)) < 1e-15);
  }

  const auto [lo, hi] = model.bounds();
  auto mixed = predicted_nocs_coords(random_stochastic(rng, 50, 6), model);
  for (std::size_t i = 0; i < 50; ++i) {
    for (int c = 0; c < 3; ++c) {
      CHECK(mixed(i, c) >= lo(c) - 1e-15);
      CHECK(mixed(i, c) <= hi(c) + 1e-15);
    }
  }
  CHECK_THROWS_AS(predicted_nocs_coords(Tensor2(5, 4), model), Error);
}

TEST_CASE("observation normalization centers and scales to unit RMS") {
  std::mt19937_64 rng(7);
  auto obs = random_observation(rng, 30);
  auto in = normalize_observation(obs);
  CHECK(in.geometry.rows() == 3);
  CHECK(in.texture.rows() == 6);
  double ss = 0.0;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 30; ++j) {
      mean += in.geometry(c, j);
      ss += in.geometry(c, j) * in.geometry(c, j);
      CHECK(in.texture(c, j) == in.geometry(c, j));
      CHECK(in.texture(c + 3, j) == obs.colors[j](c));
    }
    CHECK(std::abs(mean) < 1e-12);
  }
  CHECK(ss / 30 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("recurrent reconstruction: step counts and row-stochastic closure") {
  std::mt19937_64 rng(8);
  RecurrentModel model(small_model(), 9);
  randomize_zeros(model.parameters(), rng, 0.2);
  model.heads().residual_diagonal().value(0, 0) = 1.0;
  auto obs = random_observation(rng, 16);
  auto prior = random_cloud(rng, 20);

  Tape t0;
  CHECK(recurrent_reconstruct(model, t0, obs, prior, {0, false}).steps.size() == 1);

  Tape t3;
  auto out = recurrent_reconstruct(model, t3, obs, prior, {3, false});
  REQUIRE(out.steps.size() == 4);
  for (const auto& s : out.steps) {
    CHECK(s.deformation.rows() == 20);
    CHECK(s.correspondence.rows() == 16);
    CHECK(s.correspondence.cols() == 20);
    CHECK(s.coordinates.rows() == 16);
    CHECK(max_row_sum_deviation(s.correspondence.value()) < 1e-9);
  }
  CHECK_FALSE(out.steps[3].correspondence.value() == out.steps[0].correspondence.value());
}

TEST_CASE("recurrent reconstruction: identity residuals are a fixed point") {
  std::mt19937_64 rng(10);
  RecurrentModel model(small_model(), 11);
  randomize_zeros(model.parameters(), rng, 0.2);
  auto obs = random_observation(rng, 12);
  auto prior = random_cloud(rng, 15);
  Tape tape;
  auto out = recurrent_reconstruct(model, tape, obs, prior, {3, true});
  for (const auto& s : out.steps) {
    CHECK(s.deformation.value() == out.steps[0].deformation.value());
    CHECK(s.correspondence.value() == out.steps[0].correspondence.value());
  }
}

TEST_CASE("reconstruction loss") {
  Tape tape;
  PointCloud a({Vec3(0, 0, 0), Vec3(0.3, 0.1, 0)});
  auto same = tape.constant(rows_from_cloud(a));
  CHECK(loss_reconstruction(same, a).scalar() == 0.0);
  auto one = tape.constant(Tensor2::from_rows({{0, 0, 0}}));
  CHECK(loss_reconstruction(one, PointCloud({Vec3(1, 0, 0)})).scalar() == 2.0);

  ParameterSet params;
  auto& p = params.add("p", rows_from_cloud(a));
  Tape t2;
  t2.backward(loss_reconstruction(t2.parameter(p), a));
  CHECK(p.grad == Tensor2(2, 3, 0.0));
}

TEST_CASE("deformation regularizer") {
  Tape tape;
  CHECK(loss_deformation_reg(tape.constant(Tensor2(5, 3))).scalar() == 0.0);
  Tensor2 d(7, 3);
  for (std::size_t i = 0; i < 7; ++i) {
    d(i, 0) = 3;
    d(i, 2) = 4;
  }
  CHECK(loss_deformation_reg(tape.constant(d)).scalar() == doctest::Approx(5.0).epsilon(1e-15));

  ParameterSet params;
  auto& p = params.add("d", Tensor2::from_rows({{3, 0, 4}, {0, 0, 0}, {1, 2, 2}}));
  Tape t2;
  t2.backward(loss_deformation_reg(t2.parameter(p)));
  const Tensor2 expected = Tensor2::from_rows({{3.0 / 15, 0, 4.0 / 15}, {0, 0, 0}, {1.0 / 9, 2.0 / 9, 2.0 / 9}});
  for (std::size_t i = 0; i < 9; ++i) CHECK(p.grad[i] == doctest::Approx(expected[i]).epsilon(1e-14));
}

TEST_CASE("soft L1 correspondence loss") {
  CHECK(soft_l1(0.05) == doctest::Approx(0.0125).epsilon(1e-15));
  CHECK(soft_l1(0.2) == doctest::Approx(0.15).epsilon(1e-15));
  CHECK(5.0 * 0.1 * 0.1 == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(0.1 - 0.05 == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(soft_l1(0.1) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(std::abs(soft_l1(0.1 - 1e-9) - 0.05) < 1e-8);
  CHECK(std::abs(soft_l1(0.1 + 1e-9) - 0.05) < 1e-8);
  CHECK(soft_l1(-0.2) == soft_l1(0.2));

  Tape tape;
  auto x = tape.constant(Tensor2(4, 3, 0.05));
  CHECK(loss_correspondence(x, Tensor2(4, 3)).scalar() == doctest::Approx(0.0125).epsilon(1e-14));
  CHECK(loss_correspondence(x, Tensor2(4, 3, 0.05)).scalar() == 0.0);
  CHECK_THROWS_AS(loss_correspondence(x, Tensor2(3, 3)), Error);
}

TEST_CASE("sparsity regularizer") {
  Tape tape;
  Tensor2 onehot(3, 4);
  onehot(0, 1) = onehot(1, 0) = onehot(2, 3) = 1.0;
  CHECK(loss_corr_reg(tape.constant(onehot)).scalar() == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(std::abs(loss_corr_reg(tape.constant(onehot)).scalar()) < 1e-9);
  CHECK(loss_corr_reg(tape.constant(Tensor2(2, 4, 0.25))).scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("losses pass finite differences on 8 points") {
  std::mt19937_64 rng(12);
  ParameterSet params;
  auto& model = params.add("model", random_tensor(rng, 8, 3, 0.3));
  auto& def = params.add("deformation", random_tensor(rng, 8, 3, 0.3));
  auto& coords = params.add("coords", random_tensor(rng, 8, 3, 0.1));
  auto& logits = params.add("logits", random_tensor(rng, 8, 8));
  const auto target = random_cloud(rng, 8);
  const Tensor2 nocs = random_tensor(rng, 8, 3, 0.1);
  auto build = [&](Tape& t) {
    Var total = loss_reconstruction(t.parameter(model), target);
    total = ops::add(total, loss_deformation_reg(t.parameter(def)));
    total = ops::add(total, loss_correspondence(t.parameter(coords), nocs));
    return ops::add(total, loss_corr_reg(ops::softmax_rows(t.parameter(logits))));
  };
  auto report = finite_diff_check(params, build, {});
  for (const auto& e : report.entries) {
    CAPTURE(e.id);
    CHECK(e.passed);
  }
  CHECK(report.nonsmooth * 10 <= params.scalar_count());
}

TEST_CASE("heads and the recurrent stack pass finite differences on 8 points") {
  for (auto kind : {RelationKind::None, RelationKind::Mlp, RelationKind::NonLocal, RelationKind::Transformer}) {
    CAPTURE(to_string(kind));
    std::mt19937_64 rng(13);
    RecurrentModel model(small_model(kind), 14);
    randomize_zeros(model.parameters(), rng, 0.05);
    model.heads().residual_diagonal().value(0, 0) = 1.0;
    auto obs = random_observation(rng, 8);
    auto prior = random_cloud(rng, 8);
    auto targets = random_targets(rng, 8, 8);
    const std::vector<double> lambda(3, 1.0);
    auto build = [&](Tape& t) {
      auto out = recurrent_reconstruct(model, t, obs, prior, {2, false});
      return loss_overall(out, targets, lambda, {}).total;
    };
    auto report = finite_diff_check(model.parameters(), build, {});
    for (const auto& e : report.entries) {
      CAPTURE(e.id);
      CHECK(e.passed);
    }
    CHECK(report.nonsmooth * 5 <= model.parameters().scalar_count());
  }
}

TEST_CASE("step weights") {
  std::mt19937_64 rng(15);
  RecurrentModel model(small_model(), 16);
  randomize_zeros(model.parameters(), rng, 0.2);
  model.heads().residual_diagonal().value(0, 0) = 1.0;
  auto obs = random_observation(rng, 10);
  auto prior = random_cloud(rng, 12);
  auto targets = random_targets(rng, 10, 12);

  Tape tape;
  auto out = recurrent_reconstruct(model, tape, obs, prior, {2, false});
  const std::vector<double> last{0, 0, 1};
  CHECK(loss_overall(out, targets, last, {}).total.scalar() == step_loss(out.steps[2], targets, {}).scalar());

  double separate = 0.0;
  for (const auto& s : out.steps) separate += step_loss(s, targets, {}).scalar();
  const std::vector<double> ones{1, 1, 1};
  auto all = loss_overall(out, targets, ones, {});
  CHECK(std::abs(all.total.scalar() - separate) < 1e-12);
  CHECK(all.reconstruction >= 0.0);
  CHECK(all.deformation >= 0.0);
  CHECK(all.correspondence >= 0.0);
  CHECK(all.sparsity >= 0.0);

  CHECK_THROWS_AS(loss_overall(out, targets, std::vector<double>{1, 1}, {}), Error);

  model.parameters().zero_grad();
  Tape t2;
  auto out2 = recurrent_reconstruct(model, t2, obs, prior, {2, false});
  const std::vector<double> zeros{0, 0, 0};
  auto none = loss_overall(out2, targets, zeros, {});
  CHECK(none.total.scalar() == 0.0);
  t2.backward(none.total);
  for (const auto& p : model.parameters()) CHECK(p.grad.max_abs() == 0.0);
}
