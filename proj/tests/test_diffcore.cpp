#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "nocsfit/diffcore/adam.hpp"
#include "nocsfit/diffcore/gradcheck.hpp"
#include "nocsfit/diffcore/ops.hpp"
#include "nocsfit/diffcore/weights_io.hpp"
#include "nocsfit/error.hpp"

using namespace nf;

namespace {

Tensor2 random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> g;
  Tensor2 t(r, c);
  for (auto& v : t.values()) v = g(rng);
  return t;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected nf::Error");
  return ErrorCode::IoError;
}

}  // namespace

TEST_CASE("op examples") {
  Tape tape;
  auto s = ops::softmax_rows(tape.constant(Tensor2(1, 3, 0.0)));
  for (std::size_t j = 0; j < 3; ++j) CHECK(s.value()(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto a = Tensor2::from_rows({{1, 2}, {3, 4}});
  CHECK(ops::matmul(tape.constant(a), tape.constant(Tensor2::identity(2))).value() == a);

  auto m = ops::mean_pool_cols(tape.constant(Tensor2::from_rows({{1, 2, 3}, {4, 5, 6}})));
  CHECK(m.value() == Tensor2::from_rows({{2}, {5}}));

  auto mx = ops::max_pool_cols(tape.constant(Tensor2::from_rows({{1, 7, 3}, {4, 5, -6}})));
  CHECK(mx.value() == Tensor2::from_rows({{7}, {5}}));
}

TEST_CASE("shape mismatches throw") {
  Tape tape;
  auto a = tape.constant(Tensor2(2, 3));
  auto b = tape.constant(Tensor2(2, 2));
  CHECK(code_of([&] { ops::matmul(a, a); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { ops::add(a, b); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { ops::concat_rows(a, tape.constant(Tensor2(1, 2))); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { tape.backward(a); }) == ErrorCode::NonScalarLoss);
}

TEST_CASE("softmax rows are positive and sum to one") {
  std::mt19937_64 rng(1);
  Tape tape;
  auto t = random_tensor(rng, 20, 30);
  t(3, 4) = 30.0;
  auto s = ops::softmax_rows(tape.constant(t)).value();
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      CHECK(s(i, j) > 0.0);
      sum += s(i, j);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
  // would overflow without the per-row max subtraction
  auto big = ops::softmax_rows(tape.constant(Tensor2::from_rows({{800, 799, 0}}))).value();
  CHECK(big.all_finite());
  CHECK(big(0, 0) + big(0, 1) + big(0, 2) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gradient of a summed parameter is all ones") {
  ParameterSet params;
  auto& p = params.add("p", Tensor2(3, 2, 0.5));
  Tape tape;
  tape.backward(ops::sum(tape.parameter(p)));
  CHECK(p.grad == Tensor2(3, 2, 1.0));
}

TEST_CASE("gradient of half squared norm of Wx") {
  ParameterSet params;
  auto& w = params.add("w", Tensor2::from_rows({{1, -2}, {0.5, 3}}));
  const Tensor2 x = Tensor2::from_rows({{2}, {-1}});
  Tape tape;
  auto y = ops::matmul(tape.parameter(w), tape.constant(x));
  tape.backward(ops::scale(ops::sum(ops::hadamard(y, y)), 0.5));
  // W x = (4, -2); gradient (W x) xᵀ
  CHECK(w.grad == Tensor2::from_rows({{8, -4}, {-4, 2}}));
}

TEST_CASE("adjoints are linear") {
  std::mt19937_64 rng(4);
  ParameterSet params;
  auto& a = params.add("a", random_tensor(rng, 4, 3));
  auto& b = params.add("b", random_tensor(rng, 3, 5));
  auto f = [&](Tape& t) { return ops::sum(ops::relu(ops::matmul(t.parameter(a), t.parameter(b)))); };
  auto g = [&](Tape& t) { return ops::sum(ops::softmax_rows(ops::matmul(t.parameter(a), t.parameter(b)))); };
  auto grads = [&](auto&& build) {
    params.zero_grad();
    Tape t;
    t.backward(build(t));
    return std::pair{a.grad, b.grad};
  };
  auto [fa, fb] = grads(f);
  auto [ga, gb] = grads(g);
  auto [sa, sb] = grads([&](Tape& t) { return ops::add(f(t), g(t)); });
  for (std::size_t i = 0; i < sa.size(); ++i) CHECK(std::abs(sa[i] - (fa[i] + ga[i])) < 1e-12);
  for (std::size_t i = 0; i < sb.size(); ++i) CHECK(std::abs(sb[i] - (fb[i] + gb[i])) < 1e-12);
}

TEST_CASE("a single linear layer passes at 1e-6") {
  std::mt19937_64 rng(8);
  ParameterSet params;
  auto& w = params.add("w", random_tensor(rng, 4, 3));
  auto& b = params.add("b", random_tensor(rng, 4, 1));
  const Tensor2 x = random_tensor(rng, 3, 8);
  const Tensor2 target = random_tensor(rng, 4, 8);
  auto build = [&](Tape& t) {
    auto y = ops::add_bias(ops::matmul(t.parameter(w), t.constant(x)), t.parameter(b));
    auto e = ops::sub(y, t.constant(target));
    return ops::sum(ops::hadamard(e, e));
  };
  GradCheckOptions opts;
  opts.tolerance = 1e-6;
  auto report = finite_diff_check(params, build, opts);
  CHECK(report.passed);
  CHECK(report.nonsmooth == 0);
  CHECK(report.max_rel_error() < 1e-6);
}

TEST_CASE("every op passes finite differences at 1e-4") {
  std::mt19937_64 rng(12);
  ParameterSet params;
  auto& a = params.add("a", random_tensor(rng, 5, 4));
  auto& b = params.add("b", random_tensor(rng, 4, 6));
  auto& bias = params.add("bias", random_tensor(rng, 5, 1));
  auto& s = params.add("s", Tensor2(1, 1, 0.3));
  const Tensor2 w = random_tensor(rng, 11, 6);
  auto build = [&](Tape& t) {
    auto ab = ops::add_bias(ops::matmul(t.parameter(a), t.parameter(b)), t.parameter(bias));  // 5 x 6
    auto sq = ops::add_scaled_identity(ops::matmul(ops::transpose(ab), ab), t.parameter(s));  // 6 x 6
    auto soft = ops::softmax_rows(ops::scale(sq, 0.2));
    auto pooled = ops::tile_cols(ops::add(ops::mean_pool_cols(ab), ops::max_pool_cols(ab)), 6);
    auto stacked = ops::concat_rows(ops::sub(ops::relu(ab), pooled), soft);  // 11 x 6
    return ops::sum(ops::hadamard(stacked, t.constant(w)));
  };
  auto report = finite_diff_check(params, build, {});
  CHECK(report.passed);
  CHECK(report.nonsmooth * 10 <= params.scalar_count());
}

TEST_CASE("a negated adjoint fails the check") {
  ParameterSet params;
  auto& p = params.add("p", Tensor2::from_rows({{0.4, -1.2, 2.0}}));
  auto build = [&](Tape& t) {
    auto x = t.parameter(p);
    Tensor2 v = x.value();
    for (auto& e : v.values()) e = e * e;
    auto sq = t.record(std::move(v), {x}, [x](Tape& tape, const Tensor2&, const Tensor2& g) {
      Tensor2 dx = g;
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= -2.0 * x.value()[i];
      tape.accumulate(x, dx);
    });
    return ops::sum(sq);
  };
  auto report = finite_diff_check(params, build, {});
  CHECK_FALSE(report.passed);
  CHECK(report.nonsmooth == 0);
}

TEST_CASE("adam: zero gradient and zero decay leave parameters unchanged") {
  std::mt19937_64 rng(3);
  ParameterSet params;
  auto& p = params.add("p", random_tensor(rng, 3, 3));
  const Tensor2 before = p.value;
  params.zero_grad();
  AdamState state;
  state.options.weight_decay = 0.0;
  for (int i = 0; i < 5; ++i) adam_step(params, state);
  CHECK(p.value == before);
}

TEST_CASE("adam: hand-evaluated degenerate update") {
  ParameterSet params;
  auto& w = params.add("w", Tensor2(1, 1, 1.0));
  w.grad = Tensor2(1, 1, 1.0);
  AdamState state;
  state.options.lr = 0.1;
  state.options.beta1 = 0.0;
  state.options.beta2 = 0.0;
  state.options.weight_decay = 0.0;
  adam_step(params, state);
  // m̂ = g = 1, v̂ = g² = 1
  CHECK(w.value(0, 0) == doctest::Approx(1.0 - 0.1 * (1.0 / (1.0 + 1e-8))).epsilon(1e-15));

  // decoupled decay on top: w ← w − lr (m̂/(√v̂ + ε) + λ w)
  state.options.weight_decay = 0.5;
  w.grad = Tensor2(1, 1, -2.0);
  const double w0 = w.value(0, 0);
  adam_step(params, state);
  CHECK(w.value(0, 0) == doctest::Approx(w0 - 0.1 * (-2.0 / (2.0 + 1e-8) + 0.5 * w0)).epsilon(1e-15));
}

TEST_CASE("adam: identical parameters follow identical trajectories") {
  std::mt19937_64 rng(6);
  ParameterSet params;
  const Tensor2 init = random_tensor(rng, 2, 3);
  auto& a = params.add("a", init);
  auto& b = params.add("b", init);
  AdamState state;
  for (int step = 0; step < 10; ++step) {
    const Tensor2 g = random_tensor(rng, 2, 3);
    a.grad = g;
    b.grad = g;
    adam_step(params, state);
    CHECK(a.value == b.value);
  }
}

TEST_CASE("adam: replay is bit-identical") {
  std::mt19937_64 rng(10);
  const Tensor2 init = random_tensor(rng, 4, 2);
  std::vector<Tensor2> grads;
  for (int i = 0; i < 6; ++i) grads.push_back(random_tensor(rng, 4, 2));
  auto run = [&] {
    ParameterSet params;
    auto& p = params.add("p", init);
    AdamState state;
    for (const auto& g : grads) {
      p.grad = g;
      adam_step(params, state);
    }
    return p.value;
  };
  CHECK(run() == run());
}

TEST_CASE("weights round trip and validation") {
  std::mt19937_64 rng(2);
  ParameterSet params;
  params.add("layer.weight", random_tensor(rng, 3, 4));
  params.add("layer.bias", random_tensor(rng, 3, 1));
  std::stringstream buf;
  write_weights(buf, params);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "NFW1");

  ParameterSet other;
  other.add("layer.weight", Tensor2(3, 4));
  other.add("layer.bias", Tensor2(3, 1));
  std::stringstream in(bytes);
  read_weights(in, other);
  CHECK(other.find("layer.weight")->value == params.find("layer.weight")->value);
  CHECK(other.find("layer.bias")->value == params.find("layer.bias")->value);

  ParameterSet wrong_shape;
  wrong_shape.add("layer.weight", Tensor2(4, 3));
  wrong_shape.add("layer.bias", Tensor2(3, 1));
  std::stringstream in2(bytes);
  CHECK(code_of([&] { read_weights(in2, wrong_shape); }) == ErrorCode::ShapeMismatch);

  ParameterSet missing;
  missing.add("layer.weight", Tensor2(3, 4));
  std::stringstream in3(bytes);
  CHECK(code_of([&] { read_weights(in3, missing); }) == ErrorCode::UnknownParameter);

  std::stringstream in4(bytes.substr(0, bytes.size() - 5));
  CHECK(code_of([&] { read_weights(in4, other); }) == ErrorCode::FormatError);
}
