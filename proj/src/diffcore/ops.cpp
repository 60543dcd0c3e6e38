#include "nocsfit/diffcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "nocsfit/error.hpp"

namespace nf::ops {
namespace {

std::string shape(const Var& v) { return std::to_string(v.rows()) + "x" + std::to_string(v.cols()); }

[[noreturn]] void mismatch(const char* op, const Var& a, const Var& b) {
  throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape(a) + " vs " + shape(b));
}

Tape& tape_of(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw Error(ErrorCode::ShapeMismatch, "operands recorded on different tapes");
  return a.tape();
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) mismatch("matmul", a, b);
  Tape& t = tape_of(a, b);
  Tensor2 out(a.rows(), b.cols());
  out.map().noalias() = a.value().map() * b.value().map();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor2&, const Tensor2& g) {
    if (tp.needs_grad(a)) tp.grad_buffer(a).map().noalias() += g.map() * b.value().map().transpose();
    if (tp.needs_grad(b)) tp.grad_buffer(b).map().noalias() += a.value().map().transpose() * g.map();
  });
}

Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) mismatch("add", a, b);
  Tensor2 out = a.value();
  out.map() += b.value().map();
  return tape_of(a, b).record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) mismatch("sub", a, b);
  Tensor2 out = a.value();
  out.map() -= b.value().map();
  return tape_of(a, b).record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(b)) tp.grad_buffer(b).map() -= g.map();
  });
}

Var hadamard(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) mismatch("hadamard", a, b);
  Tensor2 out = a.value();
  out.map().array() *= b.value().map().array();
  return tape_of(a, b).record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor2&, const Tensor2& g) {
    if (tp.needs_grad(a)) tp.grad_buffer(a).map().array() += g.map().array() * b.value().map().array();
    if (tp.needs_grad(b)) tp.grad_buffer(b).map().array() += g.map().array() * a.value().map().array();
  });
}

Var scale(const Var& a, double s) {
  Tensor2 out = a.value();
  out.map() *= s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.grad_buffer(a).map() += s * g.map();
  });
}

Var relu(const Var& a) {
  Tensor2 out = a.value();
  out.map() = out.map().cwiseMax(0.0);
  return a.tape().record(std::move(out), {a}, [a](Tape& tp, const Tensor2&, const Tensor2& g) {
    const auto x = a.value().map().array();
    tp.grad_buffer(a).map().array() += (x > 0.0).select(g.map().array(), 0.0);
  });
}

Var transpose(const Var& a) {
  Tensor2 out(a.cols(), a.rows());
  out.map() = a.value().map().transpose();
  return a.tape().record(std::move(out), {a}, [a](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.grad_buffer(a).map() += g.map().transpose();
  });
}

Var concat_rows(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) mismatch("concat_rows", a, b);
  Tensor2 out(a.rows() + b.rows(), a.cols());
  const auto ar = static_cast<Eigen::Index>(a.rows());
  const auto br = static_cast<Eigen::Index>(b.rows());
  out.map().topRows(ar) = a.value().map();
  out.map().bottomRows(br) = b.value().map();
  return tape_of(a, b).record(std::move(out), {a, b}, [a, b, ar, br](Tape& tp, const Tensor2&, const Tensor2& g) {
    if (tp.needs_grad(a)) tp.grad_buffer(a).map() += g.map().topRows(ar);
    if (tp.needs_grad(b)) tp.grad_buffer(b).map() += g.map().bottomRows(br);
  });
}

Var mean_pool_cols(const Var& a) {
  if (a.cols() == 0) throw Error(ErrorCode::ShapeMismatch, "mean_pool_cols on zero columns");
  Tensor2 out(a.rows(), 1);
  out.map() = a.value().map().rowwise().mean();
  const double inv = 1.0 / static_cast<double>(a.cols());
  return a.tape().record(std::move(out), {a}, [a, inv](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.grad_buffer(a).map().colwise() += inv * g.map().col(0);
  });
}

Var max_pool_cols(const Var& a) {
  if (a.cols() == 0) throw Error(ErrorCode::ShapeMismatch, "max_pool_cols on zero columns");
  const Tensor2& x = a.value();
  Tensor2 out(a.rows(), 1);
  std::vector<std::size_t> arg(a.rows(), 0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double best = x(r, 0);
    for (std::size_t c = 1; c < x.cols(); ++c) {
      if (x(r, c) > best) {
        best = x(r, c);
        arg[r] = c;
      }
    }
    out(r, 0) = best;
  }
  return a.tape().record(std::move(out), {a}, [a, arg = std::move(arg)](Tape& tp, const Tensor2&, const Tensor2& g) {
    Tensor2& ga = tp.grad_buffer(a);
    for (std::size_t r = 0; r < arg.size(); ++r) ga(r, arg[r]) += g(r, 0);
  });
}

Var tile_cols(const Var& column, std::size_t n) {
  if (column.cols() != 1) throw Error(ErrorCode::ShapeMismatch, "tile_cols expects a column, got " + shape(column));
  Tensor2 out(column.rows(), n);
  out.map().colwise() = column.value().map().col(0);
  return column.tape().record(std::move(out), {column}, [column](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.grad_buffer(column).map().col(0) += g.map().rowwise().sum();
  });
}

Var add_bias(const Var& a, const Var& bias) {
  if (bias.cols() != 1 || bias.rows() != a.rows()) mismatch("add_bias", a, bias);
  Tensor2 out = a.value();
  out.map().colwise() += bias.value().map().col(0);
  return tape_of(a, bias).record(std::move(out), {a, bias}, [a, bias](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(bias)) tp.grad_buffer(bias).map().col(0) += g.map().rowwise().sum();
  });
}

Var add_scaled_identity(const Var& a, const Var& s) {
  if (a.rows() != a.cols() || s.rows() != 1 || s.cols() != 1) mismatch("add_scaled_identity", a, s);
  Tensor2 out = a.value();
  const double sv = s.scalar();
  for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) += sv;
  return tape_of(a, s).record(std::move(out), {a, s}, [a, s](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(s)) tp.grad_buffer(s)(0, 0) += g.map().trace();
  });
}

Var softmax_rows(const Var& a) {
  const Tensor2& x = a.value();
  if (!x.all_finite()) throw Error(ErrorCode::ShapeMismatch, "softmax_rows input is not finite");
  Tensor2 out(x.rows(), x.cols());
  auto y = out.map();
  y = x.map();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return a.tape().record(std::move(out), {a}, [a](Tape& tp, const Tensor2& s_out, const Tensor2& g) {
    const auto s = s_out.map();
    const auto gm = g.map();
    // dx = s * (g - rowsum(g * s))
    const Eigen::VectorXd dots = (gm.array() * s.array()).rowwise().sum();
    tp.grad_buffer(a).map().array() += s.array() * (gm.colwise() - dots).array();
  });
}

Var sum(const Var& a) {
  Tensor2 out(1, 1, a.value().map().sum());
  return a.tape().record(std::move(out), {a}, [a](Tape& tp, const Tensor2&, const Tensor2& g) {
    tp.grad_buffer(a).map().array() += g(0, 0);
  });
}

}  // namespace nf::ops
