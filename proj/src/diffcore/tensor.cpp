#include "nocsfit/diffcore/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "nocsfit/error.hpp"

namespace nf {

Tensor2::Tensor2(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(values.begin(), values.end()) {
  if (values_.size() != rows * cols) {
    throw Error(ErrorCode::ShapeMismatch, "Tensor2: " + std::to_string(values_.size()) + " values for " +
                                              std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Tensor2 Tensor2::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error(ErrorCode::ShapeMismatch, "Tensor2::from_rows: ragged rows");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor2(r, c, std::move(v));
}

Tensor2 Tensor2::from_matrix(const RowMatrix& m) {
  Tensor2 t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  t.map() = m;
  return t;
}

Tensor2 Tensor2::identity(std::size_t n) {
  Tensor2 t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

void Tensor2::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor2::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor2::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

Parameter& ParameterSet::add(std::string id, Tensor2 init) {
  if (find(id) != nullptr) throw Error(ErrorCode::ConfigError, "duplicate parameter identifier '" + id + "'");
  Tensor2 grad(init.rows(), init.cols());
  params_.push_back(Parameter{std::move(id), std::move(init), std::move(grad)});
  return params_.back();
}

Parameter* ParameterSet::find(const std::string& id) {
  for (auto& p : params_) {
    if (p.id == id) return &p;
  }
  return nullptr;
}

const Parameter* ParameterSet::find(const std::string& id) const {
  for (const auto& p : params_) {
    if (p.id == id) return &p;
  }
  return nullptr;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

}  // namespace nf
