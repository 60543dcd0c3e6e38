#include "nocsfit/diffcore/adam.hpp"

#include <cmath>

#include "nocsfit/error.hpp"

namespace nf {

void adam_step(ParameterSet& params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.rows(), p.value.cols());
      state.v.emplace_back(p.value.rows(), p.value.cols());
    }
  }
  if (state.m.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "optimizer state covers a different model");

  const AdamOptions& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);

  std::size_t k = 0;
  for (auto& p : params) {
    if (!state.m[k].same_shape(p.value)) throw Error(ErrorCode::ShapeMismatch, "optimizer moment shape for " + p.id);
    auto w = p.value.map().array();
    const auto g = p.grad.map().array();
    auto m = state.m[k].map().array();
    auto v = state.v[k].map().array();
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g * g;
    w -= o.lr * ((m / bc1) / ((v / bc2).sqrt() + o.eps) + o.weight_decay * w);
    ++k;
  }
}

}  // namespace nf
