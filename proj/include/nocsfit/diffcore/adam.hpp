#pragma once

#include <cstdint>
#include <vector>

#include "nocsfit/diffcore/tensor.hpp"

namespace nf {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;  // decoupled, scaled by lr
};

struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<Tensor2> m;  // aligned with ParameterSet iteration order
  std::vector<Tensor2> v;
};

// One bias-corrected adaptive-moment update using the gradients stored in params.
void adam_step(ParameterSet& params, AdamState& state);

}  // namespace nf
