#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nocsfit/diffcore/tape.hpp"

namespace nf {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double floor = 1e-6;
  // The floor is raised to noise_factor * eps * |loss| / step, the scale below which
  // rounding in the loss itself dominates the difference quotient.
  double noise_factor = 1e5;
  // 0 checks every entry; otherwise a seeded sample of this many entries per parameter
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string id;
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;  // mismatches where the function is not differentiable within the stencil
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool passed = true;
  std::size_t nonsmooth = 0;

  double max_rel_error() const;
};

// Builds the loss on a fresh tape; must be a deterministic function of the parameter values.
using LossBuilder = std::function<Var(Tape&)>;

GradCheckReport finite_diff_check(ParameterSet& params, const LossBuilder& build, const GradCheckOptions& options = {});

}  // namespace nf
