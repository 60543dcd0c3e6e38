#include "nocsfit/diffcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace nf {

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

namespace {

double evaluate(const LossBuilder& build) {
  Tape tape;
  return build(tape).scalar();
}

}  // namespace

GradCheckReport finite_diff_check(ParameterSet& params, const LossBuilder& build, const GradCheckOptions& options) {
  params.zero_grad();
  double loss = 0.0;
  {
    Tape tape;
    const Var l = build(tape);
    loss = l.scalar();
    tape.backward(l);
  }
  // Smallest derivative magnitude a central difference resolves at this loss scale.
  const double resolvable =
      options.noise_factor * std::numeric_limits<double>::epsilon() * std::abs(loss) / options.step;
  const double floor = std::max(options.floor, resolvable);

  GradCheckReport report;
  report.tolerance = options.tolerance;
  std::mt19937_64 rng(options.seed);

  for (auto& p : params) {
    GradCheckEntry entry;
    entry.id = p.id;
    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options.max_entries_per_param > 0 && idx.size() > options.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(options.max_entries_per_param);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      const double saved = p.value[i];
      auto central = [&](double h) {
        p.value[i] = saved + h;
        const double up = evaluate(build);
        p.value[i] = saved - h;
        const double down = evaluate(build);
        p.value[i] = saved;
        return (up - down) / (2.0 * h);
      };
      const double numeric = central(options.step);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      double rel = std::abs(analytic - numeric) / denom;
      ++entry.checked;
      if (rel > options.tolerance) {
        // Halving the step exposes a kink (ReLU, max, nearest-neighbor switch) inside the stencil:
        // a smooth function gives the same quotient, a non-smooth one does not.
        const double half = central(0.5 * options.step);
        if (std::abs(half - numeric) / denom > options.tolerance) {
          ++entry.nonsmooth;
          continue;
        }
      }
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    entry.passed = entry.max_rel_error <= options.tolerance;
    report.passed = report.passed && entry.passed;
    report.nonsmooth += entry.nonsmooth;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace nf
