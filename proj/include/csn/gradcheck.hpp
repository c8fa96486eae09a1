#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "csn/error.hpp"
#include "csn/tensor.hpp"

namespace csn {

struct GradCheckOptions {
  double step = 1e-5;
  std::int64_t max_coords = 200;
  std::uint64_t seed = 0;
  double denom_floor = 1e-8;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t coords_checked = 0;
  std::int64_t coords_skipped = 0;
};

// One evaluation of the checked function: scalar value plus the routing
// signature of the forward pass (Graph::signature of the pass that produced
// it, or any constant for smooth functions).
struct FnEval {
  double value = 0.0;
  std::uint64_t signature = 0;
};

using GradCheckFn = std::function<FnEval(const std::vector<Tensor<double>>&)>;

// Central finite differences against the supplied analytic gradients, over
// randomly sampled coordinates. A coordinate whose +h/-h evaluations take a
// different nondifferentiable branch than the base point (signature change)
// is skipped; the analytic gradient is only defined away from such kinks.
// The finite-difference side uses only forward evaluations, keeping it
// independent of the reverse-mode path it checks.
inline GradCheckReport grad_check(const std::vector<Tensor<double>>& params, const GradCheckFn& eval,
                                  const std::vector<Tensor<double>>& analytic,
                                  const GradCheckOptions& opts = {}) {
  if (opts.step <= 0) throw ContractError("grad_check: step must be positive");
  if (params.size() != analytic.size()) {
    throw ContractError("grad_check: " + std::to_string(params.size()) + " parameter tensors vs " +
                        std::to_string(analytic.size()) + " gradient tensors");
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (!params[t].same_shape(analytic[t])) {
      throw DimensionError("grad_check: gradient shape " + shape_str(analytic[t].shape()) +
                           " does not match parameter shape " + shape_str(params[t].shape()));
    }
  }

  std::int64_t total = 0;
  for (const auto& p : params) total += p.size();

  std::vector<std::pair<std::size_t, std::int64_t>> coords;
  if (total <= opts.max_coords) {
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::int64_t i = 0; i < params[t].size(); ++i) coords.emplace_back(t, i);
  } else {
    std::mt19937_64 rng(opts.seed);
    std::uniform_int_distribution<std::int64_t> pick(0, total - 1);
    std::vector<char> taken(static_cast<std::size_t>(total), 0);
    while (static_cast<std::int64_t>(coords.size()) < opts.max_coords) {
      std::int64_t flat = pick(rng);
      if (taken[static_cast<std::size_t>(flat)]) continue;
      taken[static_cast<std::size_t>(flat)] = 1;
      std::size_t t = 0;
      while (flat >= params[t].size()) {
        flat -= params[t].size();
        ++t;
      }
      coords.emplace_back(t, flat);
    }
  }

  const FnEval base = eval(params);
  std::vector<Tensor<double>> work = params;
  GradCheckReport report;
  for (auto [t, i] : coords) {
    const double orig = work[t][i];
    work[t][i] = orig + opts.step;
    const FnEval plus = eval(work);
    work[t][i] = orig - opts.step;
    const FnEval minus = eval(work);
    work[t][i] = orig;
    if (plus.signature != base.signature || minus.signature != base.signature) {
      ++report.coords_skipped;
      continue;
    }
    const double fd = (plus.value - minus.value) / (2.0 * opts.step);
    const double an = analytic[t][i];
    const double denom = std::max({std::abs(an), std::abs(fd), opts.denom_floor});
    const double rel = std::abs(an - fd) / denom;
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.coords_checked;
  }
  return report;
}

}  // namespace csn
