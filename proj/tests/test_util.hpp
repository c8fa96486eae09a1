#pragma once

#include <functional>
#include <random>
#include <vector>

#include "csn/gradcheck.hpp"
#include "csn/graph.hpp"
#include "csn/tensor.hpp"

namespace csn::test {

template <typename T = double>
Tensor<T> randt(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

// Builds the graph twice: once for analytic gradients via backward, then
// repeatedly inside the finite-difference oracle. `build` maps parameter
// nodes to a scalar loss node.
using LossBuilder = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

inline GradCheckReport check_loss(const std::vector<Tensor<double>>& params,
                                  const LossBuilder& build, GradCheckOptions opts = {}) {
  auto eval = [&](const std::vector<Tensor<double>>& ps) {
    Graph<double> g;
    std::vector<Var> vars;
    vars.reserve(ps.size());
    for (const auto& p : ps) vars.push_back(g.param(p));
    Var loss = build(g, vars);
    return FnEval{g.value(loss).item(), g.signature()};
  };

  Graph<double> g;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.param(p));
  Var loss = build(g, vars);
  GradientMap<double> gm = g.backward(loss, vars);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(vars.size());
  for (Var v : vars) analytic.push_back(gm.at(v));
  return grad_check(params, eval, analytic, opts);
}

}  // namespace csn::test
