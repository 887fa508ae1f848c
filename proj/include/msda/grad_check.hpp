#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "msda/tensor.hpp"

namespace msda {

/// Builds a scalar loss from the given inputs inside a fresh graph.
using GraphBuilder =
    std::function<Tensor(Graph&, std::span<const Tensor> inputs)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // Expected ratio analytic / numeric. -lambda for a graph whose only
  // deviation from its forward function is a gradient reversal.
  double numeric_scale = 1.0;
};

/// Maximum over all input entries of |analytic - numeric| /
/// max(1, |analytic|, |numeric|), numeric by central differences.
inline double grad_check(const GraphBuilder& builder,
                         std::span<Tensor> inputs,
                         GradCheckOptions opt = {}) {
  if (!(opt.eps >= 1e-7 && opt.eps <= 1e-3)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  auto evaluate = [&]() {
    Graph g;
    return builder(g, inputs).item();
  };
  const double first = evaluate();
  const double second = evaluate();
  if (first != second) {
    throw std::runtime_error("grad_check: builder is not deterministic");
  }

  for (auto& in : inputs) in.zero_grad();
  {
    Graph g;
    Tensor loss = builder(g, inputs);
    g.backward(loss);
  }

  double worst = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    auto values = in.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opt.eps;
      const double plus = evaluate();
      values[i] = saved - opt.eps;
      const double minus = evaluate();
      values[i] = saved;
      const double numeric = opt.numeric_scale * (plus - minus) / (2.0 * opt.eps);
      const double denom =
          std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace msda
