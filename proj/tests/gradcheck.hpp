#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string_view>
#include <vector>

#include "common/rng.hpp"
#include "nn/graph.hpp"

namespace testutil {

using voxelseg::Rng;
using voxelseg::Shape;
using voxelseg::Tensor;
using voxelseg::nn::Graph;
using voxelseg::nn::Var;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, sd);
  return t;
}

/// Builds a scalar objective from the leaf variables.
using Objective = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // elements that needed a smaller step
  // Location and values of the worst entry.
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Side of every leaky_relu kink the graph's activations fall on.
inline std::vector<bool> kink_pattern(const Graph<double>& g) {
  std::vector<bool> bits;
  for (int id = 0; id < static_cast<int>(g.size()); ++id) {
    if (std::string_view(g.op(id)) != "leaky_relu") continue;
    for (double v : g.value(g.inputs(id)[0]).values()) bits.push_back(v > 0.0);
  }
  return bits;
}

/// Compares backward() against central differences for every element of
/// every input. Relative error is |a - n| / max(|a|, |n|, floor).
/// leaky_relu is not differentiable at 0: when a +-h step moves any of its
/// inputs across 0 the difference quotient is meaningless, so the step for
/// that element is halved until both probes stay on the kink-free side.
inline GradCheckResult grad_check(const std::vector<Tensor<double>>& inputs, const Objective& objective,
                                  double h = 1e-3, double floor = 1e-6) {
  std::vector<Tensor<double>> analytic;
  std::vector<bool> base_pattern;
  {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(g.parameter(t));
    Var<double> out = objective(g, leaves);
    base_pattern = kink_pattern(g);
    g.backward(out);
    for (const auto& l : leaves) analytic.push_back(l.grad().empty() ? Tensor<double>(l.shape(), 0.0) : l.grad());
  }
  auto eval = [&](const std::vector<Tensor<double>>& xs, bool& smooth) {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& t : xs) leaves.push_back(g.constant(t));
    const double v = objective(g, leaves).value()[0];
    smooth = smooth && kink_pattern(g) == base_pattern;
    return v;
  };
  GradCheckResult r;
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    for (std::size_t i = 0; i < inputs[a].size(); ++i) {
      const double x0 = inputs[a][i];
      double step = h, numeric = 0.0;
      for (int attempt = 0; attempt < 30; ++attempt, step *= 0.5) {
        bool smooth = true;
        work[a][i] = x0 + step;
        const double fp = eval(work, smooth);
        work[a][i] = x0 - step;
        const double fm = eval(work, smooth);
        numeric = (fp - fm) / (2.0 * step);
        if (smooth) break;
      }
      work[a][i] = x0;
      if (step < h) ++r.refined;
      const double an = analytic[a][i];
      const double denom = std::max({std::abs(an), std::abs(numeric), floor});
      const double rel = std::abs(an - numeric) / denom;
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst_input = a;
        r.worst_index = i;
        r.worst_analytic = an;
        r.worst_numeric = numeric;
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace testutil
