#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "spvd/autodiff/tensor.hpp"

namespace spvd::ad {

/// One scalar coordinate of a leaf tensor to probe.
struct Probe {
  Tensor<double> leaf;
  std::size_t index;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_probe = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t probes = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps
/// near-zero gradients from turning round-off into large ratios.
double relative_error(double analytic, double numeric, double floor = 1e-3);

/// Central differences (f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps) at each
/// probe, compared against one backward() pass of `loss_fn`.
GradCheckResult grad_check_probes(const std::function<Tensor<double>()>& loss_fn, const std::vector<Probe>& probes,
                                  double eps = 1e-5);

/// Checks every coordinate of x for the scalar function f.
GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                           double eps = 1e-5);

}  // namespace spvd::ad
