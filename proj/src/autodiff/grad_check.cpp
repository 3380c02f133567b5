#include "spvd/autodiff/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "spvd/common/error.hpp"

namespace spvd::ad {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check_probes(const std::function<Tensor<double>()>& loss_fn, const std::vector<Probe>& probes,
                                  double eps) {
  if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
  for (const auto& p : probes) {
    if (!p.leaf.defined() || !p.leaf.is_leaf() || !p.leaf.requires_grad()) {
      throw ContractError("grad_check: probes must target leaf tensors that require grad");
    }
    p.leaf.node()->grad.clear();
  }

  std::vector<double> analytic(probes.size(), 0.0);
  {
    Tensor<double> loss = loss_fn();
    backward(loss);
    for (std::size_t i = 0; i < probes.size(); ++i) {
      const auto g = probes[i].leaf.grad();
      analytic[i] = g.empty() ? 0.0 : g[probes[i].index];
    }
  }

  GradCheckResult result;
  result.probes = probes.size();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    Tensor<double> leaf = probes[i].leaf;
    double& slot = leaf.mutable_data()[probes[i].index];
    const double saved = slot;
    slot = saved + eps;
    const double up = loss_fn().item();
    slot = saved - eps;
    const double down = loss_fn().item();
    slot = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(analytic[i], numeric);
    if (i == 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_probe = i;
      result.analytic_at_worst = analytic[i];
      result.numeric_at_worst = numeric;
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                           double eps) {
  std::vector<Probe> probes;
  probes.reserve(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) probes.push_back({x, i});
  return grad_check_probes([&] { return f(x); }, probes, eps);
}

}  // namespace spvd::ad
