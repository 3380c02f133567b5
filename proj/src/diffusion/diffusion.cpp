#include "spvd/diffusion/diffusion.hpp"

#include <cmath>

#include "spvd/autodiff/ops.hpp"
#include "spvd/common/error.hpp"

namespace spvd::diffusion {

using ad::Tensor;

SigmaVariant parse_sigma_variant(const std::string& name) {
  if (name == "posterior") return SigmaVariant::kPosterior;
  if (name == "sqrt_beta") return SigmaVariant::kSqrtBeta;
  throw ConfigError("unknown sigma variant '" + name + "' (expected posterior or sqrt_beta)");
}

std::string to_string(SigmaVariant v) { return v == SigmaVariant::kPosterior ? "posterior" : "sqrt_beta"; }

SamplerRule parse_sampler_rule(const std::string& name) {
  if (name == "ddim") return SamplerRule::kDdim;
  if (name == "ddpm") return SamplerRule::kDdpm;
  throw ConfigError("unknown sampler '" + name + "' (expected ddpm or ddim)");
}

std::string to_string(SamplerRule r) { return r == SamplerRule::kDdim ? "ddim" : "ddpm"; }

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end, SigmaVariant variant) {
  if (T < 2) throw ConfigError("schedule: T must be at least 2");
  if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1)) {
    throw ConfigError("schedule: need 0 < beta_start < beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.variant = variant;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.sigma.assign(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  for (int t = 1; t <= T; ++t) {
    if (variant == SigmaVariant::kSqrtBeta) {
      s.sigma[t] = std::sqrt(s.beta[t]);
    } else {
      s.sigma[t] = std::sqrt((1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t]);
    }
  }
  return s;
}

std::size_t SampleMask::free_count(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t p = 0; p < points; ++p) n += known[b * points + p] ? 0 : 1;
  return n;
}

void SampleMask::validate() const {
  if (known.size() != batch * points) throw DimensionError("mask: flag count does not match B·N");
  for (std::size_t b = 0; b < batch; ++b) {
    if (free_count(b) == 0) throw ContractError("mask: sample " + std::to_string(b) + " has no FREE points");
  }
}

namespace {

void check_t(int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.T()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T()) + "]");
  }
}

void check_mask(const SampleMask& m, std::size_t batch, std::size_t points) {
  if (m.batch != batch || m.points != points) throw DimensionError("mask shape does not match the point batch");
  m.validate();
}

}  // namespace

template <typename T>
std::vector<T> forward_sample(const PointBatch<T>& x0, std::span<const int> t, std::span<const T> eps,
                              const NoiseSchedule& sched) {
  if (t.size() != x0.batch) throw DimensionError("forward_sample: one timestep per sample required");
  if (eps.size() != x0.xyz.size()) throw DimensionError("forward_sample: noise shape does not match x0");
  std::vector<T> out(x0.xyz.size());
  const std::size_t per = x0.points * 3;
  for (std::size_t b = 0; b < x0.batch; ++b) {
    check_t(t[b], sched);
    const T a = static_cast<T>(std::sqrt(sched.alpha_bar[t[b]]));
    const T c = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar[t[b]]));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = a * x0.xyz[i] + c * eps[i];
  }
  return out;
}

template <typename T>
Tensor<T> training_loss_fixed(const EpsModel<T>& net, const PointBatch<T>& x0, std::span<const int> t,
                              std::span<const T> eps, std::span<const int> classes, const SampleMask* mask,
                              const NoiseSchedule& sched) {
  auto xt = forward_sample(x0, t, eps, sched);
  std::vector<T> weights;
  if (mask) {
    check_mask(*mask, x0.batch, x0.points);
    weights.resize(x0.size());
    for (std::size_t p = 0; p < x0.size(); ++p) {
      if (mask->known[p]) {
        for (int a = 0; a < 3; ++a) xt[p * 3 + a] = x0.xyz[p * 3 + a];
        weights[p] = T(0);
      } else {
        weights[p] = T(1);
      }
    }
  }
  auto x = Tensor<T>::constant({x0.size(), 3}, std::move(xt));
  auto pred = net(x, t, classes, x0.batch);
  auto target = Tensor<T>::constant({x0.size(), 3}, std::vector<T>(eps.begin(), eps.end()));
  return ad::mse(pred, target, std::span<const T>(weights));
}

template <typename T>
Tensor<T> training_loss(const EpsModel<T>& net, const PointBatch<T>& x0, std::span<const int> classes,
                        const SampleMask* mask, const NoiseSchedule& sched, Rng& rng) {
  std::uniform_int_distribution<int> pick(1, sched.T());
  std::vector<int> t(x0.batch);
  for (auto& v : t) v = pick(rng);
  auto eps = standard_normal<T>(rng, x0.xyz.size());
  return training_loss_fixed<T>(net, x0, t, eps, classes, mask, sched);
}

template <typename T>
std::vector<T> ddpm_update(std::span<const T> x_t, std::span<const T> eps, int t, const NoiseSchedule& sched,
                           std::span<const T> z) {
  check_t(t, sched);
  if (eps.size() != x_t.size() || (t > 1 && z.size() != x_t.size())) {
    throw DimensionError("ddpm_update: operand sizes differ");
  }
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[t]);
  const double coef = (1.0 - sched.alpha[t]) / std::sqrt(1.0 - sched.alpha_bar[t]);
  const double sigma = t > 1 ? sched.sigma[t] : 0.0;
  std::vector<T> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = inv_sqrt_alpha * (static_cast<double>(x_t[i]) - coef * static_cast<double>(eps[i]));
    if (sigma > 0) v += sigma * static_cast<double>(z[i]);
    out[i] = static_cast<T>(v);
  }
  return out;
}

template <typename T>
std::vector<T> ddim_update(std::span<const T> x_t, std::span<const T> eps, int t, int t_prev,
                           const NoiseSchedule& sched) {
  check_t(t, sched);
  if (t_prev < 0 || t_prev >= t) throw ContractError("ddim: need 0 <= t_prev < t");
  if (eps.size() != x_t.size()) throw DimensionError("ddim_update: operand sizes differ");
  const double ab = sched.alpha_bar[t], ab_prev = sched.alpha_bar[t_prev];
  const double s = std::sqrt(1.0 - ab), sa = std::sqrt(ab);
  const double sp = std::sqrt(ab_prev), cp = std::sqrt(1.0 - ab_prev);
  std::vector<T> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = static_cast<double>(eps[i]);
    const double x0 = (static_cast<double>(x_t[i]) - s * e) / sa;
    out[i] = static_cast<T>(sp * x0 + cp * e);
  }
  return out;
}

namespace {

template <typename T>
std::vector<T> predict(const EpsModel<T>& net, const PointBatch<T>& x, int t, std::span<const int> classes) {
  ad::NoGradGuard guard;
  std::vector<int> ts(x.batch, t);
  auto in = Tensor<T>::constant({x.size(), 3}, x.xyz);
  auto eps = net(in, ts, classes, x.batch);
  if (eps.numel() != x.xyz.size()) throw DimensionError("model output shape does not match x_t");
  return std::vector<T>(eps.data().begin(), eps.data().end());
}

}  // namespace

template <typename T>
std::vector<T> ddpm_step(const EpsModel<T>& net, const PointBatch<T>& x_t, int t, const NoiseSchedule& sched,
                         Rng& rng, std::span<const int> classes) {
  auto eps = predict(net, x_t, t, classes);
  std::vector<T> z;
  if (t > 1) z = standard_normal<T>(rng, x_t.xyz.size());
  return ddpm_update<T>(x_t.xyz, eps, t, sched, z);
}

template <typename T>
std::vector<T> ddim_step(const EpsModel<T>& net, const PointBatch<T>& x_t, int t, int t_prev,
                         const NoiseSchedule& sched, std::span<const int> classes) {
  auto eps = predict(net, x_t, t, classes);
  return ddim_update<T>(x_t.xyz, eps, t, t_prev, sched);
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1) throw ConfigError("sampler: steps must be positive");
  if (steps > T) throw ConfigError("sampler: steps " + std::to_string(steps) + " exceed T = " + std::to_string(T));
  if (steps == 1) return {T};
  std::vector<int> ts(steps);
  for (int i = 0; i < steps; ++i) {
    const double u = static_cast<double>(steps - 1 - i) / (steps - 1);
    ts[i] = static_cast<int>(std::lround(1.0 + (T - 1) * u));
  }
  return ts;
}

template <typename T>
PointBatch<T> sample(const EpsModel<T>& net, std::size_t batch, std::size_t points, const NoiseSchedule& sched,
                     const SamplerOptions& opts, std::span<const int> classes, const KnownPoints<T>* known,
                     Rng& rng) {
  if (batch == 0 || points == 0) throw ContractError("sample: empty batch");
  const int T_ = sched.T();
  if (opts.steps > T_) throw ConfigError("sampler: steps " + std::to_string(opts.steps) + " exceed T");
  if (opts.steps < 0) throw ConfigError("sampler: steps must be positive");
  if (opts.rule == SamplerRule::kDdpm && opts.steps != 0 && opts.steps != T_) {
    throw ConfigError("ddpm visits every timestep; steps must equal T");
  }
  if (known) {
    if (known->points.batch != batch || known->points.points != points) {
      throw DimensionError("sample: known points do not match B × N");
    }
    check_mask(known->mask, batch, points);
  }
  auto clamp_known = [&](std::vector<T>& x) {
    if (!known) return;
    for (std::size_t p = 0; p < batch * points; ++p) {
      if (!known->mask.known[p]) continue;
      for (int a = 0; a < 3; ++a) x[p * 3 + a] = known->points.xyz[p * 3 + a];
    }
  };

  PointBatch<T> x(batch, points, standard_normal<T>(rng, batch * points * 3));
  clamp_known(x.xyz);
  if (opts.rule == SamplerRule::kDdpm) {
    for (int t = T_; t >= 1; --t) {
      auto eps = predict(net, x, t, classes);
      std::vector<T> z;
      if (t > 1) {
        z = standard_normal<T>(rng, x.xyz.size());
        if (opts.zero_noise) std::fill(z.begin(), z.end(), T(0));
      }
      x.xyz = ddpm_update<T>(x.xyz, eps, t, sched, z);
      clamp_known(x.xyz);
    }
  } else {
    auto ts = ddim_timesteps(T_, opts.steps == 0 ? T_ : opts.steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
      x.xyz = ddim_step<T>(net, x, ts[i], t_prev, sched, classes);
      clamp_known(x.xyz);
    }
  }
  return x;
}

#define SPVD_INSTANTIATE_DIFFUSION(T)                                                                              \
  template std::vector<T> forward_sample(const PointBatch<T>&, std::span<const int>, std::span<const T>,          \
                                         const NoiseSchedule&);                                                   \
  template Tensor<T> training_loss_fixed(const EpsModel<T>&, const PointBatch<T>&, std::span<const int>,          \
                                         std::span<const T>, std::span<const int>, const SampleMask*,             \
                                         const NoiseSchedule&);                                                   \
  template Tensor<T> training_loss(const EpsModel<T>&, const PointBatch<T>&, std::span<const int>,                \
                                   const SampleMask*, const NoiseSchedule&, Rng&);                                \
  template std::vector<T> ddpm_update(std::span<const T>, std::span<const T>, int, const NoiseSchedule&,          \
                                      std::span<const T>);                                                        \
  template std::vector<T> ddim_update(std::span<const T>, std::span<const T>, int, int, const NoiseSchedule&);    \
  template std::vector<T> ddpm_step(const EpsModel<T>&, const PointBatch<T>&, int, const NoiseSchedule&, Rng&,    \
                                    std::span<const int>);                                                        \
  template std::vector<T> ddim_step(const EpsModel<T>&, const PointBatch<T>&, int, int, const NoiseSchedule&,     \
                                    std::span<const int>);                                                        \
  template PointBatch<T> sample(const EpsModel<T>&, std::size_t, std::size_t, const NoiseSchedule&,               \
                                const SamplerOptions&, std::span<const int>, const KnownPoints<T>*, Rng&);

SPVD_INSTANTIATE_DIFFUSION(float)
SPVD_INSTANTIATE_DIFFUSION(double)

}  // namespace spvd::diffusion
