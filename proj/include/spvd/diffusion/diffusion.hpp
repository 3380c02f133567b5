#pragma once

// Gaussian diffusion over point coordinates: linear noise schedule, forward
// process, ε-prediction loss, DDPM and DDIM samplers with optional clamping
// of known points.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spvd/autodiff/tensor.hpp"
#include "spvd/common/points.hpp"
#include "spvd/common/rng.hpp"

namespace spvd::diffusion {

enum class SigmaVariant { kSqrtBeta, kPosterior };

SigmaVariant parse_sigma_variant(const std::string& name);
std::string to_string(SigmaVariant v);

/// Arrays are indexed by timestep 1..T; index 0 holds the ᾱ₀ = 1 convention
/// (β₀ = 0, σ₀ = 0).
struct NoiseSchedule {
  int steps = 0;
  double beta_start = 0;
  double beta_end = 0;
  SigmaVariant variant = SigmaVariant::kPosterior;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  int T() const { return steps; }
};

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end,
                                   SigmaVariant variant = SigmaVariant::kPosterior);

/// Noise predictor: x_t rows (B·N × 3), per-sample timesteps, optional class
/// ids (empty when unconditional) → ε̂ with the same shape as x_t.
template <typename T>
using EpsModel = std::function<ad::Tensor<T>(const ad::Tensor<T>& x_t, std::span<const int> t,
                                             std::span<const int> classes, std::size_t batch)>;

/// Per-point flag; true marks a KNOWN point that is kept at its input value.
struct SampleMask {
  std::size_t batch = 0;
  std::size_t points = 0;
  std::vector<std::uint8_t> known;

  std::size_t free_count(std::size_t b) const;
  /// Throws ContractError unless every sample has at least one FREE point.
  void validate() const;
};

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε with each sample's own t.
template <typename T>
std::vector<T> forward_sample(const PointBatch<T>& x0, std::span<const int> t, std::span<const T> eps,
                              const NoiseSchedule& sched);

/// Loss with the timesteps and noise supplied by the caller. KNOWN points are
/// left clean in x_t and excluded from the mean.
template <typename T>
ad::Tensor<T> training_loss_fixed(const EpsModel<T>& net, const PointBatch<T>& x0, std::span<const int> t,
                                  std::span<const T> eps, std::span<const int> classes, const SampleMask* mask,
                                  const NoiseSchedule& sched);

/// Draws t ~ U{1..T} per sample and ε ~ N(0, I), then evaluates the loss.
template <typename T>
ad::Tensor<T> training_loss(const EpsModel<T>& net, const PointBatch<T>& x0, std::span<const int> classes,
                            const SampleMask* mask, const NoiseSchedule& sched, Rng& rng);

/// x_{t−1} from x_t, a noise prediction and z. z is ignored at t = 1.
template <typename T>
std::vector<T> ddpm_update(std::span<const T> x_t, std::span<const T> eps, int t, const NoiseSchedule& sched,
                           std::span<const T> z);

/// Deterministic DDIM update from t to t_prev; t_prev = 0 returns the x0
/// prediction.
template <typename T>
std::vector<T> ddim_update(std::span<const T> x_t, std::span<const T> eps, int t, int t_prev,
                           const NoiseSchedule& sched);

template <typename T>
std::vector<T> ddpm_step(const EpsModel<T>& net, const PointBatch<T>& x_t, int t, const NoiseSchedule& sched,
                         Rng& rng, std::span<const int> classes = {});

template <typename T>
std::vector<T> ddim_step(const EpsModel<T>& net, const PointBatch<T>& x_t, int t, int t_prev,
                         const NoiseSchedule& sched, std::span<const int> classes = {});

enum class SamplerRule { kDdpm, kDdim };

SamplerRule parse_sampler_rule(const std::string& name);
std::string to_string(SamplerRule r);

/// Evenly spaced descending timesteps including T and 1.
std::vector<int> ddim_timesteps(int T, int steps);

struct SamplerOptions {
  SamplerRule rule = SamplerRule::kDdim;
  /// DDIM: number of visited timesteps. DDPM: must be T (or 0 for T).
  int steps = 0;
  /// Replace every DDPM z by zero.
  bool zero_noise = false;
};

/// Known coordinates and their mask for completion and super-resolution.
template <typename T>
struct KnownPoints {
  PointBatch<T> points;
  SampleMask mask;
};

template <typename T>
PointBatch<T> sample(const EpsModel<T>& net, std::size_t batch, std::size_t points, const NoiseSchedule& sched,
                     const SamplerOptions& opts, std::span<const int> classes, const KnownPoints<T>* known, Rng& rng);

}  // namespace spvd::diffusion
