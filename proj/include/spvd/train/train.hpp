#pragma once

// Adam with a one-cycle learning-rate policy and the ε-prediction training
// loop over a point-cloud dataset.

#include <cstdint>
#include <functional>
#include <vector>

#include "spvd/data/checkpoint.hpp"
#include "spvd/data/dataset.hpp"
#include "spvd/diffusion/diffusion.hpp"
#include "spvd/model/network.hpp"

namespace spvd::train {

template <typename T>
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit Adam(model::NamedParams<T>& params);

  /// One update with learning rate `lr`, then clears the gradients. A
  /// parameter without a gradient is treated as having a zero gradient.
  void step(double lr);

  std::int64_t steps() const { return t_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  model::NamedParams<T>& params_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t t_ = 0;
};

/// Learning rate at 0-based `step` of `total`. Linear warmup over the first
/// 10 % of steps to `peak`, then cosine decay to peak / 100 at the last step.
/// With `one_cycle` false the rate is constant.
double one_cycle_lr(std::int64_t step, std::int64_t total, double peak, bool one_cycle = true);

struct TaskSpec {
  enum class Kind { kNone, kCompletion, kSuperres };
  Kind kind = Kind::kNone;
  int m = 1;                // completion: maximum number of FREE parts
  std::size_t k_in = 512;   // superres: KNOWN points
  std::size_t n_out = 2048;  // superres: output size
};

struct TrainOptions {
  std::int64_t steps = 1000;  // total steps of the run, resumed or not
  std::size_t batch = 8;
  double lr = 2e-3;
  bool one_cycle = true;
  std::uint64_t seed = 0;
  TaskSpec task;
};

struct LossRecord {
  std::int64_t step = 0;
  double loss = 0;
  double lr = 0;
};

struct TrainHooks {
  std::function<void(const LossRecord&)> on_step;
  std::function<void(std::int64_t next_step)> on_save;
  std::int64_t save_every = 0;
};

/// Runs steps [start_step, opts.steps). Step s draws its batch, masks and
/// noise from streams ("shuffle" | "mask" | "noise", s) of the seed, so a
/// resumed run repeats an uninterrupted one.
std::vector<LossRecord> train(model::Network<float>& net, const data::Dataset& data,
                              const diffusion::NoiseSchedule& sched, const TrainOptions& opts, Adam<float>& adam,
                              std::int64_t start_step = 0, const TrainHooks& hooks = {});

/// Optimizer moments as checkpoint blobs named "adam.m/<param>" and
/// "adam.v/<param>".
std::vector<data::Blob> adam_blobs(Adam<float>& adam, const model::NamedParams<float>& params);
/// Restores moments written by adam_blobs; missing blobs leave zeros.
void load_adam(Adam<float>& adam, const model::NamedParams<float>& params, const std::vector<data::Blob>& blobs,
               std::int64_t steps);

/// Masks for one training batch under `task`.
diffusion::SampleMask task_mask(const TaskSpec& task, const data::Dataset& data, std::span<const std::size_t> picks,
                                std::size_t points, Rng& rng);

}  // namespace spvd::train
