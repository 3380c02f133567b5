#pragma once

// Run configuration shared by every command. The JSON form has the sections
// data, model, schedule, train, sample, task and eval; unknown keys are
// rejected at every level.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "spvd/data/dataset.hpp"
#include "spvd/diffusion/diffusion.hpp"
#include "spvd/model/network.hpp"
#include "spvd/train/train.hpp"

namespace spvd::cli {

struct DataConfig {
  /// Synthetic shape kinds, cycled over the shapes; ignored with a manifest.
  std::vector<std::string> kinds{"chairoid"};
  std::string manifest;
  std::size_t n_shapes = 8;
  std::size_t n_points = 2048;
  data::NormMode normalization = data::NormMode::kUnitBox;
};

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  diffusion::SigmaVariant sigma = diffusion::SigmaVariant::kPosterior;

  diffusion::NoiseSchedule make() const;
};

struct TrainConfig {
  std::int64_t steps = 1000;
  std::size_t batch = 8;
  double lr = 2e-3;
  bool one_cycle = true;
  std::uint64_t seed = 0;
  std::int64_t save_every = 0;
};

struct SampleConfig {
  diffusion::SamplerRule rule = diffusion::SamplerRule::kDdim;
  int steps = 50;
  std::size_t count = 32;
  std::size_t batch = 8;
  /// Points per generated cloud; 0 uses data.n_points.
  std::size_t points = 0;
};

struct EvalConfig {
  int runs = 3;
  bool emd = true;
};

struct RunConfig {
  DataConfig data;
  model::NetworkConfig model = model::preset_config("spvd-tiny");
  ScheduleConfig schedule;
  TrainConfig train;
  SampleConfig sample;
  train::TaskSpec task;
  EvalConfig eval;

  nlohmann::json to_json() const;
  /// Points per training shape: task.n_out for super-resolution.
  std::size_t train_points() const;
};

/// Missing sections and keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "section.key=value" (value parsed as JSON, else taken as a string).
void apply_override(nlohmann::json& j, const std::string& assignment);

data::Dataset build_dataset(const RunConfig& cfg);

}  // namespace spvd::cli
