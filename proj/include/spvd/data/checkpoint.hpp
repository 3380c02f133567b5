#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "SPVD" | u32 version = 1 | u64 header bytes | JSON header | payload
//
// The header holds the network and schedule configs, the training step, the
// run seed and one entry {name, shape, offset, count} per blob. Blob offsets
// are byte offsets into the payload, which is the concatenation of every
// blob as 32-bit floats.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "spvd/diffusion/diffusion.hpp"
#include "spvd/model/network.hpp"

namespace spvd::data {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Blob {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

struct Checkpoint {
  model::NetworkConfig network;
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  diffusion::SigmaVariant sigma = diffusion::SigmaVariant::kPosterior;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
  /// Network parameters in network order, then any optimizer state.
  std::vector<Blob> blobs;

  diffusion::NoiseSchedule schedule() const;
};

Checkpoint make_checkpoint(const model::Network<float>& net, const diffusion::NoiseSchedule& sched,
                           std::int64_t step, std::uint64_t seed = 0);

std::string encode_checkpoint(const Checkpoint& ck);
/// Throws CheckpointError on a bad magic, version mismatch, truncation or an
/// inconsistent header.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
void save_checkpoint(const model::Network<float>& net, const diffusion::NoiseSchedule& sched, std::int64_t step,
                     const std::filesystem::path& path, std::uint64_t seed = 0);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Builds the network described by `ck` and copies its parameters in.
std::unique_ptr<model::Network<float>> restore_network(const Checkpoint& ck);

/// Copies blobs with matching names into `net`; every parameter must be
/// present with its exact shape.
void load_params(model::Network<float>& net, const std::vector<Blob>& blobs);

}  // namespace spvd::data
