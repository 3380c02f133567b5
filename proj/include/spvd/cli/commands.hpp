#pragma once

// Command implementations behind the spvd executable. Each command throws
// spvd errors; run_cli maps them to exit codes (0 success, 2 usage or
// configuration error, 3 runtime or data error).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "spvd/cli/config.hpp"
#include "spvd/metrics/metrics.hpp"

namespace spvd::cli {

namespace fs = std::filesystem;

struct TrainResult {
  std::int64_t first_step = 0;
  std::int64_t last_step = 0;  // exclusive
  double final_loss = 0;
  fs::path checkpoint;
};

/// Writes config.json, loss.csv and checkpoint.spvd under `out`. With
/// `resume`, the network, optimizer state and step come from that
/// checkpoint and loss.csv is appended to.
TrainResult cmd_train(const RunConfig& cfg, const fs::path& out, const std::optional<fs::path>& resume,
                      std::ostream& log);

struct SampleResult {
  std::vector<fs::path> files;
  double seconds = 0;
};

/// cfg.sample drives the sampler; `class_id` < 0 cycles through the classes
/// of a conditional network.
SampleResult cmd_sample(const fs::path& checkpoint, const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                        int class_id, std::ostream& log);

/// Frees k ~ U{1..m} labelled parts of `input` and regenerates them.
fs::path cmd_complete(const fs::path& checkpoint, const fs::path& input, const RunConfig& cfg, int m,
                      std::uint64_t seed, const fs::path& out, int class_id, std::ostream& log);

/// Keeps every input point and generates n_out − |input| new ones.
fs::path cmd_superres(const fs::path& checkpoint, const fs::path& input, const RunConfig& cfg, std::size_t n_out,
                      std::uint64_t seed, const fs::path& out, int class_id, std::ostream& log);

/// Clouds of differing sizes disable EMD and record why in the report.
metrics::MetricReport cmd_eval(const fs::path& gen_dir, const fs::path& ref_dir, int runs, std::uint64_t seed,
                               bool with_emd, const std::optional<fs::path>& out);

/// Writes the configured dataset as PLY files plus manifest.json.
fs::path cmd_synth(const RunConfig& cfg, const fs::path& out);

/// Resolved config and parameter counts of a config or a checkpoint.
nlohmann::json cmd_inspect(const RunConfig& cfg, const std::optional<fs::path>& checkpoint);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace spvd::cli
