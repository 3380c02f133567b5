#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "spvd/autodiff/tensor.hpp"
#include "spvd/common/rng.hpp"
#include "spvd/model/blocks.hpp"

namespace spvd::model {

enum class Resample { kNone, kDown, kUp };
/// Where a down block increases its width.
enum class WidenAt { kFirstConv, kDownsample };

struct BlockSpec {
  std::size_t dim = 0;
  bool project = false;
  Resample resample = Resample::kNone;
  bool attention = false;

  bool operator==(const BlockSpec&) const = default;
};

struct NetworkConfig {
  std::string preset = "custom";
  int base_resolution = 32;
  std::size_t time_embed_dim = 32;
  int num_classes = 0;
  int num_res_blocks = 1;
  WidenAt widen_at = WidenAt::kFirstConv;
  BlockSpec stem;
  std::vector<BlockSpec> down;
  std::optional<BlockSpec> mid;
  std::vector<BlockSpec> up;

  /// Throws ConfigError when the block list cannot form a U-Net.
  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

/// spvd-tiny, spvd-s, spvd-m or spvd-l.
NetworkConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

nlohmann::json to_json(const NetworkConfig& c);
/// Unknown keys are rejected. A "preset" key alone expands the preset; other
/// keys override its fields.
NetworkConfig network_config_from_json(const nlohmann::json& j);

template <typename T>
class Network {
 public:
  Network(const NetworkConfig& config, Rng& rng);

  const NetworkConfig& config() const { return config_; }
  NamedParams<T>& params() { return params_; }
  const NamedParams<T>& params() const { return params_; }
  std::size_t param_count() const;

  /// ε̂ for x_t rows (B·N × 3). `classes` must be empty for unconditional
  /// networks and hold one id per sample otherwise.
  Tensor<T> forward(const Tensor<T>& x_t, std::span<const int> t, std::span<const int> classes,
                    std::size_t batch) const;
  /// forward() without recording a graph.
  Tensor<T> predict(const Tensor<T>& x_t, std::span<const int> t, std::span<const int> classes,
                    std::size_t batch) const;

  /// [B, E] conditioning vector: time MLP plus the class row.
  Tensor<T> embed(std::span<const int> t, std::span<const int> classes) const;

 private:
  struct Block {
    BlockSpec spec;
    std::vector<ResBlock<T>> res;
    std::optional<Attention<T>> attention;
    std::optional<Conv<T>> resample;
    std::optional<PointMlp<T>> projection;
  };

  NetworkConfig config_;
  NamedParams<T> params_;
  Linear<T> time1_, time2_;
  Tensor<T> class_table_;
  Conv<T> stem_;
  std::optional<PointMlp<T>> stem_projection_;
  std::vector<Block> down_;
  std::optional<Block> mid_;
  std::vector<Block> up_;
  Linear<T> head_;
};

}  // namespace spvd::model
