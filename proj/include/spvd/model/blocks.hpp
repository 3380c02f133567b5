#pragma once

// Parameterized layers shared by the network: dense and sparse convolution
// weights, group norm, the FiLM-conditioned residual block, voxel attention
// and the point-branch projection that closes an SPV block.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spvd/autodiff/tensor.hpp"
#include "spvd/common/rng.hpp"
#include "spvd/sparse/ops.hpp"

namespace spvd::model {

using ad::Tensor;

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

/// Creates and names parameters. Weights are uniform in ±√(3 / fan_in)
/// (unit-variance outputs for unit-variance inputs); biases start at zero.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(Rng& rng) : rng_(rng) {}

  Tensor<T> weight(const std::string& name, ad::Shape shape, std::size_t fan_in);
  Tensor<T> constant(const std::string& name, ad::Shape shape, T value);

  NamedParams<T>& params() { return params_; }

 private:
  Tensor<T> add(const std::string& name, ad::Shape shape, std::vector<T> values);

  Rng& rng_;
  NamedParams<T> params_;
};

template <typename T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out] or undefined

  static Linear make(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, bool bias = true,
                     bool zero = false);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
struct Conv {
  Tensor<T> w;  // [27, in, out]
  Tensor<T> b;  // [out]

  static Conv make(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out);
  sparse::SparseGrid<T> operator()(const sparse::SparseGrid<T>& x, const sparse::KernelMapPtr& kmap) const;
};

template <typename T>
struct Norm {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::size_t groups = 1;

  static Norm make(ParamStore<T>& ps, const std::string& name, std::size_t width);
  sparse::SparseGrid<T> operator()(const sparse::SparseGrid<T>& x) const;
};

/// Residual conv block with FiLM time conditioning:
/// conv → norm → silu → FiLM → conv → norm → silu, plus the (optionally
/// projected) input.
template <typename T>
struct ResBlock {
  std::size_t in = 0;
  std::size_t out = 0;
  Conv<T> conv1, conv2;
  Norm<T> norm1, norm2;
  Linear<T> film1, film2;  // temb → hidden → [scale residual | shift]
  std::optional<Linear<T>> shortcut;

  static ResBlock make(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t temb_dim);
  /// `kmap` is the submanifold map of x's coordinates; `temb` is [B, E].
  sparse::SparseGrid<T> operator()(const sparse::SparseGrid<T>& x, const sparse::KernelMapPtr& kmap,
                                   const Tensor<T>& temb) const;
};

/// Self-attention over each sample's voxels with a residual connection.
template <typename T>
struct Attention {
  Tensor<T> wq, wk, wv, wo;
  std::size_t heads = 1;

  static Attention make(ParamStore<T>& ps, const std::string& name, std::size_t width);
  sparse::SparseGrid<T> operator()(const sparse::SparseGrid<T>& x) const;
};

/// Shared point MLP of an SPV block: Linear → silu → Linear.
template <typename T>
struct PointMlp {
  Linear<T> l1, l2;

  static PointMlp make(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out);
  /// MLP(point_features) + trilinear devoxelization of `grid`.
  Tensor<T> project(const Tensor<T>& point_features, const sparse::SparseGrid<T>& grid,
                    const sparse::Point2VoxelMap& map) const;
};

std::size_t heads_for(std::size_t width);
std::size_t groups_for(std::size_t width);

}  // namespace spvd::model
