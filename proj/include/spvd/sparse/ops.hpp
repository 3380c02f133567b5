#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "spvd/autodiff/tensor.hpp"
#include "spvd/sparse/grid.hpp"

namespace spvd::sparse {

/// Positions of B clouds with N points each, row-major (B·N) × 3, nominally
/// inside [-1, 1]³. Values outside are clamped when quantized.
template <typename T>
struct PointsView {
  std::span<const T> xyz;
  std::size_t batch = 0;
  std::size_t points = 0;

  std::size_t size() const { return batch * points; }
};

/// Per-point owner voxel and trilinear neighbourhood against one CoordSet.
struct Point2VoxelMap {
  CoordSetPtr grid;
  std::vector<std::int64_t> owner;
  /// Neighbour rows in (dx, dy, dz) bit order (bit 0 = dz); -1 when inactive.
  std::vector<std::array<std::int64_t, 8>> neighbors;
  std::vector<std::array<double, 8>> weights;
  /// Number of points owned by each voxel row.
  std::vector<std::int64_t> counts;
};

/// Base-grid voxel index of a coordinate: floor((p + 1) / 2 · resolution)
/// after clamping p to [-1, 1], clamped to [0, resolution - 1].
int quantize_axis(double p, int resolution);

/// Active coordinates of every sample at the given stride.
template <typename T>
CoordSetPtr quantize(const PointsView<T>& pts, int resolution, int stride = 1);

/// Owner rows and trilinear weights of every point against `grid`. Voxel
/// centres sit at (index + 0.5) in stride units. Throws IndexError when a
/// point's owner voxel is not in the set.
template <typename T>
Point2VoxelMap build_point_map(const PointsView<T>& pts, CoordSetPtr grid);

/// Mean of the point features owned by each voxel (zero for voxels that own
/// no point).
template <typename T>
ad::Tensor<T> voxel_mean(const ad::Tensor<T>& point_features, const Point2VoxelMap& map);

/// Quantizes at stride 1 and averages colliding point features.
template <typename T>
std::pair<SparseGrid<T>, Point2VoxelMap> voxelize(const PointsView<T>& pts, const ad::Tensor<T>& point_features,
                                                  int resolution);

/// Σ_c w_c · feature(c) over the present trilinear neighbours of each point.
/// Missing neighbours contribute nothing; weights are not renormalized.
template <typename T>
ad::Tensor<T> devoxelize_trilinear(const SparseGrid<T>& grid, const Point2VoxelMap& map);

/// Offset δ ∈ {-1, 0, 1}³ of kernel slot `k` (slot 13 is δ = 0).
std::array<int, 3> kernel_offset(int k);
constexpr int kKernelVolume = 27;

enum class ConvKind { kSubmanifold, kDownsample, kTranspose };

/// Input/output row pairs per kernel offset.
///
/// Pair relation (coordinates in each set's own stride units):
///   submanifold: c_in  = c_out + δ
///   downsample:  c_in  = 2·c_out + δ
///   transpose:   c_out = 2·c_in + δ
/// The transpose map is the downsample map with input and output swapped.
struct KernelMap {
  ConvKind kind = ConvKind::kSubmanifold;
  CoordSetPtr in;
  CoordSetPtr out;
  std::array<std::vector<std::pair<std::int64_t, std::int64_t>>, kKernelVolume> pairs;

  // CSR views used by the convolution kernels: contributions gathered per
  // output row and per input row, each entry (kernel slot, other row).
  std::vector<std::int64_t> out_offsets;
  std::vector<std::pair<std::int32_t, std::int64_t>> by_out;
  std::vector<std::int64_t> in_offsets;
  std::vector<std::pair<std::int32_t, std::int64_t>> by_in;

  std::size_t total_pairs() const { return by_out.size(); }
};

using KernelMapPtr = std::shared_ptr<const KernelMap>;

/// stride 1: submanifold. stride 2 without transpose: downsample onto
/// downscale(in). Transpose requires the cached finer coordinates.
KernelMapPtr build_kernel_map(CoordSetPtr in, int stride, bool transpose, CoordSetPtr out_coords = nullptr);

/// out[o] = bias + Σ_δ Σ_{(i,o) ∈ kmap[δ]} in[i] · W[δ], W of shape
/// [27, F_in, F_out]. bias may be undefined.
template <typename T>
SparseGrid<T> sparse_conv(const SparseGrid<T>& in, const ad::Tensor<T>& weights, const ad::Tensor<T>& bias,
                          const KernelMapPtr& kmap);

/// Scaled dot-product attention of Q, K, V rows restricted to each sample's
/// row range. Optionally returns the attention probabilities, laid out per
/// sample then per head as row-major n_b × n_b blocks.
template <typename T>
ad::Tensor<T> segment_attention(const ad::Tensor<T>& q, const ad::Tensor<T>& k, const ad::Tensor<T>& v,
                                std::span<const std::int64_t> row_offsets, std::size_t heads,
                                std::vector<T>* probabilities = nullptr);

/// x + attention(x·Wq, x·Wk, x·Wv)·Wo, computed independently per sample.
template <typename T>
SparseGrid<T> sparse_attention(const SparseGrid<T>& grid, const ad::Tensor<T>& wq, const ad::Tensor<T>& wk,
                               const ad::Tensor<T>& wv, const ad::Tensor<T>& wo, std::size_t heads,
                               std::vector<T>* probabilities = nullptr);

/// F'[r] = scale[b(r)] ⊙ F[r] + shift[b(r)], scale and shift of shape [B, F].
template <typename T>
SparseGrid<T> film_broadcast(const SparseGrid<T>& grid, const ad::Tensor<T>& scale, const ad::Tensor<T>& shift);

}  // namespace spvd::sparse
