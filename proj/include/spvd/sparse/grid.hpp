#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "spvd/autodiff/tensor.hpp"

namespace spvd::sparse {

/// (batch index, i, j, k) in units of the owning set's stride.
using Coord = std::array<std::int32_t, 4>;

/// Immutable set of active voxel coordinates at one stride.
///
/// Rows are sorted lexicographically by (b, i, j, k), so all rows of a sample
/// are contiguous and batch indices are non-decreasing. Lookup is an exact
/// map keyed on the packed coordinate.
class CoordSet {
 public:
  /// Validates bounds and uniqueness; sorts into canonical order.
  static std::shared_ptr<const CoordSet> create(std::vector<Coord> coords, int resolution, int stride,
                                                std::size_t batch_size);

  std::span<const Coord> coords() const { return coords_; }
  const Coord& operator[](std::size_t row) const { return coords_[row]; }
  std::size_t size() const { return coords_.size(); }
  int resolution() const { return resolution_; }
  int stride() const { return stride_; }
  /// Voxels per axis at this stride.
  int extent() const { return resolution_ / stride_; }
  std::size_t batch_size() const { return row_offsets_.size() - 1; }

  /// Row of a coordinate, or -1 when inactive (including out-of-range queries).
  std::int64_t find(const Coord& c) const;

  /// Batch index per row.
  std::span<const std::int64_t> batch_ids() const { return batch_ids_; }
  /// Rows [offsets[b], offsets[b+1]) belong to sample b.
  std::span<const std::int64_t> row_offsets() const { return row_offsets_; }

  bool same_coords(const CoordSet& other) const;

 private:
  CoordSet() = default;
  std::uint64_t key(const Coord& c) const;

  std::vector<Coord> coords_;
  int resolution_ = 0;
  int stride_ = 1;
  std::unordered_map<std::uint64_t, std::int64_t> index_;
  std::vector<std::int64_t> batch_ids_;
  std::vector<std::int64_t> row_offsets_;
};

using CoordSetPtr = std::shared_ptr<const CoordSet>;

/// Feature rows aligned one-to-one with a coordinate set.
template <typename T>
struct SparseGrid {
  CoordSetPtr coords;
  ad::Tensor<T> features;

  std::size_t rows() const { return coords->size(); }
  std::size_t width() const { return features.cols(); }
};

/// Distinct floor(c / 2) coordinates of every sample: the output set of a
/// stride-2 downsampling convolution.
CoordSetPtr downscale(const CoordSet& in);

}  // namespace spvd::sparse
