#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spvd/common/error.hpp"

namespace spvd {

/// B clouds of N points each, row-major (B·N) × 3.
template <typename T>
struct PointBatch {
  std::size_t batch = 0;
  std::size_t points = 0;
  std::vector<T> xyz;

  PointBatch() = default;
  PointBatch(std::size_t b, std::size_t n) : batch(b), points(n), xyz(b * n * 3, T(0)) {}
  PointBatch(std::size_t b, std::size_t n, std::vector<T> values) : batch(b), points(n), xyz(std::move(values)) {
    if (xyz.size() != b * n * 3) throw DimensionError("point batch: value count does not match B·N·3");
  }

  std::size_t size() const { return batch * points; }
  std::span<T> cloud(std::size_t b) { return std::span<T>(xyz).subspan(b * points * 3, points * 3); }
  std::span<const T> cloud(std::size_t b) const { return std::span<const T>(xyz).subspan(b * points * 3, points * 3); }
};

/// A single cloud of N points (N × 3).
template <typename T>
using Cloud = std::vector<T>;

}  // namespace spvd
