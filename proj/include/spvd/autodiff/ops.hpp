#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "spvd/autodiff/tensor.hpp"

namespace spvd::ad {

// Broadcasting is limited to a per-row vector: an operand of shape [F] or
// [1, F] applied to every row of an [R, F] operand. Anything else is a
// DimensionError.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x·w + bias, with x [R, K], w [K, F], bias [F] (may be undefined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
/// scale ⊙ x + shift; scale and shift are same-shape or per-row vectors.
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift);
/// Multiplication by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Σ_r w_r Σ_c (pred - target)² / (C · Σ_r w_r). Row weights default to 1.
/// `target` is treated as a constant.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target, std::span<const T> row_weights = {});

enum class Reduce { kSum, kMean, kMax };

/// Aggregates rows of `values` [R, F] into `num_segments` rows. `ids` must be
/// sorted non-decreasing with every id in [0, num_segments). Empty segments
/// produce zero rows. Max routes the gradient to the first maximal row.
template <typename T>
Tensor<T> segment_reduce(const Tensor<T>& values, std::span<const std::int64_t> ids,
                         std::size_t num_segments, Reduce mode);

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int64_t> idx);

/// Copy of `base` with src row k added to row idx[k].
template <typename T>
Tensor<T> scatter_add(const Tensor<T>& base, std::span<const std::int64_t> idx, const Tensor<T>& src);

/// Group normalization with statistics per (sample, group): sample membership
/// of each row is given by `sample_ids` (any order). gamma, beta are [F].
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, std::span<const std::int64_t> sample_ids,
                     const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5);

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);

}  // namespace spvd::ad
