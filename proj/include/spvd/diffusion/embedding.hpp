#pragma once

#include <span>

#include "spvd/autodiff/tensor.hpp"

namespace spvd::diffusion {

/// Interleaved sin/cos features, row b = [sin(t·ω₀), cos(t·ω₀), sin(t·ω₁), …]
/// with ωᵢ = 10000^(−i/(dim/2)). dim must be even.
template <typename T>
ad::Tensor<T> sinusoidal_embedding(std::span<const int> t, std::size_t dim);

/// Rows of a learned class table; throws ContractError for ids outside
/// [0, table rows).
template <typename T>
ad::Tensor<T> class_embedding(const ad::Tensor<T>& table, std::span<const int> classes);

}  // namespace spvd::diffusion
