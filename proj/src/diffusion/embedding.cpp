#include "spvd/diffusion/embedding.hpp"

#include <cmath>
#include <vector>

#include "spvd/autodiff/ops.hpp"
#include "spvd/common/error.hpp"

namespace spvd::diffusion {

template <typename T>
ad::Tensor<T> sinusoidal_embedding(std::span<const int> t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("time embedding width must be even and positive");
  const std::size_t half = dim / 2;
  std::vector<T> out(t.size() * dim);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
      out[b * dim + 2 * i] = static_cast<T>(std::sin(t[b] * w));
      out[b * dim + 2 * i + 1] = static_cast<T>(std::cos(t[b] * w));
    }
  }
  return ad::Tensor<T>::constant({t.size(), dim}, std::move(out));
}

template <typename T>
ad::Tensor<T> class_embedding(const ad::Tensor<T>& table, std::span<const int> classes) {
  std::vector<std::int64_t> idx(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= table.rows()) {
      throw ContractError("unknown class id " + std::to_string(classes[i]));
    }
    idx[i] = classes[i];
  }
  return ad::gather_rows(table, idx);
}

template ad::Tensor<float> sinusoidal_embedding(std::span<const int>, std::size_t);
template ad::Tensor<double> sinusoidal_embedding(std::span<const int>, std::size_t);
template ad::Tensor<float> class_embedding(const ad::Tensor<float>&, std::span<const int>);
template ad::Tensor<double> class_embedding(const ad::Tensor<double>&, std::span<const int>);

}  // namespace spvd::diffusion
