#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace spvd {

using Rng = std::mt19937_64;

/// Derives an independent, reproducible generator for a named sub-stream of a
/// run seed ("data", "noise", "mask", ...).
inline Rng make_stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
  // FNV-1a over the stream name.
  std::uint64_t h = 1469598103934665603ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

template <typename T>
std::vector<T> standard_normal(Rng& rng, std::size_t n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace spvd
