#include "spvd/sparse/grid.hpp"

#include <algorithm>
#include <string>

#include "spvd/common/error.hpp"

namespace spvd::sparse {

namespace {
constexpr std::int64_t kMaxExtent = 1 << 16;
}

CoordSetPtr CoordSet::create(std::vector<Coord> coords, int resolution, int stride, std::size_t batch_size) {
  if (resolution < 2) throw ConfigError("voxel resolution must be at least 2");
  if (stride < 1 || resolution % stride != 0) {
    throw ConfigError("stride " + std::to_string(stride) + " does not divide resolution " +
                      std::to_string(resolution));
  }
  if (resolution > kMaxExtent || batch_size > static_cast<std::size_t>(kMaxExtent)) {
    throw ConfigError("grid too large for exact coordinate packing");
  }
  std::shared_ptr<CoordSet> set(new CoordSet());
  set->resolution_ = resolution;
  set->stride_ = stride;
  const int extent = resolution / stride;
  for (const auto& c : coords) {
    if (c[0] < 0 || static_cast<std::size_t>(c[0]) >= batch_size) {
      throw IndexError("coordinate batch index " + std::to_string(c[0]) + " outside batch");
    }
    for (int a = 1; a < 4; ++a) {
      if (c[a] < 0 || c[a] >= extent) {
        throw IndexError("coordinate " + std::to_string(c[a]) + " outside grid extent " + std::to_string(extent));
      }
    }
  }
  std::sort(coords.begin(), coords.end());
  if (std::adjacent_find(coords.begin(), coords.end()) != coords.end()) {
    throw ContractError("duplicate voxel coordinates");
  }
  set->coords_ = std::move(coords);
  set->index_.reserve(set->coords_.size() * 2);
  set->batch_ids_.resize(set->coords_.size());
  set->row_offsets_.assign(batch_size + 1, 0);
  for (std::size_t r = 0; r < set->coords_.size(); ++r) {
    const Coord& c = set->coords_[r];
    set->index_.emplace(set->key(c), static_cast<std::int64_t>(r));
    set->batch_ids_[r] = c[0];
    ++set->row_offsets_[static_cast<std::size_t>(c[0]) + 1];
  }
  for (std::size_t b = 0; b < batch_size; ++b) set->row_offsets_[b + 1] += set->row_offsets_[b];
  return set;
}

std::uint64_t CoordSet::key(const Coord& c) const {
  return (static_cast<std::uint64_t>(c[0]) << 48) | (static_cast<std::uint64_t>(c[1]) << 32) |
         (static_cast<std::uint64_t>(c[2]) << 16) | static_cast<std::uint64_t>(c[3]);
}

std::int64_t CoordSet::find(const Coord& c) const {
  const int e = extent();
  if (c[0] < 0 || static_cast<std::size_t>(c[0]) >= batch_size()) return -1;
  for (int a = 1; a < 4; ++a) {
    if (c[a] < 0 || c[a] >= e) return -1;
  }
  auto it = index_.find(key(c));
  return it == index_.end() ? -1 : it->second;
}

bool CoordSet::same_coords(const CoordSet& other) const {
  return stride_ == other.stride_ && resolution_ == other.resolution_ && coords_ == other.coords_ &&
         batch_size() == other.batch_size();
}

CoordSetPtr downscale(const CoordSet& in) {
  if (in.extent() % 2 != 0) throw ConfigError("cannot downsample a grid of odd extent");
  std::vector<Coord> out;
  out.reserve(in.size());
  for (const auto& c : in.coords()) out.push_back({c[0], c[1] / 2, c[2] / 2, c[3] / 2});
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return CoordSet::create(std::move(out), in.resolution(), in.stride() * 2, in.batch_size());
}

}  // namespace spvd::sparse
