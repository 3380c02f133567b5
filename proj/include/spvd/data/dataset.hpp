#pragma once

// Synthetic shape collections, per-shape normalization and the masks that
// drive completion and super-resolution.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "spvd/common/rng.hpp"
#include "spvd/data/io.hpp"
#include "spvd/diffusion/diffusion.hpp"

namespace spvd::data {

enum class ShapeKind { kSphere, kBox, kCylinder, kChairoid, kTableoid };

ShapeKind parse_shape_kind(const std::string& name);
std::string to_string(ShapeKind k);
std::vector<ShapeKind> all_shape_kinds();

/// Part labels of the composite shapes.
enum ChairPart { kSeat = 0, kBack = 1, kChairLeg1 = 2 };
enum TablePart { kTop = 0, kTableLeg1 = 1 };

enum class NormMode { kUnitBox, kUnitSphere };

NormMode parse_norm_mode(const std::string& name);
std::string to_string(NormMode m);

/// x' = (x − center) / scale.
struct Normalization {
  std::array<float, 3> center{0, 0, 0};
  float scale = 1;

  std::vector<float> inverse(const std::vector<float>& xyz) const;
};

struct Dataset {
  std::vector<PointCloud> shapes;
  std::vector<Normalization> norms;  // one per shape
  NormMode mode = NormMode::kUnitBox;

  std::size_t size() const { return shapes.size(); }
};

/// Raw (unnormalized) shape of one kind. The class id is the kind's index.
PointCloud synth_shape(ShapeKind kind, std::size_t n_points, Rng& rng);

/// n_shapes normalized shapes of one kind, shape i drawn from stream
/// ("data", i) of `seed`.
Dataset synth_dataset(ShapeKind kind, std::size_t n_shapes, std::size_t n_points, std::uint64_t seed,
                      NormMode mode = NormMode::kUnitBox);
/// Cycles through `kinds` for shape i.
Dataset synth_dataset(const std::vector<ShapeKind>& kinds, std::size_t n_shapes, std::size_t n_points,
                      std::uint64_t seed, NormMode mode = NormMode::kUnitBox);

/// Unit box: bounding-box centre to the origin, maximum half-extent to 1.
/// Unit sphere: bounding-box centre to the origin, farthest point to radius 1.
std::pair<std::vector<float>, Normalization> normalize(const std::vector<float>& xyz, NormMode mode);

/// Dataset from a manifest {"shapes": [{"path": ..., "class": ...}, ...]}
/// whose paths are relative to the manifest's directory.
Dataset load_manifest(const std::filesystem::path& path, NormMode mode = NormMode::kUnitBox);

/// Shapes with fewer points than `n_points` are rejected; larger ones are
/// subsampled without replacement.
Dataset resample_points(const Dataset& d, std::size_t n_points, Rng& rng);

/// Parts holding under 2 % of the points are merged into the largest part.
std::vector<int> merge_small_parts(const std::vector<int>& parts);

/// k ~ U{1..m} distinct parts become FREE, every other point KNOWN.
diffusion::SampleMask sample_part_mask(const std::vector<int>& parts, int m, Rng& rng);

struct Subset {
  std::vector<float> known;  // k × 3
  diffusion::SampleMask mask;  // k KNOWN followed by n_out − k FREE
};

Subset random_subset(const std::vector<float>& xyz, std::size_t k, std::size_t n_out, Rng& rng);

}  // namespace spvd::data
