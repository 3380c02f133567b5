#pragma once

// Point-cloud files. XYZ is one "x y z" triple per line. The PLY subset is
// ascii or binary_little_endian with an element "vertex" holding float x, y,
// z; other elements and properties are skipped on read. An integer vertex
// property named "part" is read as per-point part ids and written back when
// the cloud carries them.

#include <filesystem>
#include <string>
#include <vector>

namespace spvd::data {

struct PointCloud {
  std::vector<float> xyz;  // N × 3
  std::vector<int> parts;  // empty or one id per point
  int class_id = 0;
  std::string name;

  std::size_t size() const { return xyz.size() / 3; }
  bool has_parts() const { return !parts.empty(); }
};

enum class PlyFormat { kAscii, kBinary };

PointCloud parse_xyz(const std::string& text);
PointCloud load_xyz(const std::filesystem::path& path);
void save_xyz(const PointCloud& cloud, const std::filesystem::path& path);

PointCloud parse_ply(const std::string& bytes);
PointCloud load_ply(const std::filesystem::path& path);
std::string format_ply(const PointCloud& cloud, PlyFormat format = PlyFormat::kBinary);
void save_ply(const PointCloud& cloud, const std::filesystem::path& path, PlyFormat format = PlyFormat::kBinary);

/// Dispatches on the extension (.ply or .xyz).
PointCloud load_cloud(const std::filesystem::path& path);

/// Every .ply / .xyz file directly inside `dir`, sorted by file name.
std::vector<std::filesystem::path> list_clouds(const std::filesystem::path& dir);

/// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace spvd::data
