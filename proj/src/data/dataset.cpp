#include "spvd/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

#include "spvd/common/error.hpp"

namespace spvd::data {

namespace {

using Vec3 = std::array<double, 3>;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

void push(std::vector<float>& xyz, const Vec3& p) {
  for (double v : p) xyz.push_back(static_cast<float>(v));
}

// n points uniform over the surface of an axis-aligned box.
void box_surface(std::vector<float>& xyz, std::size_t n, const Vec3& c, const Vec3& h, Rng& rng) {
  const std::array<double, 3> areas{h[1] * h[2], h[0] * h[2], h[0] * h[1]};
  std::discrete_distribution<int> face(areas.begin(), areas.end());
  for (std::size_t i = 0; i < n; ++i) {
    const int axis = face(rng);
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = c[a] + uniform(rng, -h[a], h[a]);
    p[axis] = c[axis] + (uniform(rng, 0, 1) < 0.5 ? -h[axis] : h[axis]);
    push(xyz, p);
  }
}

// n points over a closed cylinder along y.
void cylinder_surface(std::vector<float>& xyz, std::size_t n, const Vec3& c, double r, double half_h, Rng& rng) {
  const double side = 2 * std::numbers::pi * r * 2 * half_h;
  const double cap = std::numbers::pi * r * r;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform(rng, 0, side + 2 * cap);
    const double th = uniform(rng, 0, 2 * std::numbers::pi);
    if (u < side) {
      push(xyz, {c[0] + r * std::cos(th), c[1] + uniform(rng, -half_h, half_h), c[2] + r * std::sin(th)});
    } else {
      const double rr = r * std::sqrt(uniform(rng, 0, 1));
      const double y = u < side + cap ? c[1] - half_h : c[1] + half_h;
      push(xyz, {c[0] + rr * std::cos(th), y, c[2] + rr * std::sin(th)});
    }
  }
}

void label(std::vector<int>& parts, std::size_t n, int id) { parts.insert(parts.end(), n, id); }

PointCloud chairoid(std::size_t n, Rng& rng) {
  PointCloud c;
  const std::size_t leg_n = n / 8, back_n = n / 4, seat_n = n - back_n - 4 * leg_n;
  const double w = uniform(rng, 0.4, 0.6), d = uniform(rng, 0.4, 0.6);
  const double leg_h = uniform(rng, 0.6, 1.0), back_h = uniform(rng, 0.6, 1.1);
  const double t = 0.04, s = uniform(rng, 0.03, 0.05);
  box_surface(c.xyz, seat_n, {0, leg_h + t, 0}, {w, t, d}, rng);
  label(c.parts, seat_n, kSeat);
  box_surface(c.xyz, back_n, {0, leg_h + 2 * t + back_h / 2, -d + t}, {w, back_h / 2, t}, rng);
  label(c.parts, back_n, kBack);
  int leg = 0;
  for (double sx : {-1.0, 1.0})
    for (double sz : {-1.0, 1.0}) {
      box_surface(c.xyz, leg_n, {sx * (w - s), leg_h / 2, sz * (d - s)}, {s, leg_h / 2, s}, rng);
      label(c.parts, leg_n, kChairLeg1 + leg++);
    }
  return c;
}

PointCloud tableoid(std::size_t n, Rng& rng) {
  PointCloud c;
  const std::size_t leg_n = n * 15 / 100, top_n = n - 4 * leg_n;
  const double w = uniform(rng, 0.6, 0.9), d = uniform(rng, 0.4, 0.6);
  const double leg_h = uniform(rng, 0.7, 1.0), r = uniform(rng, 0.03, 0.06), t = 0.04;
  box_surface(c.xyz, top_n, {0, leg_h + t, 0}, {w, t, d}, rng);
  label(c.parts, top_n, kTop);
  int leg = 0;
  for (double sx : {-1.0, 1.0})
    for (double sz : {-1.0, 1.0}) {
      cylinder_surface(c.xyz, leg_n, {sx * (w - 2 * r), leg_h / 2, sz * (d - 2 * r)}, r, leg_h / 2, rng);
      label(c.parts, leg_n, kTableLeg1 + leg++);
    }
  return c;
}

}  // namespace

ShapeKind parse_shape_kind(const std::string& name) {
  for (auto k : all_shape_kinds())
    if (to_string(k) == name) return k;
  throw ConfigError("unknown shape kind '" + name + "'");
}

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::kSphere: return "sphere";
    case ShapeKind::kBox: return "box";
    case ShapeKind::kCylinder: return "cylinder";
    case ShapeKind::kChairoid: return "chairoid";
    case ShapeKind::kTableoid: return "tableoid";
  }
  return "?";
}

std::vector<ShapeKind> all_shape_kinds() {
  return {ShapeKind::kSphere, ShapeKind::kBox, ShapeKind::kCylinder, ShapeKind::kChairoid, ShapeKind::kTableoid};
}

NormMode parse_norm_mode(const std::string& name) {
  if (name == "per_shape_unit_box") return NormMode::kUnitBox;
  if (name == "per_shape_unit_sphere") return NormMode::kUnitSphere;
  throw ConfigError("unknown normalization '" + name + "'");
}

std::string to_string(NormMode m) { return m == NormMode::kUnitBox ? "per_shape_unit_box" : "per_shape_unit_sphere"; }

std::vector<float> Normalization::inverse(const std::vector<float>& xyz) const {
  std::vector<float> out(xyz.size());
  for (std::size_t i = 0; i < xyz.size(); ++i) out[i] = xyz[i] * scale + center[i % 3];
  return out;
}

PointCloud synth_shape(ShapeKind kind, std::size_t n, Rng& rng) {
  if (n < 64) throw ContractError("synthetic shapes need at least 64 points");
  PointCloud c;
  switch (kind) {
    case ShapeKind::kSphere: {
      std::normal_distribution<double> g(0, 1);
      for (std::size_t i = 0; i < n; ++i) {
        Vec3 p{g(rng), g(rng), g(rng)};
        const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        push(c.xyz, {p[0] / r, p[1] / r, p[2] / r});
      }
      break;
    }
    case ShapeKind::kBox:
      box_surface(c.xyz, n, {0, 0, 0}, {uniform(rng, 0.3, 1), uniform(rng, 0.3, 1), uniform(rng, 0.3, 1)}, rng);
      break;
    case ShapeKind::kCylinder:
      cylinder_surface(c.xyz, n, {0, 0, 0}, uniform(rng, 0.3, 0.8), uniform(rng, 0.4, 1), rng);
      break;
    case ShapeKind::kChairoid: c = chairoid(n, rng); break;
    case ShapeKind::kTableoid: c = tableoid(n, rng); break;
  }
  c.class_id = static_cast<int>(kind);
  c.name = to_string(kind);
  return c;
}

Dataset synth_dataset(ShapeKind kind, std::size_t n_shapes, std::size_t n_points, std::uint64_t seed, NormMode mode) {
  return synth_dataset(std::vector<ShapeKind>{kind}, n_shapes, n_points, seed, mode);
}

Dataset synth_dataset(const std::vector<ShapeKind>& kinds, std::size_t n_shapes, std::size_t n_points,
                      std::uint64_t seed, NormMode mode) {
  if (kinds.empty()) throw ConfigError("synthetic dataset needs at least one shape kind");
  Dataset d;
  d.mode = mode;
  for (std::size_t i = 0; i < n_shapes; ++i) {
    Rng rng = make_stream(seed, "data", i);
    auto shape = synth_shape(kinds[i % kinds.size()], n_points, rng);
    auto [xyz, norm] = normalize(shape.xyz, mode);
    shape.xyz = std::move(xyz);
    shape.name += "_" + std::to_string(i);
    d.shapes.push_back(std::move(shape));
    d.norms.push_back(norm);
  }
  return d;
}

std::pair<std::vector<float>, Normalization> normalize(const std::vector<float>& xyz, NormMode mode) {
  if (xyz.empty() || xyz.size() % 3 != 0) throw ContractError("normalize: expected a non-empty N × 3 cloud");
  std::array<float, 3> lo{xyz[0], xyz[1], xyz[2]}, hi = lo;
  for (std::size_t i = 0; i < xyz.size(); ++i) {
    lo[i % 3] = std::min(lo[i % 3], xyz[i]);
    hi[i % 3] = std::max(hi[i % 3], xyz[i]);
  }
  Normalization n;
  double half = 0;
  for (int a = 0; a < 3; ++a) {
    n.center[a] = static_cast<float>((static_cast<double>(lo[a]) + hi[a]) / 2);
    half = std::max(half, (static_cast<double>(hi[a]) - lo[a]) / 2);
  }
  if (!(half > 0)) throw ContractError("normalize: cloud has zero extent");
  double scale = half;
  if (mode == NormMode::kUnitSphere) {
    scale = 0;
    for (std::size_t i = 0; i < xyz.size(); i += 3) {
      double r2 = 0;
      for (int a = 0; a < 3; ++a) r2 += std::pow(static_cast<double>(xyz[i + a]) - n.center[a], 2);
      scale = std::max(scale, std::sqrt(r2));
    }
  }
  n.scale = static_cast<float>(scale);
  std::vector<float> out(xyz.size());
  for (std::size_t i = 0; i < xyz.size(); ++i) {
    const float v = static_cast<float>((static_cast<double>(xyz[i]) - n.center[i % 3]) / scale);
    out[i] = std::clamp(v, -1.0f, 1.0f);
  }
  return {out, n};
}

Dataset load_manifest(const std::filesystem::path& path, NormMode mode) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("shapes") || !j["shapes"].is_array())
    throw ConfigError("manifest " + path.string() + ": expected {\"shapes\": [...]}");
  Dataset d;
  d.mode = mode;
  for (const auto& entry : j["shapes"]) {
    if (!entry.is_object() || !entry.contains("path")) throw ConfigError("manifest entry lacks \"path\"");
    for (const auto& [k, _] : entry.items())
      if (k != "path" && k != "class") throw ConfigError("manifest entry: unknown key '" + k + "'");
    auto cloud = load_cloud(path.parent_path() / entry["path"].get<std::string>());
    cloud.class_id = entry.value("class", 0);
    auto [xyz, norm] = normalize(cloud.xyz, mode);
    cloud.xyz = std::move(xyz);
    d.shapes.push_back(std::move(cloud));
    d.norms.push_back(norm);
  }
  return d;
}

Dataset resample_points(const Dataset& d, std::size_t n_points, Rng& rng) {
  Dataset out = d;
  for (auto& s : out.shapes) {
    const std::size_t n = s.size();
    if (n < n_points)
      throw ContractError("shape '" + s.name + "' has " + std::to_string(n) + " points, fewer than " +
                          std::to_string(n_points));
    if (n == n_points) continue;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n_points);
    std::sort(idx.begin(), idx.end());
    PointCloud r;
    r.class_id = s.class_id;
    r.name = s.name;
    for (auto i : idx) {
      r.xyz.insert(r.xyz.end(), s.xyz.begin() + i * 3, s.xyz.begin() + i * 3 + 3);
      if (s.has_parts()) r.parts.push_back(s.parts[i]);
    }
    s = std::move(r);
  }
  return out;
}

std::vector<int> merge_small_parts(const std::vector<int>& parts) {
  std::map<int, std::size_t> counts;
  for (int p : parts) ++counts[p];
  if (counts.empty()) return parts;
  int largest = counts.begin()->first;
  for (const auto& [id, c] : counts)
    if (c > counts[largest]) largest = id;
  std::vector<int> out = parts;
  for (auto& p : out)
    if (counts[p] * 50 < parts.size()) p = largest;
  return out;
}

diffusion::SampleMask sample_part_mask(const std::vector<int>& parts, int m, Rng& rng) {
  if (m < 1) throw ContractError("part mask: m must be at least 1");
  const auto merged = merge_small_parts(parts);
  std::vector<int> ids(merged);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() <= 1) throw ContractError("part mask: shape has fewer than two parts");
  if (ids.size() <= static_cast<std::size_t>(m))
    throw ContractError("part mask: shape has " + std::to_string(ids.size()) + " parts, needs more than m = " +
                        std::to_string(m));
  const int k = std::uniform_int_distribution<int>(1, m)(rng);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(k));
  diffusion::SampleMask mask{1, parts.size(), std::vector<std::uint8_t>(parts.size(), 1)};
  for (std::size_t i = 0; i < merged.size(); ++i)
    if (std::find(ids.begin(), ids.end(), merged[i]) != ids.end()) mask.known[i] = 0;
  return mask;
}

Subset random_subset(const std::vector<float>& xyz, std::size_t k, std::size_t n_out, Rng& rng) {
  const std::size_t n = xyz.size() / 3;
  if (k >= n_out) throw ContractError("subset: k must be smaller than the output size");
  if (k > n) throw ContractError("subset: k exceeds the cloud size");
  if (k == 0) throw ContractError("subset: k must be positive");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  Subset s;
  for (std::size_t i = 0; i < k; ++i) s.known.insert(s.known.end(), xyz.begin() + idx[i] * 3, xyz.begin() + idx[i] * 3 + 3);
  s.mask = {1, n_out, std::vector<std::uint8_t>(n_out, 0)};
  std::fill(s.mask.known.begin(), s.mask.known.begin() + static_cast<std::ptrdiff_t>(k), 1);
  return s;
}

}  // namespace spvd::data
