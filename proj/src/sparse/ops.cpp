#include "spvd/sparse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spvd/autodiff/ops.hpp"
#include "spvd/common/error.hpp"

namespace spvd::sparse {

using ad::Node;
using ad::Tensor;

int quantize_axis(double p, int resolution) {
  const double c = std::clamp(p, -1.0, 1.0);
  const int idx = static_cast<int>(std::floor((c + 1.0) * 0.5 * resolution));
  return std::clamp(idx, 0, resolution - 1);
}

namespace {

template <typename T>
void check_points(const PointsView<T>& pts) {
  if (pts.xyz.size() != pts.size() * 3) {
    throw DimensionError("point buffer holds " + std::to_string(pts.xyz.size()) + " values, expected " +
                         std::to_string(pts.size() * 3));
  }
}

template <typename T>
Coord owner_coord(const PointsView<T>& pts, std::size_t p, int resolution, int stride) {
  const auto b = static_cast<std::int32_t>(p / pts.points);
  Coord c{b, 0, 0, 0};
  for (int a = 0; a < 3; ++a) c[a + 1] = quantize_axis(pts.xyz[p * 3 + a], resolution) / stride;
  return c;
}

}  // namespace

template <typename T>
CoordSetPtr quantize(const PointsView<T>& pts, int resolution, int stride) {
  check_points(pts);
  if (resolution < 2) throw ConfigError("voxel resolution must be at least 2");
  std::vector<Coord> coords;
  coords.reserve(pts.size());
  for (std::size_t p = 0; p < pts.size(); ++p) coords.push_back(owner_coord(pts, p, resolution, stride));
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return CoordSet::create(std::move(coords), resolution, stride, pts.batch);
}

template <typename T>
Point2VoxelMap build_point_map(const PointsView<T>& pts, CoordSetPtr grid) {
  check_points(pts);
  if (grid->batch_size() != pts.batch) throw DimensionError("point batch does not match grid batch size");
  const int res = grid->resolution();
  const int stride = grid->stride();
  const int extent = grid->extent();
  Point2VoxelMap map;
  map.grid = grid;
  const std::size_t n = pts.size();
  map.owner.resize(n);
  map.neighbors.resize(n);
  map.weights.resize(n);
  map.counts.assign(grid->size(), 0);
  for (std::size_t p = 0; p < n; ++p) {
    const Coord oc = owner_coord(pts, p, res, stride);
    const std::int64_t row = grid->find(oc);
    if (row < 0) throw IndexError("point " + std::to_string(p) + " has no active owner voxel");
    map.owner[p] = row;
    ++map.counts[static_cast<std::size_t>(row)];

    std::array<int, 3> lo{};
    std::array<double, 3> frac{};
    for (int a = 0; a < 3; ++a) {
      const double c = std::clamp(static_cast<double>(pts.xyz[p * 3 + a]), -1.0, 1.0);
      double u = (c + 1.0) * 0.5 * res / stride;
      u = std::clamp(u, 0.5, extent - 0.5) - 0.5;
      const double fl = std::floor(u);
      lo[a] = static_cast<int>(fl);
      frac[a] = u - fl;
    }
    for (int nb = 0; nb < 8; ++nb) {
      const int dx = (nb >> 2) & 1, dy = (nb >> 1) & 1, dz = nb & 1;
      const double w = (dx ? frac[0] : 1.0 - frac[0]) * (dy ? frac[1] : 1.0 - frac[1]) *
                       (dz ? frac[2] : 1.0 - frac[2]);
      const Coord c{oc[0], lo[0] + dx, lo[1] + dy, lo[2] + dz};
      map.neighbors[p][nb] = grid->find(c);
      map.weights[p][nb] = w;
    }
  }
  return map;
}

template <typename T>
Tensor<T> voxel_mean(const Tensor<T>& point_features, const Point2VoxelMap& map) {
  const std::size_t n = map.owner.size();
  if (point_features.rank() != 2 || point_features.dim(0) != n) {
    throw DimensionError("voxel_mean: expected one feature row per mapped point");
  }
  const std::size_t f = point_features.dim(1);
  const std::size_t v = map.grid->size();
  const auto pv = point_features.data();
  std::vector<T> out(v * f, T(0));
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t r = static_cast<std::size_t>(map.owner[p]);
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] += pv[p * f + j];
  }
  for (std::size_t r = 0; r < v; ++r) {
    if (map.counts[r] == 0) continue;
    const T c = static_cast<T>(map.counts[r]);
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] /= c;
  }
  std::vector<std::int64_t> owner = map.owner, counts = map.counts;
  return ad::make_result<T>("voxel_mean", {v, f}, std::move(out), {point_features},
                            [=, owner = std::move(owner), counts = std::move(counts)](Node<T>& self) {
                              auto& g = self.inputs[0]->ensure_grad();
                              for (std::size_t p = 0; p < n; ++p) {
                                const std::size_t r = static_cast<std::size_t>(owner[p]);
                                const T inv = T(1) / static_cast<T>(counts[r]);
                                for (std::size_t j = 0; j < f; ++j) g[p * f + j] += inv * self.grad[r * f + j];
                              }
                            });
}

template <typename T>
std::pair<SparseGrid<T>, Point2VoxelMap> voxelize(const PointsView<T>& pts, const Tensor<T>& point_features,
                                                  int resolution) {
  auto coords = quantize(pts, resolution, 1);
  auto map = build_point_map(pts, coords);
  SparseGrid<T> grid{coords, voxel_mean(point_features, map)};
  return {std::move(grid), std::move(map)};
}

template <typename T>
Tensor<T> devoxelize_trilinear(const SparseGrid<T>& grid, const Point2VoxelMap& map) {
  const std::size_t n = map.neighbors.size();
  const std::size_t v = grid.rows();
  const std::size_t f = grid.width();
  if (grid.features.dim(0) != v) throw DimensionError("devoxelize: grid features do not match coordinates");
  for (const auto& nb : map.neighbors) {
    for (auto r : nb) {
      if (r >= static_cast<std::int64_t>(v)) throw IndexError("devoxelize: point map is stale for this grid");
    }
  }
  const auto gv = grid.features.data();
  std::vector<T> out(n * f, T(0));
  for (std::size_t p = 0; p < n; ++p) {
    T* row = out.data() + p * f;
    for (int k = 0; k < 8; ++k) {
      const auto r = map.neighbors[p][k];
      const T w = static_cast<T>(map.weights[p][k]);
      if (r < 0 || w == T(0)) continue;
      const T* src = gv.data() + static_cast<std::size_t>(r) * f;
      for (std::size_t j = 0; j < f; ++j) row[j] += w * src[j];
    }
  }
  auto neighbors = map.neighbors;
  auto weights = map.weights;
  return ad::make_result<T>(
      "devoxelize", {n, f}, std::move(out), {grid.features},
      [=, neighbors = std::move(neighbors), weights = std::move(weights)](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t p = 0; p < n; ++p) {
          const T* gp = self.grad.data() + p * f;
          for (int k = 0; k < 8; ++k) {
            const auto r = neighbors[p][k];
            const T w = static_cast<T>(weights[p][k]);
            if (r < 0 || w == T(0)) continue;
            T* dst = g.data() + static_cast<std::size_t>(r) * f;
            for (std::size_t j = 0; j < f; ++j) dst[j] += w * gp[j];
          }
        }
      });
}

std::array<int, 3> kernel_offset(int k) { return {k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1}; }

namespace {

void build_csr(std::size_t rows, const std::array<std::vector<std::pair<std::int64_t, std::int64_t>>, 27>& pairs,
               bool by_output, std::vector<std::int64_t>& offsets,
               std::vector<std::pair<std::int32_t, std::int64_t>>& entries) {
  offsets.assign(rows + 1, 0);
  for (const auto& list : pairs) {
    for (const auto& [i, o] : list) ++offsets[static_cast<std::size_t>(by_output ? o : i) + 1];
  }
  for (std::size_t r = 0; r < rows; ++r) offsets[r + 1] += offsets[r];
  entries.resize(static_cast<std::size_t>(offsets[rows]));
  std::vector<std::int64_t> fill(offsets.begin(), offsets.end() - 1);
  for (int k = 0; k < kKernelVolume; ++k) {
    for (const auto& [i, o] : pairs[k]) {
      const std::size_t key = static_cast<std::size_t>(by_output ? o : i);
      entries[static_cast<std::size_t>(fill[key]++)] = {k, by_output ? i : o};
    }
  }
}

}  // namespace

KernelMapPtr build_kernel_map(CoordSetPtr in, int stride, bool transpose, CoordSetPtr out_coords) {
  if (!in) throw ContractError("build_kernel_map: missing input coordinates");
  if (stride != 1 && stride != 2) throw ConfigError("kernel map stride must be 1 or 2");
  KernelMap km;
  km.in = in;
  if (transpose) {
    if (!out_coords) throw ContractError("transposed kernel map requires the cached output coordinates");
    if (stride != 2 || out_coords->stride() * 2 != in->stride() || out_coords->resolution() != in->resolution() ||
        out_coords->batch_size() != in->batch_size()) {
      throw ContractError("transposed kernel map: output coordinates are not at half the input stride");
    }
    km.kind = ConvKind::kTranspose;
    km.out = out_coords;
    // For each fine output voxel f and offset δ, the coarse parent c with f = 2c + δ.
    for (std::size_t o = 0; o < out_coords->size(); ++o) {
      const Coord& f = (*out_coords)[o];
      for (int k = 0; k < kKernelVolume; ++k) {
        const auto d = kernel_offset(k);
        Coord c{f[0], 0, 0, 0};
        bool integral = true;
        for (int a = 0; a < 3; ++a) {
          const int diff = f[a + 1] - d[a];
          if (diff % 2 != 0) integral = false;
          c[a + 1] = diff / 2;
        }
        if (!integral) continue;
        const auto i = in->find(c);
        if (i >= 0) km.pairs[k].emplace_back(i, static_cast<std::int64_t>(o));
      }
    }
  } else if (stride == 1) {
    if (out_coords && !out_coords->same_coords(*in)) {
      throw ContractError("submanifold convolution outputs onto its input coordinates");
    }
    km.kind = ConvKind::kSubmanifold;
    km.out = in;
    for (std::size_t o = 0; o < in->size(); ++o) {
      const Coord& c = (*in)[o];
      for (int k = 0; k < kKernelVolume; ++k) {
        const auto d = kernel_offset(k);
        const auto i = in->find({c[0], c[1] + d[0], c[2] + d[1], c[3] + d[2]});
        if (i >= 0) km.pairs[k].emplace_back(i, static_cast<std::int64_t>(o));
      }
    }
  } else {
    km.kind = ConvKind::kDownsample;
    km.out = out_coords ? out_coords : downscale(*in);
    for (std::size_t o = 0; o < km.out->size(); ++o) {
      const Coord& c = (*km.out)[o];
      for (int k = 0; k < kKernelVolume; ++k) {
        const auto d = kernel_offset(k);
        const auto i = in->find({c[0], 2 * c[1] + d[0], 2 * c[2] + d[1], 2 * c[3] + d[2]});
        if (i >= 0) km.pairs[k].emplace_back(i, static_cast<std::int64_t>(o));
      }
    }
  }
  build_csr(km.out->size(), km.pairs, true, km.out_offsets, km.by_out);
  build_csr(km.in->size(), km.pairs, false, km.in_offsets, km.by_in);
  return std::make_shared<const KernelMap>(std::move(km));
}

template <typename T>
SparseGrid<T> sparse_conv(const SparseGrid<T>& in, const Tensor<T>& weights, const Tensor<T>& bias,
                          const KernelMapPtr& kmap_ptr) {
  if (!kmap_ptr) throw ContractError("sparse_conv: missing kernel map");
  const KernelMap& kmap = *kmap_ptr;
  if (in.coords != kmap.in && !in.coords->same_coords(*kmap.in)) {
    throw ContractError("sparse_conv: kernel map was built for different input coordinates");
  }
  if (weights.rank() != 3 || weights.dim(0) != kKernelVolume) {
    throw DimensionError("sparse_conv: weights must be [27, F_in, F_out], got " + ad::shape_str(weights.shape()));
  }
  const std::size_t fi = weights.dim(1), fo = weights.dim(2);
  if (in.features.rank() != 2 || in.features.dim(1) != fi || in.features.dim(0) != in.rows()) {
    throw DimensionError("sparse_conv: input width " + std::to_string(in.features.cols()) +
                         " does not match weights " + ad::shape_str(weights.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != fo) throw DimensionError("sparse_conv: bias width mismatch");
  const std::size_t n_out = kmap.out->size();
  const std::size_t n_in = kmap.in->size();

  const T* x = in.features.data().data();
  const T* w = weights.data().data();
  std::vector<T> out(n_out * fo, T(0));
  const auto* by_out = kmap.by_out.data();
  const auto* out_off = kmap.out_offsets.data();
#pragma omp parallel for schedule(static) if (n_out * fi * fo > 65536)
  for (std::ptrdiff_t o = 0; o < static_cast<std::ptrdiff_t>(n_out); ++o) {
    T* row = out.data() + o * fo;
    if (has_bias) std::copy_n(bias.data().data(), fo, row);
    for (auto e = out_off[o]; e < out_off[o + 1]; ++e) {
      const auto [k, i] = by_out[e];
      const T* xi = x + i * fi;
      const T* wk = w + static_cast<std::size_t>(k) * fi * fo;
      for (std::size_t p = 0; p < fi; ++p) {
        const T a = xi[p];
        const T* wr = wk + p * fo;
        for (std::size_t j = 0; j < fo; ++j) row[j] += a * wr[j];
      }
    }
  }

  std::vector<Tensor<T>> inputs{in.features, weights};
  if (has_bias) inputs.push_back(bias);
  KernelMapPtr csr = kmap_ptr;
  auto feats = ad::make_result<T>(
      "sparse_conv", {n_out, fo}, std::move(out), std::move(inputs), [=](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        Node<T>& nw = *self.inputs[1];
        const T* g = self.grad.data();
        const T* xv = nx.value.data();
        const T* wv = nw.value.data();
        if (nx.requires_grad) {
          T* gx = nx.ensure_grad().data();
#pragma omp parallel for schedule(static) if (n_in * fi * fo > 65536)
          for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n_in); ++i) {
            T* dst = gx + i * fi;
            for (auto e = csr->in_offsets[i]; e < csr->in_offsets[i + 1]; ++e) {
              const auto [k, o] = csr->by_in[e];
              const T* go = g + o * fo;
              const T* wk = wv + static_cast<std::size_t>(k) * fi * fo;
              for (std::size_t p = 0; p < fi; ++p) {
                const T* wr = wk + p * fo;
                T s = 0;
                for (std::size_t j = 0; j < fo; ++j) s += go[j] * wr[j];
                dst[p] += s;
              }
            }
          }
        }
        if (nw.requires_grad) {
          T* gw = nw.ensure_grad().data();
#pragma omp parallel for schedule(static)
          for (int k = 0; k < kKernelVolume; ++k) {
            T* dk = gw + static_cast<std::size_t>(k) * fi * fo;
            for (const auto& [i, o] : csr->pairs[k]) {
              const T* xi = xv + i * fi;
              const T* go = g + o * fo;
              for (std::size_t p = 0; p < fi; ++p) {
                const T a = xi[p];
                T* dr = dk + p * fo;
                for (std::size_t j = 0; j < fo; ++j) dr[j] += a * go[j];
              }
            }
          }
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          auto& gb = self.inputs[2]->ensure_grad();
          for (std::size_t o = 0; o < n_out; ++o)
            for (std::size_t j = 0; j < fo; ++j) gb[j] += g[o * fo + j];
        }
      });
  return {kmap.out, std::move(feats)};
}

template <typename T>
Tensor<T> segment_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            std::span<const std::int64_t> row_offsets, std::size_t heads,
                            std::vector<T>* probabilities) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 2) {
    throw DimensionError("segment_attention: q, k, v must share one [R, F] shape");
  }
  const std::size_t r = q.dim(0), f = q.dim(1);
  if (heads == 0 || f % heads != 0) {
    throw ConfigError("attention width " + std::to_string(f) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (row_offsets.empty() || static_cast<std::size_t>(row_offsets.back()) != r) {
    throw DimensionError("segment_attention: row offsets do not cover the rows");
  }
  const std::size_t d = f / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d));
  const std::size_t segments = row_offsets.size() - 1;
  std::vector<std::size_t> p_offset(segments + 1, 0);
  for (std::size_t s = 0; s < segments; ++s) {
    const auto n = static_cast<std::size_t>(row_offsets[s + 1] - row_offsets[s]);
    p_offset[s + 1] = p_offset[s] + heads * n * n;
  }
  std::vector<T> prob(p_offset.back());
  std::vector<T> out(r * f, T(0));
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();
  for (std::size_t s = 0; s < segments; ++s) {
    const auto a = static_cast<std::size_t>(row_offsets[s]);
    const auto n = static_cast<std::size_t>(row_offsets[s + 1]) - a;
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = prob.data() + p_offset[s] + h * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = qv + (a + i) * f + h * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          const T* kj = kv + (a + j) * f + h * d;
          T dot = 0;
          for (std::size_t c = 0; c < d; ++c) dot += qi[c] * kj[c];
          P[i * n + j] = dot * inv_sqrt;
          mx = std::max(mx, P[i * n + j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) {
          P[i * n + j] = std::exp(P[i * n + j] - mx);
          z += P[i * n + j];
        }
        T* oi = out.data() + (a + i) * f + h * d;
        for (std::size_t j = 0; j < n; ++j) {
          P[i * n + j] /= z;
          const T pij = P[i * n + j];
          const T* vj = vv + (a + j) * f + h * d;
          for (std::size_t c = 0; c < d; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }
  if (probabilities) *probabilities = prob;
  std::vector<std::int64_t> offsets(row_offsets.begin(), row_offsets.end());
  return ad::make_result<T>(
      "segment_attention", {r, f}, std::move(out), {q, k, v},
      [=, prob = std::move(prob), offsets = std::move(offsets), p_offset = std::move(p_offset)](Node<T>& self) {
        Node<T>& nq = *self.inputs[0];
        Node<T>& nk = *self.inputs[1];
        Node<T>& nv = *self.inputs[2];
        T* gq = nq.requires_grad ? nq.ensure_grad().data() : nullptr;
        T* gk = nk.requires_grad ? nk.ensure_grad().data() : nullptr;
        T* gv = nv.requires_grad ? nv.ensure_grad().data() : nullptr;
        const T* g = self.grad.data();
        std::vector<T> dS;
        for (std::size_t s = 0; s < segments; ++s) {
          const auto a = static_cast<std::size_t>(offsets[s]);
          const auto n = static_cast<std::size_t>(offsets[s + 1]) - a;
          dS.assign(n * n, T(0));
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = prob.data() + p_offset[s] + h * n * n;
            for (std::size_t i = 0; i < n; ++i) {
              const T* gi = g + (a + i) * f + h * d;
              T rowdot = 0;
              for (std::size_t j = 0; j < n; ++j) {
                const T* vj = nv.value.data() + (a + j) * f + h * d;
                T dp = 0;
                for (std::size_t c = 0; c < d; ++c) dp += gi[c] * vj[c];
                dS[i * n + j] = dp;
                rowdot += dp * P[i * n + j];
              }
              for (std::size_t j = 0; j < n; ++j) dS[i * n + j] = P[i * n + j] * (dS[i * n + j] - rowdot);
            }
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t j = 0; j < n; ++j) {
                const T ds = dS[i * n + j] * inv_sqrt;
                const T pij = P[i * n + j];
                const std::size_t ri = (a + i) * f + h * d, rj = (a + j) * f + h * d;
                for (std::size_t c = 0; c < d; ++c) {
                  if (gq) gq[ri + c] += ds * nk.value[rj + c];
                  if (gk) gk[rj + c] += ds * nq.value[ri + c];
                  if (gv) gv[rj + c] += pij * g[ri + c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
SparseGrid<T> sparse_attention(const SparseGrid<T>& grid, const Tensor<T>& wq, const Tensor<T>& wk,
                               const Tensor<T>& wv, const Tensor<T>& wo, std::size_t heads,
                               std::vector<T>* probabilities) {
  const auto& x = grid.features;
  if (x.cols() % std::max<std::size_t>(heads, 1) != 0 || heads == 0) {
    throw ConfigError("attention width " + std::to_string(x.cols()) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const Tensor<T> undefined;
  auto q = ad::linear(x, wq, undefined);
  auto k = ad::linear(x, wk, undefined);
  auto v = ad::linear(x, wv, undefined);
  auto att = segment_attention(q, k, v, grid.coords->row_offsets(), heads, probabilities);
  return {grid.coords, ad::add(x, ad::linear(att, wo, undefined))};
}

template <typename T>
SparseGrid<T> film_broadcast(const SparseGrid<T>& grid, const Tensor<T>& scale, const Tensor<T>& shift) {
  const std::size_t b = grid.coords->batch_size();
  if (scale.rank() != 2 || shift.rank() != 2 || scale.dim(0) != b || shift.dim(0) != b ||
      scale.dim(1) != grid.width() || shift.dim(1) != grid.width()) {
    throw DimensionError("film_broadcast: scale/shift must be [" + std::to_string(b) + ", " +
                         std::to_string(grid.width()) + "]");
  }
  const auto ids = grid.coords->batch_ids();
  auto per_row_scale = ad::gather_rows(scale, ids);
  auto per_row_shift = ad::gather_rows(shift, ids);
  return {grid.coords, ad::scale_shift(grid.features, per_row_scale, per_row_shift)};
}

#define SPVD_INSTANTIATE_SPARSE(T)                                                                               \
  template CoordSetPtr quantize(const PointsView<T>&, int, int);                                                 \
  template Point2VoxelMap build_point_map(const PointsView<T>&, CoordSetPtr);                                    \
  template Tensor<T> voxel_mean(const Tensor<T>&, const Point2VoxelMap&);                                        \
  template std::pair<SparseGrid<T>, Point2VoxelMap> voxelize(const PointsView<T>&, const Tensor<T>&, int);       \
  template Tensor<T> devoxelize_trilinear(const SparseGrid<T>&, const Point2VoxelMap&);                          \
  template SparseGrid<T> sparse_conv(const SparseGrid<T>&, const Tensor<T>&, const Tensor<T>&, const KernelMapPtr&); \
  template Tensor<T> segment_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                     \
                                       std::span<const std::int64_t>, std::size_t, std::vector<T>*);             \
  template SparseGrid<T> sparse_attention(const SparseGrid<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                          const Tensor<T>&, const Tensor<T>&, std::size_t, std::vector<T>*);     \
  template SparseGrid<T> film_broadcast(const SparseGrid<T>&, const Tensor<T>&, const Tensor<T>&);

SPVD_INSTANTIATE_SPARSE(float)
SPVD_INSTANTIATE_SPARSE(double)

}  // namespace spvd::sparse
