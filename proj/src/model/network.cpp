#include "spvd/model/network.hpp"

#include <set>

#include "spvd/autodiff/ops.hpp"
#include "spvd/common/error.hpp"
#include "spvd/diffusion/embedding.hpp"

namespace spvd::model {

using nlohmann::json;
using sparse::CoordSetPtr;
using sparse::KernelMapPtr;
using sparse::SparseGrid;

namespace {

BlockSpec blk(std::size_t dim, bool project, Resample r, bool attention) { return {dim, project, r, attention}; }

constexpr auto D = Resample::kDown;
constexpr auto U = Resample::kUp;
constexpr auto N = Resample::kNone;

std::string to_string(Resample r) { return r == D ? "down" : r == U ? "up" : "none"; }

Resample parse_resample(const std::string& s) {
  if (s == "down") return D;
  if (s == "up") return U;
  if (s == "none") return N;
  throw ConfigError("unknown resample '" + s + "' (expected down, up or none)");
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <typename V>
V get(const json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

json block_to_json(const BlockSpec& b) {
  return {{"dim", b.dim}, {"project", b.project}, {"resample", to_string(b.resample)}, {"attention", b.attention}};
}

BlockSpec block_from_json(const json& j, const std::string& where) {
  reject_unknown(j, {"dim", "project", "resample", "attention"}, where);
  BlockSpec b;
  b.dim = get<std::size_t>(j, "dim", where);
  if (j.contains("project")) b.project = get<bool>(j, "project", where);
  if (j.contains("resample")) b.resample = parse_resample(get<std::string>(j, "resample", where));
  if (j.contains("attention")) b.attention = get<bool>(j, "attention", where);
  return b;
}

}  // namespace

std::vector<std::string> preset_names() { return {"spvd-tiny", "spvd-s", "spvd-m", "spvd-l"}; }

NetworkConfig preset_config(const std::string& name) {
  NetworkConfig c;
  c.preset = name;
  if (name == "spvd-tiny") {
    c.time_embed_dim = 32;
    c.stem = blk(16, true, N, false);
    c.down = {blk(16, false, D, false), blk(32, false, N, true)};
    c.up = {blk(32, false, U, true), blk(16, true, N, false)};
  } else if (name == "spvd-s") {
    c.time_embed_dim = 128;
    c.num_res_blocks = 2;
    c.stem = blk(32, false, N, false);
    c.down = {blk(32, false, D, false), blk(64, false, D, false), blk(128, false, D, false),
              blk(256, false, N, true)};
    c.mid = blk(256, false, N, false);
    c.up = {blk(256, false, U, true), blk(128, false, U, false), blk(64, false, U, false), blk(32, true, N, false)};
  } else if (name == "spvd-m" || name == "spvd-l") {
    const bool l = name == "spvd-l";
    const std::size_t w[6] = {l ? 64u : 32u, l ? 128u : 64u, l ? 192u : 128u, l ? 256u : 192u,
                              l ? 384u : 192u, l ? 384u : 256u};
    c.time_embed_dim = 128;
    c.num_res_blocks = 2;
    c.widen_at = WidenAt::kDownsample;
    c.stem = blk(w[0], true, N, false);
    c.down = {blk(w[1], false, D, false), blk(w[2], false, D, false), blk(w[3], false, D, false),
              blk(w[4], false, D, true), blk(w[5], true, N, true)};
    c.up = {blk(w[5], false, U, true), blk(w[3], true, U, true), blk(w[2], false, U, false),
            blk(w[1], false, U, false), blk(w[0], true, N, false)};
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return c;
}

void NetworkConfig::validate() const {
  if (base_resolution < 2) throw ConfigError("base_resolution must be at least 2");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even and >= 2");
  if (num_classes < 0) throw ConfigError("num_classes must be non-negative");
  if (num_res_blocks < 1) throw ConfigError("num_res_blocks must be at least 1");
  if (stem.dim == 0) throw ConfigError("stem.dim must be positive");
  if (stem.resample != N) throw ConfigError("stem cannot resample");
  if (mid && (mid->resample != N || mid->dim == 0)) throw ConfigError("mid must have a positive dim and no resample");
  if (down.empty()) throw ConfigError("at least one down block is required");
  if (up.size() != down.size()) {
    throw ConfigError("down/up pairing: " + std::to_string(down.size()) + " down vs " + std::to_string(up.size()) +
                      " up blocks");
  }
  int stride = 1;
  std::vector<int> skip_strides;
  for (std::size_t i = 0; i < down.size(); ++i) {
    if (down[i].dim == 0) throw ConfigError("down block dims must be positive");
    if (down[i].resample == U) throw ConfigError("down" + std::to_string(i + 1) + " cannot upsample");
    skip_strides.push_back(stride);
    if (down[i].resample == D) stride *= 2;
  }
  if (base_resolution % stride != 0) {
    throw ConfigError("base_resolution " + std::to_string(base_resolution) + " is not divisible by the deepest stride " +
                      std::to_string(stride));
  }
  for (std::size_t j = 0; j < up.size(); ++j) {
    if (up[j].dim == 0) throw ConfigError("up block dims must be positive");
    if (up[j].resample == D) throw ConfigError("up" + std::to_string(j + 1) + " cannot downsample");
    if (skip_strides[down.size() - 1 - j] != stride) {
      throw ConfigError("down/up pairing: up" + std::to_string(j + 1) + " runs at stride " + std::to_string(stride) +
                        " but its skip is at stride " + std::to_string(skip_strides[down.size() - 1 - j]));
    }
    if (up[j].resample == U) stride /= 2;
  }
  if (stride != 1) throw ConfigError("up blocks do not return to stride 1");
  if (!up.back().project) throw ConfigError("the last up block must project to points");
}

json to_json(const NetworkConfig& c) {
  json j{{"preset", c.preset},
         {"base_resolution", c.base_resolution},
         {"time_embed_dim", c.time_embed_dim},
         {"num_classes", c.num_classes},
         {"num_res_blocks", c.num_res_blocks},
         {"widen_at", c.widen_at == WidenAt::kFirstConv ? "first_conv" : "downsample"},
         {"stem", block_to_json(c.stem)},
         {"mid", c.mid ? block_to_json(*c.mid) : json(nullptr)}};
  j["down"] = json::array();
  for (const auto& b : c.down) j["down"].push_back(block_to_json(b));
  j["up"] = json::array();
  for (const auto& b : c.up) j["up"].push_back(block_to_json(b));
  return j;
}

NetworkConfig network_config_from_json(const json& j) {
  const std::string where = "network";
  reject_unknown(j, {"preset", "base_resolution", "time_embed_dim", "num_classes", "num_res_blocks", "widen_at", "stem",
                     "down", "mid", "up"},
                 where);
  NetworkConfig c;
  if (j.contains("preset")) {
    auto p = get<std::string>(j, "preset", where);
    c = p == "custom" ? NetworkConfig{} : preset_config(p);
  }
  if (j.contains("base_resolution")) c.base_resolution = get<int>(j, "base_resolution", where);
  if (j.contains("time_embed_dim")) c.time_embed_dim = get<std::size_t>(j, "time_embed_dim", where);
  if (j.contains("num_classes")) c.num_classes = get<int>(j, "num_classes", where);
  if (j.contains("num_res_blocks")) c.num_res_blocks = get<int>(j, "num_res_blocks", where);
  if (j.contains("widen_at")) {
    auto w = get<std::string>(j, "widen_at", where);
    if (w == "first_conv") {
      c.widen_at = WidenAt::kFirstConv;
    } else if (w == "downsample") {
      c.widen_at = WidenAt::kDownsample;
    } else {
      throw ConfigError("unknown widen_at '" + w + "'");
    }
  }
  if (j.contains("stem")) c.stem = block_from_json(j["stem"], "network.stem");
  if (j.contains("mid")) {
    if (j["mid"].is_null()) {
      c.mid.reset();
    } else {
      c.mid = block_from_json(j["mid"], "network.mid");
    }
  }
  auto blocks = [&](const char* key, std::vector<BlockSpec>& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_array()) throw ConfigError(std::string("network.") + key + " must be an array");
    out.clear();
    for (std::size_t i = 0; i < j[key].size(); ++i) {
      out.push_back(block_from_json(j[key][i], std::string("network.") + key + "[" + std::to_string(i) + "]"));
    }
  };
  blocks("down", c.down);
  blocks("up", c.up);
  c.validate();
  return c;
}

template <typename T>
Network<T>::Network(const NetworkConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  ParamStore<T> ps(rng);
  const std::size_t e = config_.time_embed_dim;
  time1_ = Linear<T>::make(ps, "time.l1", e, e);
  time2_ = Linear<T>::make(ps, "time.l2", e, e);
  if (config_.num_classes > 0) {
    class_table_ = ps.weight("class_table", {static_cast<std::size_t>(config_.num_classes), e}, 1);
  }

  std::size_t cur = config_.stem.dim;  // grid width
  std::size_t pw = 3;                  // point feature width
  stem_ = Conv<T>::make(ps, "stem.conv", 3, cur);
  if (config_.stem.project) {
    stem_projection_ = PointMlp<T>::make(ps, "stem.proj", pw, cur);
    pw = cur;
  }

  auto res_chain = [&](Block& b, const std::string& name, std::size_t in, std::size_t out) {
    for (int r = 0; r < config_.num_res_blocks; ++r) {
      b.res.push_back(ResBlock<T>::make(ps, name + ".res" + std::to_string(r), r == 0 ? in : out, out, e));
    }
  };
  auto finish = [&](Block& b, const std::string& name) {
    if (b.spec.project) {
      b.projection = PointMlp<T>::make(ps, name + ".proj", pw, cur);
      pw = cur;
    }
  };

  std::vector<std::size_t> skip_widths;
  for (std::size_t i = 0; i < config_.down.size(); ++i) {
    const auto& s = config_.down[i];
    const std::string name = "down" + std::to_string(i + 1);
    Block b;
    b.spec = s;
    const bool has_down = s.resample == Resample::kDown;
    const bool widen_late = has_down && config_.widen_at == WidenAt::kDownsample;
    const std::size_t res_out = widen_late ? cur : s.dim;
    res_chain(b, name, cur, res_out);
    cur = res_out;
    if (s.attention) b.attention = Attention<T>::make(ps, name + ".attn", cur);
    skip_widths.push_back(cur);
    if (has_down) {
      b.resample = Conv<T>::make(ps, name + ".down", cur, s.dim);
      cur = s.dim;
    }
    finish(b, name);
    down_.push_back(std::move(b));
  }
  if (config_.mid) {
    Block b;
    b.spec = *config_.mid;
    res_chain(b, "mid", cur, b.spec.dim);
    cur = b.spec.dim;
    if (b.spec.attention) b.attention = Attention<T>::make(ps, "mid.attn", cur);
    finish(b, "mid");
    mid_ = std::move(b);
  }
  for (std::size_t j = 0; j < config_.up.size(); ++j) {
    const auto& s = config_.up[j];
    const std::string name = "up" + std::to_string(j + 1);
    Block b;
    b.spec = s;
    res_chain(b, name, cur + skip_widths[skip_widths.size() - 1 - j], s.dim);
    cur = s.dim;
    if (s.attention) b.attention = Attention<T>::make(ps, name + ".attn", cur);
    if (s.resample == Resample::kUp) b.resample = Conv<T>::make(ps, name + ".up", cur, cur);
    finish(b, name);
    up_.push_back(std::move(b));
  }
  head_ = Linear<T>::make(ps, "head", pw, 3, true, true);
  params_ = std::move(ps.params());
}

template <typename T>
std::size_t Network<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.numel();
  return n;
}

template <typename T>
Tensor<T> Network<T>::embed(std::span<const int> t, std::span<const int> classes) const {
  auto h = time2_(ad::silu(time1_(diffusion::sinusoidal_embedding<T>(t, config_.time_embed_dim))));
  if (config_.num_classes == 0) {
    if (!classes.empty()) throw ContractError("unconditional network given class ids");
    return h;
  }
  if (classes.size() != t.size()) throw ContractError("class-conditional network needs one class id per sample");
  return ad::add(h, diffusion::class_embedding(class_table_, classes));
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x_t, std::span<const int> t, std::span<const int> classes,
                              std::size_t batch) const {
  if (batch == 0) throw ContractError("network: empty batch");
  if (x_t.rank() != 2 || x_t.dim(1) != 3 || x_t.rows() % batch != 0) {
    throw DimensionError("network: x_t must be (B·N) × 3, got " + ad::shape_str(x_t.shape()));
  }
  const std::size_t n = x_t.rows() / batch;
  if (n < 8) throw ContractError("network: clouds need at least 8 points");
  if (t.size() != batch) throw DimensionError("network: one timestep per sample required");

  const auto temb = embed(t, classes);
  const sparse::PointsView<T> pts{x_t.data(), batch, n};
  const int res = config_.base_resolution;

  // Per-level caches; level l has stride 2^l.
  std::vector<CoordSetPtr> coords{sparse::quantize(pts, res, 1)};
  std::vector<std::optional<sparse::Point2VoxelMap>> pmaps(1);
  std::vector<KernelMapPtr> subm(1), downs(1);
  auto pmap = [&](std::size_t l) -> const sparse::Point2VoxelMap& {
    if (!pmaps[l]) pmaps[l] = sparse::build_point_map(pts, coords[l]);
    return *pmaps[l];
  };
  auto submap = [&](std::size_t l) {
    if (!subm[l]) subm[l] = sparse::build_kernel_map(coords[l], 1, false);
    return subm[l];
  };
  auto grow = [&] {
    coords.emplace_back();
    pmaps.emplace_back();
    subm.emplace_back();
    downs.emplace_back();
  };

  std::size_t level = 0;
  Tensor<T> pts_feat = x_t;
  SparseGrid<T> grid{coords[0], sparse::voxel_mean(pts_feat, pmap(0))};
  grid = stem_(grid, submap(0));
  bool stale = false;  // grid must be rebuilt from point features

  auto project = [&](const PointMlp<T>& proj) {
    pts_feat = proj.project(pts_feat, grid, pmap(level));
    stale = true;
  };
  auto refresh = [&] {
    if (!stale) return;
    grid = {coords[level], sparse::voxel_mean(pts_feat, pmap(level))};
    stale = false;
  };
  auto body = [&](const Block& b) {
    for (const auto& r : b.res) grid = r(grid, submap(level), temb);
    if (b.attention) grid = (*b.attention)(grid);
  };

  if (stem_projection_) project(*stem_projection_);
  std::vector<SparseGrid<T>> skips;
  for (const auto& b : down_) {
    refresh();
    body(b);
    skips.push_back(grid);
    if (b.resample) {
      if (!downs[level]) downs[level] = sparse::build_kernel_map(coords[level], 2, false);
      const auto km = downs[level];
      if (level + 1 == coords.size()) grow();
      coords[level + 1] = km->out;
      grid = (*b.resample)(grid, km);
      ++level;
    }
    if (b.projection) project(*b.projection);
  }
  if (mid_) {
    refresh();
    body(*mid_);
    if (mid_->projection) project(*mid_->projection);
  }
  for (std::size_t j = 0; j < up_.size(); ++j) {
    const auto& b = up_[j];
    refresh();
    const auto& skip = skips[skips.size() - 1 - j];
    if (skip.coords != grid.coords) throw ContractError("network: skip coordinates do not match the decoder level");
    grid = {grid.coords, ad::concat_cols(grid.features, skip.features)};
    body(b);
    if (b.resample) {
      const auto km = sparse::build_kernel_map(coords[level], 2, true, coords[level - 1]);
      grid = (*b.resample)(grid, km);
      grid.coords = coords[level - 1];
      --level;
    }
    if (b.projection) project(*b.projection);
  }
  return head_(ad::silu(pts_feat));
}

template <typename T>
Tensor<T> Network<T>::predict(const Tensor<T>& x_t, std::span<const int> t, std::span<const int> classes,
                              std::size_t batch) const {
  ad::NoGradGuard guard;
  return forward(x_t, t, classes, batch);
}

template class Network<float>;
template class Network<double>;

}  // namespace spvd::model
