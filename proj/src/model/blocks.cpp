#include "spvd/model/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "spvd/autodiff/ops.hpp"
#include "spvd/common/error.hpp"

namespace spvd::model {

using sparse::SparseGrid;

std::size_t heads_for(std::size_t width) { return std::max<std::size_t>(1, width / 64); }

std::size_t groups_for(std::size_t width) {
  std::size_t g = std::min<std::size_t>(8, width);
  while (width % g != 0) --g;
  return g;
}

template <typename T>
Tensor<T> ParamStore<T>::add(const std::string& name, ad::Shape shape, std::vector<T> values) {
  for (const auto& [n, _] : params_) {
    if (n == name) throw ConfigError("duplicate parameter name " + name);
  }
  auto t = Tensor<T>::parameter(std::move(shape), std::move(values));
  params_.emplace_back(name, t);
  return t;
}

template <typename T>
Tensor<T> ParamStore<T>::weight(const std::string& name, ad::Shape shape, std::size_t fan_in) {
  const double a = std::sqrt(3.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> d(-a, a);
  std::vector<T> v(ad::numel_of(shape));
  for (auto& x : v) x = static_cast<T>(d(rng_));
  return add(name, std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> ParamStore<T>::constant(const std::string& name, ad::Shape shape, T value) {
  std::vector<T> v(ad::numel_of(shape), value);
  return add(name, std::move(shape), std::move(v));
}

template <typename T>
Linear<T> Linear<T>::make(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, bool bias,
                          bool zero) {
  Linear l;
  l.w = zero ? ps.constant(name + ".w", {in, out}, T(0)) : ps.weight(name + ".w", {in, out}, in);
  if (bias) l.b = ps.constant(name + ".b", {out}, T(0));
  return l;
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  return ad::linear(x, w, b);
}

template <typename T>
Conv<T> Conv<T>::make(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out) {
  Conv c;
  c.w = ps.weight(name + ".w", {static_cast<std::size_t>(sparse::kKernelVolume), in, out},
                  sparse::kKernelVolume * in);
  c.b = ps.constant(name + ".b", {out}, T(0));
  return c;
}

template <typename T>
SparseGrid<T> Conv<T>::operator()(const SparseGrid<T>& x, const sparse::KernelMapPtr& kmap) const {
  return sparse::sparse_conv(x, w, b, kmap);
}

template <typename T>
Norm<T> Norm<T>::make(ParamStore<T>& ps, const std::string& name, std::size_t width) {
  Norm n;
  n.gamma = ps.constant(name + ".gamma", {width}, T(1));
  n.beta = ps.constant(name + ".beta", {width}, T(0));
  n.groups = groups_for(width);
  return n;
}

template <typename T>
SparseGrid<T> Norm<T>::operator()(const SparseGrid<T>& x) const {
  return {x.coords, ad::group_norm(x.features, groups, x.coords->batch_ids(), gamma, beta)};
}

template <typename T>
ResBlock<T> ResBlock<T>::make(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                              std::size_t temb_dim) {
  ResBlock r;
  r.in = in;
  r.out = out;
  r.conv1 = Conv<T>::make(ps, name + ".conv1", in, out);
  r.norm1 = Norm<T>::make(ps, name + ".norm1", out);
  r.film1 = Linear<T>::make(ps, name + ".film1", temb_dim, temb_dim);
  r.film2 = Linear<T>::make(ps, name + ".film2", temb_dim, 2 * out, true, true);
  r.conv2 = Conv<T>::make(ps, name + ".conv2", out, out);
  r.norm2 = Norm<T>::make(ps, name + ".norm2", out);
  if (in != out) r.shortcut = Linear<T>::make(ps, name + ".shortcut", in, out);
  return r;
}

template <typename T>
SparseGrid<T> ResBlock<T>::operator()(const SparseGrid<T>& x, const sparse::KernelMapPtr& kmap,
                                      const Tensor<T>& temb) const {
  auto h = conv1(x, kmap);
  h = norm1(h);
  h.features = ad::silu(h.features);
  auto film = film2(ad::silu(film1(temb)));
  auto scale = ad::add(ad::slice_cols(film, 0, out), Tensor<T>::full({out}, T(1)));
  auto shift = ad::slice_cols(film, out, 2 * out);
  h = sparse::film_broadcast(h, scale, shift);
  h = conv2(h, kmap);
  h = norm2(h);
  h.features = ad::silu(h.features);
  auto skip = shortcut ? (*shortcut)(x.features) : x.features;
  return {x.coords, ad::add(h.features, skip)};
}

template <typename T>
Attention<T> Attention<T>::make(ParamStore<T>& ps, const std::string& name, std::size_t width) {
  Attention a;
  a.wq = ps.weight(name + ".wq", {width, width}, width);
  a.wk = ps.weight(name + ".wk", {width, width}, width);
  a.wv = ps.weight(name + ".wv", {width, width}, width);
  a.wo = ps.weight(name + ".wo", {width, width}, width);
  a.heads = heads_for(width);
  return a;
}

template <typename T>
SparseGrid<T> Attention<T>::operator()(const SparseGrid<T>& x) const {
  return sparse::sparse_attention(x, wq, wk, wv, wo, heads);
}

template <typename T>
PointMlp<T> PointMlp<T>::make(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out) {
  PointMlp m;
  m.l1 = Linear<T>::make(ps, name + ".l1", in, out);
  m.l2 = Linear<T>::make(ps, name + ".l2", out, out);
  return m;
}

template <typename T>
Tensor<T> PointMlp<T>::project(const Tensor<T>& point_features, const SparseGrid<T>& grid,
                               const sparse::Point2VoxelMap& map) const {
  auto mlp = l2(ad::silu(l1(point_features)));
  return ad::add(mlp, sparse::devoxelize_trilinear(grid, map));
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct Conv<float>;
template struct Conv<double>;
template struct Norm<float>;
template struct Norm<double>;
template struct ResBlock<float>;
template struct ResBlock<double>;
template struct Attention<float>;
template struct Attention<double>;
template struct PointMlp<float>;
template struct PointMlp<double>;

}  // namespace spvd::model
