// Acceptance run: one PASS/FAIL line per criterion. `--only 3,5` restricts
// the run; the exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "spvd/autodiff/grad_check.hpp"
#include "spvd/autodiff/ops.hpp"
#include "spvd/cli/commands.hpp"
#include "spvd/common/error.hpp"
#include "spvd/data/checkpoint.hpp"
#include "spvd/data/dataset.hpp"
#include "spvd/data/io.hpp"
#include "spvd/diffusion/diffusion.hpp"
#include "spvd/metrics/metrics.hpp"
#include "spvd/model/network.hpp"
#include "spvd/sparse/ops.hpp"
#include "spvd/train/train.hpp"
#include "support/random.hpp"

using namespace spvd;
using namespace spvd::sparse;
namespace fs = std::filesystem;
using TD = ad::Tensor<double>;
using TF = ad::Tensor<float>;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "spvd_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::vector<Coord> random_coords(std::mt19937_64& rng, std::size_t batch, int extent, double density) {
  std::bernoulli_distribution on(density);
  std::vector<Coord> out;
  for (std::size_t b = 0; b < batch; ++b)
    for (int i = 0; i < extent; ++i)
      for (int j = 0; j < extent; ++j)
        for (int k = 0; k < extent; ++k)
          if (on(rng)) out.push_back({static_cast<int>(b), i, j, k});
  if (out.empty()) out.push_back({0, 0, 0, 0});
  return out;
}

template <typename T>
void randomize(model::Network<T>& net, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& [_, p] : net.params())
    for (auto& v : p.mutable_data()) v = static_cast<T>(d(rng));
}

// ---------------------------------------------------------------------------

Outcome forward_process() {
  const auto t0 = Clock::now();
  const auto sched = diffusion::make_linear_schedule(1000, 1e-4, 0.02);
  const int draws = 10000;
  const double x0v[3] = {0.8, -0.4, 0.05};
  std::mt19937_64 rng(101);
  std::normal_distribution<double> n01(0.0, 1.0);
  double worst_mean = 0, worst_var = 0;
  for (int t : {1, 500, 1000}) {
    std::vector<double> xs(draws * 3);
    for (int d = 0; d < draws; ++d)
      for (int a = 0; a < 3; ++a) {
        double x = x0v[a];
        for (int k = 1; k <= t; ++k) x = std::sqrt(1 - sched.beta[k]) * x + std::sqrt(sched.beta[k]) * n01(rng);
        xs[d * 3 + a] = x;
      }
    const double v_true = 1 - sched.alpha_bar[t];
    double var = 0;
    for (int a = 0; a < 3; ++a) {
      double m = 0;
      for (int d = 0; d < draws; ++d) m += xs[d * 3 + a] / draws;
      for (int d = 0; d < draws; ++d) var += (xs[d * 3 + a] - m) * (xs[d * 3 + a] - m) / (3.0 * draws);
      const double m_true = std::sqrt(sched.alpha_bar[t]) * x0v[a];
      worst_mean = std::max(worst_mean, std::abs(m - m_true) / std::max(std::abs(m_true), std::sqrt(v_true)));
    }
    worst_var = std::max(worst_var, std::abs(var - v_true) / v_true);
  }
  const double secs = seconds_since(t0);
  return {worst_mean < 0.02 && worst_var < 0.02 && secs < 10,
          "mean rel " + fmt(worst_mean) + ", var rel " + fmt(worst_var) + ", " + fmt(secs) + " s"};
}

Outcome gradients() {
  constexpr double kEps = 1e-5, kTol = 1e-4;
  double worst = 0;
  std::string worst_name;
  std::size_t checked = 0;
  auto record = [&](const std::string& name, const ad::GradCheckResult& r) {
    ++checked;
    if (r.max_rel_error > worst || worst_name.empty()) {
      worst = std::max(worst, r.max_rel_error);
      worst_name = name;
    }
  };
  auto probes_of = [](std::initializer_list<TD*> ts, std::size_t stride = 1) {
    std::vector<ad::Probe> p;
    for (auto* t : ts)
      for (std::size_t i = 0; i < t->numel(); i += stride) p.push_back({*t, i});
    return p;
  };

  std::mt19937_64 rng(201);
  for (auto [r, c] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 3}, {5, 4}, {7, 6}}) {
    auto x = test::random_param(rng, {r, c});
    auto y = test::random_param(rng, {r, c});
    auto row = test::random_param(rng, {c});
    auto w = test::random_param(rng, {c, 5});
    auto bias = test::random_param(rng, {5});
    auto gamma = test::random_param(rng, {c});
    auto beta = test::random_param(rng, {c});
    auto src = test::random_param(rng, {r + 2, c});
    auto target = test::random_const(rng, {r, c});
    std::vector<std::int64_t> ids(r), gidx(r + 2);
    for (std::size_t i = 0; i < r; ++i) ids[i] = static_cast<std::int64_t>(i * 2 / r);
    for (std::size_t i = 0; i < gidx.size(); ++i) gidx[i] = static_cast<std::int64_t>((i * 7 + 3) % r);
    std::vector<double> row_w(r, 1.0);
    for (std::size_t i = 1; i < r; ++i) row_w[i] = i % 3 == 0 ? 0.0 : 1.0 + i;
    const std::size_t groups = c % 2 == 0 ? 2 : 1;
    const std::vector<std::pair<std::string, std::function<TD()>>> ops{
        {"matmul", [&] { return ad::matmul(x, w); }},
        {"linear", [&] { return ad::linear(x, w, bias); }},
        {"add", [&] { return ad::add(x, row); }},
        {"sub", [&] { return ad::sub(x, y); }},
        {"mul", [&] { return ad::mul(x, y); }},
        {"silu", [&] { return ad::silu(x); }},
        {"scale_shift", [&] { return ad::scale_shift(x, y, row); }},
        {"scale", [&] { return ad::scale(x, -1.7); }},
        {"mean", [&] { return ad::mean(x); }},
        {"mse", [&] { return ad::mse(x, target, std::span<const double>(row_w)); }},
        {"segment_sum", [&] { return ad::segment_reduce(x, ids, 2, ad::Reduce::kSum); }},
        {"segment_mean", [&] { return ad::segment_reduce(x, ids, 2, ad::Reduce::kMean); }},
        {"segment_max", [&] { return ad::segment_reduce(x, ids, 2, ad::Reduce::kMax); }},
        {"gather_rows", [&] { return ad::gather_rows(x, gidx); }},
        {"scatter_add", [&] { return ad::scatter_add(x, gidx, src); }},
        {"group_norm", [&] { return ad::group_norm(x, groups, ids, gamma, beta); }},
        {"concat_cols", [&] { return ad::concat_cols(x, y); }},
        {"slice_cols", [&] { return ad::slice_cols(x, 0, (c + 1) / 2); }},
    };
    for (const auto& [name, op] : ops) {
      std::mt19937_64 prng(202);
      TD pw;
      auto loss = [&] {
        TD out = op();
        if (!pw.defined() || pw.shape() != out.shape()) pw = test::random_const(prng, out.shape());
        return ad::sum(ad::mul(out, pw));
      };
      record(name, ad::grad_check_probes(loss, probes_of({&x, &y, &row, &w, &bias, &gamma, &beta, &src}), kEps));
    }
  }

  // Sparse operators.
  auto fine = CoordSet::create(random_coords(rng, 2, 4, 0.35), 4, 1, 2);
  auto coarse = downscale(*fine);
  auto feats = test::random_param(rng, {fine->size(), 2});
  auto cfeats = test::random_param(rng, {coarse->size(), 2});
  auto w = test::random_param(rng, {27, 2, 3});
  auto b = test::random_param(rng, {3});
  const std::vector<std::tuple<std::string, CoordSetPtr, TD*, KernelMapPtr>> convs{
      {"sparse_conv submanifold", fine, &feats, build_kernel_map(fine, 1, false)},
      {"sparse_conv downsample", fine, &feats, build_kernel_map(fine, 2, false)},
      {"sparse_conv transpose", coarse, &cfeats, build_kernel_map(coarse, 2, true, fine)},
  };
  for (const auto& [name, in, f, km] : convs) {
    auto pw = test::random_const(rng, {km->out->size(), 3});
    auto loss = [&] { return ad::sum(ad::mul(sparse_conv(SparseGrid<double>{in, *f}, w, b, km).features, pw)); };
    record(name, ad::grad_check_probes(loss, probes_of({f, &w, &b}), kEps));
  }
  {
    auto x = test::random_param(rng, {fine->size(), 4});
    auto wq = test::random_param(rng, {4, 4}), wk = test::random_param(rng, {4, 4});
    auto wv = test::random_param(rng, {4, 4}), wo = test::random_param(rng, {4, 4});
    auto pw = test::random_const(rng, {fine->size(), 4});
    auto loss = [&] {
      return ad::sum(ad::mul(sparse_attention(SparseGrid<double>{fine, x}, wq, wk, wv, wo, 2).features, pw));
    };
    record("sparse_attention", ad::grad_check_probes(loss, probes_of({&x, &wq, &wk, &wv, &wo}), kEps));
    auto s = test::random_param(rng, {2, 4}), t = test::random_param(rng, {2, 4});
    auto film = [&] { return ad::sum(ad::mul(film_broadcast(SparseGrid<double>{fine, x}, s, t).features, pw)); };
    record("film_broadcast", ad::grad_check_probes(film, probes_of({&x, &s, &t}), kEps));
  }
  {
    auto xyz = test::uniform_values(rng, 2 * 30 * 3);
    PointsView<double> pts{xyz, 2, 30};
    auto pf = test::random_param(rng, {60, 3});
    auto [grid, map] = voxelize<double>(pts, pf, 4);
    auto gf = test::random_param(rng, {grid.rows(), 3});
    auto pw = test::random_const(rng, {grid.rows(), 3});
    auto qw = test::random_const(rng, {60, 3});
    auto vm = [&] { return ad::sum(ad::mul(voxel_mean(pf, map), pw)); };
    record("voxel_mean", ad::grad_check_probes(vm, probes_of({&pf}), kEps));
    auto dv = [&] { return ad::sum(ad::mul(devoxelize_trilinear(SparseGrid<double>{grid.coords, gf}, map), qw)); };
    record("devoxelize_trilinear", ad::grad_check_probes(dv, probes_of({&gf}), kEps));
  }

  // Whole network plus diffusion loss on random parameters.
  Rng init(203);
  model::Network<double> net(model::preset_config("spvd-tiny"), init);
  randomize(net, 204, 0.25);
  const auto sched = diffusion::make_linear_schedule(100, 1e-3, 0.2);
  PointBatch<double> x0(2, 24, test::uniform_values(rng, 2 * 24 * 3, -0.6, 0.6));
  std::vector<int> ts{9, 73};
  auto eps = test::uniform_values(rng, x0.xyz.size());
  diffusion::EpsModel<double> model = [&](const TD& x, std::span<const int> t, std::span<const int> c,
                                          std::size_t batch) { return net.forward(x, t, c, batch); };
  auto loss = [&] {
    return diffusion::training_loss_fixed<double>(model, x0, ts, eps, {}, nullptr, sched);
  };
  std::vector<ad::Probe> probes;
  std::size_t total = net.param_count();
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  while (probes.size() < 128) {
    std::size_t k = pick(rng);
    for (auto& [_, p] : net.params()) {
      if (k < p.numel()) {
        probes.push_back({p, k});
        break;
      }
      k -= p.numel();
    }
  }
  record("spvd-tiny loss (128 params)", ad::grad_check_probes(loss, probes, kEps));
  return {worst < kTol, std::to_string(checked) + " checks, worst " + fmt(worst) + " (" + worst_name + ")"};
}

std::vector<double> conv_oracle(const SparseGrid<double>& in, const CoordSet& out, ConvKind kind, const TD& w,
                                const TD& bias) {
  const std::size_t fi = in.width(), fo = w.dim(2);
  std::vector<double> y(out.size() * fo, 0.0);
  for (std::size_t o = 0; o < out.size(); ++o) {
    for (std::size_t q = 0; q < fo; ++q) y[o * fo + q] = bias.data()[q];
    for (std::size_t i = 0; i < in.rows(); ++i) {
      const Coord& ci = (*in.coords)[i];
      const Coord& co = out[o];
      if (ci[0] != co[0]) continue;
      for (int k = 0; k < 27; ++k) {
        const int d[3] = {k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1};
        bool hit = true;
        for (int a = 0; a < 3; ++a) {
          if (kind == ConvKind::kSubmanifold) hit = hit && ci[a + 1] == co[a + 1] + d[a];
          if (kind == ConvKind::kDownsample) hit = hit && ci[a + 1] == 2 * co[a + 1] + d[a];
          if (kind == ConvKind::kTranspose) hit = hit && co[a + 1] == 2 * ci[a + 1] + d[a];
        }
        if (!hit) continue;
        for (std::size_t p = 0; p < fi; ++p)
          for (std::size_t q = 0; q < fo; ++q) y[o * fo + q] += in.features.at(i, p) * w.data()[(k * fi + p) * fo + q];
      }
    }
  }
  return y;
}

Outcome sparse_conv_oracle() {
  std::mt19937_64 rng(301);
  std::uniform_int_distribution<int> half(1, 4), batch(1, 3), width(1, 4);
  std::uniform_real_distribution<double> density(0.05, 0.5);
  double worst = 0;
  int grids = 0;
  for (int rep = 0; rep < 60; ++rep) {
    const int e = 2 * half(rng);
    const std::size_t nb = batch(rng);
    auto fine = CoordSet::create(random_coords(rng, nb, e, density(rng)), e, 1, nb);
    auto coarse = downscale(*fine);
    const std::size_t fi = width(rng), fo = width(rng);
    auto ff = test::random_const(rng, {fine->size(), fi});
    auto cf = test::random_const(rng, {coarse->size(), fi});
    auto w = test::random_const(rng, {27, fi, fo});
    auto bias = test::random_const(rng, {fo});
    for (auto kind : {ConvKind::kSubmanifold, ConvKind::kDownsample, ConvKind::kTranspose}) {
      SparseGrid<double> in = kind == ConvKind::kTranspose ? SparseGrid<double>{coarse, cf} : SparseGrid<double>{fine, ff};
      KernelMapPtr km = kind == ConvKind::kSubmanifold ? build_kernel_map(fine, 1, false)
                        : kind == ConvKind::kDownsample ? build_kernel_map(fine, 2, false)
                                                        : build_kernel_map(coarse, 2, true, fine);
      auto y = sparse_conv(in, w, bias, km);
      auto expect = conv_oracle(in, *km->out, kind, w, bias);
      if (expect.size() != y.features.numel()) return {false, "output size mismatch"};
      for (std::size_t i = 0; i < expect.size(); ++i) worst = std::max(worst, std::abs(expect[i] - y.features.data()[i]));
    }
    ++grids;
  }
  return {worst < 1e-5, std::to_string(grids) + " grids x 3 kinds, max abs err " + fmt(worst)};
}

Outcome trilinear() {
  std::mt19937_64 rng(401);
  double worst_sum = 0, worst_centre = 0;
  std::size_t full = 0, centres = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const int res = 8;
    auto xyz = test::uniform_values(rng, 3 * 400);
    std::set<Coord> active;
    for (const auto& c : random_coords(rng, 1, res, 0.6)) active.insert(c);
    for (std::size_t p = 0; p < 400; ++p)
      active.insert({0, quantize_axis(xyz[p * 3], res), quantize_axis(xyz[p * 3 + 1], res),
                     quantize_axis(xyz[p * 3 + 2], res)});
    auto cs = CoordSet::create({active.begin(), active.end()}, res, 1, 1);
    auto map = build_point_map<double>({xyz, 1, 400}, cs);
    for (std::size_t p = 0; p < 400; ++p) {
      if (std::any_of(map.neighbors[p].begin(), map.neighbors[p].end(), [](auto n) { return n < 0; })) continue;
      double s = 0;
      for (double w : map.weights[p]) s += w;
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      ++full;
    }
  }
  for (int rep = 0; rep < 20; ++rep) {
    // Voxels on a stride-3 lattice have no active neighbour within one cell.
    std::vector<Coord> coords;
    std::bernoulli_distribution on(0.5);
    for (int i = 0; i < 8; i += 3)
      for (int j = 0; j < 8; j += 3)
        for (int k = 0; k < 8; k += 3)
          if (on(rng)) coords.push_back({0, i, j, k});
    if (coords.empty()) coords.push_back({0, 3, 3, 3});
    auto cs = CoordSet::create(coords, 8, 1, 1);
    SparseGrid<double> g{cs, test::random_const(rng, {cs->size(), 3})};
    std::vector<double> xyz;
    for (std::size_t r = 0; r < cs->size(); ++r)
      for (int a = 0; a < 3; ++a) xyz.push_back(((*cs)[r][a + 1] + 0.5) / 8 * 2 - 1);
    auto map = build_point_map<double>({xyz, 1, cs->size()}, cs);
    auto y = devoxelize_trilinear(g, map);
    for (std::size_t i = 0; i < y.numel(); ++i) worst_centre = std::max(worst_centre, std::abs(y.data()[i] - g.features.data()[i]));
    centres += cs->size();
  }
  return {full > 100 && worst_sum <= 1e-6 && worst_centre == 0.0,
          std::to_string(full) + " full neighbourhoods, |sum - 1| <= " + fmt(worst_sum) + "; " + std::to_string(centres) +
              " centre queries, max err " + fmt(worst_centre)};
}

Outcome ragged_batches() {
  std::mt19937_64 rng(501);
  std::uniform_int_distribution<int> nb(2, 5);
  std::size_t cases = 0, mismatches = 0;
  for (int rep = 0; rep < 24; ++rep) {
    const std::size_t b = nb(rng);
    auto cs = CoordSet::create(random_coords(rng, b, 4, 0.05 + 0.04 * (rep % 6)), 4, 1, b);
    const std::size_t f = 4;
    SparseGrid<double> g{cs, test::random_const(rng, {cs->size(), f})};
    auto scale = test::random_const(rng, {b, f}), shift = test::random_const(rng, {b, f});
    auto gamma = test::random_const(rng, {f}), beta = test::random_const(rng, {f});
    auto wq = test::random_const(rng, {f, f}), wk = test::random_const(rng, {f, f});
    auto wv = test::random_const(rng, {f, f}), wo = test::random_const(rng, {f, f});
    auto film = film_broadcast(g, scale, shift);
    auto norm = ad::group_norm(g.features, 2, cs->batch_ids(), gamma, beta);
    auto attn = sparse_attention(g, wq, wk, wv, wo, 2);
    auto off = cs->row_offsets();
    for (std::size_t s = 0; s < b; ++s) {
      const std::size_t n = off[s + 1] - off[s];
      if (n == 0) continue;
      std::vector<Coord> cb;
      for (auto r = off[s]; r < off[s + 1]; ++r) {
        Coord c = (*cs)[r];
        c[0] = 0;
        cb.push_back(c);
      }
      auto one = CoordSet::create(cb, 4, 1, 1);
      std::vector<double> fb(g.features.data().begin() + off[s] * f, g.features.data().begin() + off[s + 1] * f);
      SparseGrid<double> gs{one, TD::constant({n, f}, fb)};
      std::vector<double> srow(scale.data().begin() + s * f, scale.data().begin() + (s + 1) * f);
      std::vector<double> trow(shift.data().begin() + s * f, shift.data().begin() + (s + 1) * f);
      auto film1 = film_broadcast(gs, TD::constant({1, f}, srow), TD::constant({1, f}, trow));
      auto norm1 = ad::group_norm(gs.features, 2, std::vector<std::int64_t>(n, 0), gamma, beta);
      auto attn1 = sparse_attention(gs, wq, wk, wv, wo, 2);
      for (std::size_t i = 0; i < n * f; ++i) {
        mismatches += film.features.data()[off[s] * f + i] != film1.features.data()[i];
        mismatches += norm.data()[off[s] * f + i] != norm1.data()[i];
        mismatches += attn.features.data()[off[s] * f + i] != attn1.features.data()[i];
      }
    }
    ++cases;
  }
  return {cases >= 20 && mismatches == 0,
          std::to_string(cases) + " ragged batches, " + std::to_string(mismatches) + " inexact values"};
}

double sq(double v) { return v * v; }

double d2(std::span<const double> a, std::size_t i, std::span<const double> b, std::size_t j) {
  return sq(a[i * 3] - b[j * 3]) + sq(a[i * 3 + 1] - b[j * 3 + 1]) + sq(a[i * 3 + 2] - b[j * 3 + 2]);
}

double brute_chamfer(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size() / 3, m = b.size() / 3;
  double s1 = 0, s2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = 1e300;
    for (std::size_t j = 0; j < m; ++j) best = std::min(best, d2(a, i, b, j));
    s1 += best;
  }
  for (std::size_t j = 0; j < m; ++j) {
    double best = 1e300;
    for (std::size_t i = 0; i < n; ++i) best = std::min(best, d2(a, i, b, j));
    s2 += best;
  }
  return s1 / n + s2 / m;
}

double brute_emd(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size() / 3;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += std::sqrt(d2(a, i, b, perm[i]));
    best = std::min(best, s / n);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Outcome metric_oracles() {
  using namespace spvd::metrics;
  std::mt19937_64 rng(601);
  std::vector<std::string> failures;
  double cd_err = 0;
  for (std::size_t n : {1u, 7u, 33u, 64u}) {
    auto a = test::uniform_values(rng, n * 3), b = test::uniform_values(rng, (n + 3) * 3);
    cd_err = std::max(cd_err, std::abs(chamfer<double>(a, b) - brute_chamfer(a, b)));
  }
  if (cd_err > 1e-12) failures.push_back("CD err " + fmt(cd_err));
  double emd_err = 0;
  for (std::size_t n = 1; n <= 8; ++n) {
    auto a = test::uniform_values(rng, n * 3), b = test::uniform_values(rng, n * 3);
    emd_err = std::max(emd_err, std::abs(emd<double>(a, b, {EmdMode::kExact}).value - brute_emd(a, b)));
  }
  if (emd_err > 1e-12) failures.push_back("exact EMD err " + fmt(emd_err));
  double ratio = 0;
  for (std::size_t n : {8u, 16u, 32u, 48u, 64u}) {
    for (int rep = 0; rep < 3; ++rep) {
      auto a = test::uniform_values(rng, n * 3), b = test::uniform_values(rng, n * 3);
      const double ex = emd<double>(a, b, {EmdMode::kExact}).value;
      const double ap = emd<double>(a, b, {EmdMode::kApprox, 0.005}).value;
      ratio = std::max(ratio, ex > 0 ? ap / ex : 1.0);
    }
  }
  if (ratio > 1.005) failures.push_back("approx/exact " + fmt(ratio));

  // Set metrics against direct loops over the merged set.
  auto make_set = [&](std::size_t shapes, double offset) {
    std::vector<CloudF> s;
    for (std::size_t i = 0; i < shapes; ++i) {
      auto c = test::uniform_values(rng, 8 * 3, -0.5 + offset, 0.5 + offset);
      s.emplace_back(c.begin(), c.end());
    }
    return s;
  };
  for (int rep = 0; rep < 4; ++rep) {
    auto gen = make_set(5 + rep, 0.1 * rep), ref = make_set(4 + rep, 0);
    std::vector<CloudF> all = gen;
    all.insert(all.end(), ref.begin(), ref.end());
    const std::size_t ng = gen.size(), nr = ref.size(), nt = ng + nr;
    for (Metric metric : {Metric::kChamfer, Metric::kEmd}) {
      auto dist = [&](std::size_t i, std::size_t j) {
        std::vector<double> a(all[i].begin(), all[i].end()), b(all[j].begin(), all[j].end());
        return metric == Metric::kChamfer ? brute_chamfer(a, b) : brute_emd(a, b);
      };
      std::vector<double> d(nt * nt);
      for (std::size_t i = 0; i < nt; ++i)
        for (std::size_t j = 0; j < nt; ++j) d[i * nt + j] = i == j ? 0 : dist(i, j);
      int correct = 0;
      for (std::size_t i = 0; i < nt; ++i) {
        std::size_t arg = i == 0 ? 1 : 0;
        for (std::size_t j = 0; j < nt; ++j)
          if (j != i && d[i * nt + j] < d[i * nt + arg]) arg = j;
        correct += (i < ng) == (arg < ng);
      }
      double m = 0;
      std::set<std::size_t> covered;
      for (std::size_t j = 0; j < nr; ++j) {
        double best = 1e300;
        for (std::size_t i = 0; i < ng; ++i) best = std::min(best, d[i * nt + ng + j]);
        m += best / nr;
      }
      for (std::size_t i = 0; i < ng; ++i) {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < nr; ++j)
          if (d[i * nt + ng + j] < d[i * nt + ng + arg]) arg = j;
        covered.insert(arg);
      }
      auto r = evaluate(gen, ref, true, {EmdMode::kExact});
      const auto& v = metric == Metric::kChamfer ? r.cd : *r.emd;
      const double nna = 100.0 * correct / nt, cov = 100.0 * covered.size() / nr;
      if (std::abs(v.one_nna - nna) > 1e-9 || std::abs(v.mmd - m) > 1e-6 * std::max(1.0, m) ||
          std::abs(v.cov - cov) > 1e-9)
        failures.push_back(to_string(metric) + " set metrics differ from loops");
    }
  }
  // Identity fixtures.
  auto twins = make_set(6, 0);
  auto id = evaluate(twins, twins, true);
  if (id.cd.one_nna != 0 || id.cd.mmd != 0 || id.cd.cov != 100 || id.emd->one_nna != 0 || id.emd->mmd != 0 ||
      id.emd->cov != 100)
    failures.push_back("identity fixture");
  std::string detail = "CD err " + fmt(cd_err) + ", exact EMD err " + fmt(emd_err) + ", approx/exact " + fmt(ratio);
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

Outcome overfit() {
  const auto t0 = Clock::now();
  using data::ShapeKind;
  // Two shapes each of four classes, cycled so neighbouring shapes differ.
  auto ds = data::synth_dataset({ShapeKind::kSphere, ShapeKind::kBox, ShapeKind::kChairoid, ShapeKind::kTableoid}, 8,
                                256, 7, data::NormMode::kUnitBox);
  const auto sched = diffusion::make_linear_schedule(100, 1e-3, 0.2);
  Rng init = make_stream(7, "init");
  model::Network<float> net(model::preset_config("spvd-tiny"), init);
  train::Adam<float> adam(net.params());
  train::TrainOptions opts;
  opts.steps = 3000;
  opts.batch = 8;
  opts.lr = 2e-3;
  opts.one_cycle = true;
  opts.seed = 7;
  auto losses = spvd::train::train(net, ds, sched, opts, adam);
  double tail = 0;
  const std::size_t window = 100;
  for (std::size_t i = losses.size() - window; i < losses.size(); ++i) tail += losses[i].loss / window;

  diffusion::EpsModel<float> model = [&](const TF& x, std::span<const int> t, std::span<const int> c,
                                         std::size_t batch) { return net.predict(x, t, c, batch); };
  Rng srng = make_stream(7, "noise", 0);
  auto samples = diffusion::sample<float>(model, 8, 256, sched, {diffusion::SamplerRule::kDdpm, 0, false}, {}, nullptr,
                                          srng);
  double to_train = 0;
  for (std::size_t b = 0; b < samples.batch; ++b) {
    double best = 1e300;
    for (const auto& s : ds.shapes) best = std::min(best, metrics::chamfer<float>(samples.cloud(b), s.xyz));
    to_train += best / samples.batch;
  }
  double inter = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < ds.shapes.size(); ++i)
    for (std::size_t j = i + 1; j < ds.shapes.size(); ++j)
      if (ds.shapes[i].class_id != ds.shapes[j].class_id) {
        inter += metrics::chamfer<float>(ds.shapes[i].xyz, ds.shapes[j].xyz);
        ++pairs;
      }
  inter /= pairs;
  return {tail < 0.5 && to_train < inter,
          "loss(last 100) " + fmt(tail) + ", sample->train CD " + fmt(to_train) + " vs inter-class CD " + fmt(inter) +
              ", " + fmt(seconds_since(t0)) + " s"};
}

Outcome ddim_timing() {
  Rng init(801);
  model::Network<float> net(model::preset_config("spvd-tiny"), init);
  randomize(net, 802, 0.2);
  const auto sched = diffusion::make_linear_schedule(1000, 1e-4, 0.02);
  diffusion::EpsModel<float> model = [&](const TF& x, std::span<const int> t, std::span<const int> c,
                                         std::size_t batch) { return net.predict(x, t, c, batch); };
  auto run = [&](int steps, double* secs) {
    Rng r(803);
    const auto t0 = Clock::now();
    auto out = diffusion::sample<float>(model, 1, 256, sched, {diffusion::SamplerRule::kDdim, steps, false}, {},
                                        nullptr, r);
    if (secs) *secs = seconds_since(t0);
    return out.xyz;
  };
  double a = 0, b = 0, c = 0, d = 0;
  auto x1 = run(100, &a);
  auto x2 = run(100, &b);
  const bool same = std::memcmp(x1.data(), x2.data(), x1.size() * sizeof(float)) == 0;
  run(1000, &c);
  run(100, &d);
  const double short_run = std::min({a, b, d});
  const double ratio = c / short_run / 10.0;
  return {same && std::abs(ratio - 1.0) <= 0.15,
          std::string(same ? "bitwise identical" : "runs differ") + ", per-step time ratio 1000/100 = " + fmt(ratio) +
              " (" + fmt(c) + " s vs " + fmt(short_run) + " s)"};
}

Outcome known_points() {
  const fs::path dir = scratch() / "known";
  fs::create_directories(dir);
  Rng init(901);
  model::Network<float> net(model::preset_config("spvd-tiny"), init);
  randomize(net, 902, 0.15);
  const auto sched = diffusion::make_linear_schedule(100, 1e-3, 0.2);
  const fs::path ck = dir / "model.spvd";
  data::save_checkpoint(net, sched, 0, ck);

  cli::RunConfig cfg;
  cfg.sample.rule = diffusion::SamplerRule::kDdim;
  cfg.sample.steps = 10;
  std::ostringstream log;
  std::size_t checked = 0, moved = 0;
  std::string problems;

  Rng shape_rng(903);
  for (auto kind : {data::ShapeKind::kChairoid, data::ShapeKind::kTableoid}) {
    auto cloud = data::synth_shape(kind, 2048, shape_rng);
    // Off-centre and scaled so the normalization round trip is not the identity.
    for (std::size_t i = 0; i < cloud.xyz.size(); ++i) cloud.xyz[i] = cloud.xyz[i] * 2.7f + 0.3f * (i % 3);
    const fs::path in = dir / (data::to_string(kind) + ".ply");
    data::save_ply(cloud, in);
    for (int m : {1, 2, 3}) {
      const fs::path out = dir / (data::to_string(kind) + "_m" + std::to_string(m) + ".ply");
      cli::cmd_complete(ck, in, cfg, m, 904 + m, out, -1, log);
      auto res = data::load_ply(out);
      auto meta = nlohmann::json::parse(data::read_file(fs::path(out.string() + ".json")));
      auto free_parts = meta["free_parts"].get<std::vector<int>>();
      std::size_t free = 0;
      if (res.size() != cloud.size()) problems += " size";
      for (std::size_t i = 0; i < cloud.size() && i < res.size(); ++i) {
        if (std::find(free_parts.begin(), free_parts.end(), cloud.parts[i]) != free_parts.end()) {
          ++free;
          continue;
        }
        ++checked;
        moved += std::memcmp(&cloud.xyz[i * 3], &res.xyz[i * 3], 3 * sizeof(float)) != 0;
      }
      if (free != meta["free_points"].get<std::size_t>() || free == 0) problems += " free-count";
    }
  }
  auto dense = data::synth_shape(data::ShapeKind::kBox, 2048, shape_rng);
  data::PointCloud sparse_in;
  for (std::size_t i = 0; i < 512; ++i)
    for (int a = 0; a < 3; ++a) sparse_in.xyz.push_back(dense.xyz[i * 4 * 3 + a] * 1.5f - 0.2f);
  const fs::path in = dir / "sparse.xyz";
  data::save_xyz(sparse_in, in);
  const fs::path out = dir / "dense.ply";
  cli::cmd_superres(ck, in, cfg, 2048, 905, out, -1, log);
  auto res = data::load_ply(out);
  if (res.size() != 2048) problems += " superres size " + std::to_string(res.size());
  for (std::size_t i = 0; i < 512 && i < res.size(); ++i) {
    ++checked;
    moved += std::memcmp(&sparse_in.xyz[i * 3], &res.xyz[i * 3], 3 * sizeof(float)) != 0;
  }
  return {moved == 0 && problems.empty(), std::to_string(checked) + " KNOWN points, " + std::to_string(moved) +
                                              " changed, superres emitted " + std::to_string(res.size()) + problems};
}

std::uint32_t ulp_distance(float a, float b) {
  auto key = [](float f) {
    auto u = std::bit_cast<std::uint32_t>(f);
    return (u & 0x80000000u) ? 0x80000000u - (u & 0x7fffffffu) : 0x80000000u + u;
  };
  auto ka = key(a), kb = key(b);
  return ka > kb ? ka - kb : kb - ka;
}

template <typename E, typename F>
bool throws_as(F&& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome persistence(const fs::path& fixtures) {
  std::string problems;
  Rng init(1001);
  model::Network<float> net(model::preset_config("spvd-tiny"), init);
  randomize(net, 1002, 0.3);
  const auto sched = diffusion::make_linear_schedule(200, 1e-4, 0.05);
  const fs::path ck = scratch() / "roundtrip.spvd";
  data::save_checkpoint(net, sched, 42, ck, 9);
  auto loaded = data::load_checkpoint(ck);
  auto net2 = data::restore_network(loaded);
  std::mt19937_64 rng(1003);
  auto xv = test::uniform_values(rng, 2 * 200 * 3, -0.9, 0.9);
  auto x = TF::constant({400, 3}, std::vector<float>(xv.begin(), xv.end()));
  std::vector<int> t{3, 150};
  auto y1 = net.predict(x, t, {}, 2), y2 = net2->predict(x, t, {}, 2);
  if (std::memcmp(y1.data().data(), y2.data().data(), y1.numel() * sizeof(float)) != 0) problems += " forward";
  if (loaded.step != 42 || loaded.schedule_steps != 200) problems += " header";

  std::uint32_t worst_ulp = 0;
  std::size_t clouds = 0;
  Rng srng(1004);
  for (int rep = 0; rep < 6; ++rep) {
    auto cloud = data::synth_shape(data::all_shape_kinds()[rep % 5], 300, srng);
    for (auto& v : cloud.xyz) v = v * 3.1f + 1e-3f;
    auto compare = [&](const data::PointCloud& back) {
      if (back.size() != cloud.size()) {
        worst_ulp = ~0u;
        return;
      }
      for (std::size_t i = 0; i < cloud.xyz.size(); ++i) worst_ulp = std::max(worst_ulp, ulp_distance(cloud.xyz[i], back.xyz[i]));
      if (back.parts != cloud.parts) problems += " parts";
      ++clouds;
    };
    compare(data::parse_ply(data::format_ply(cloud, data::PlyFormat::kBinary)));
    compare(data::parse_ply(data::format_ply(cloud, data::PlyFormat::kAscii)));
    const fs::path p = scratch() / ("cloud" + std::to_string(rep) + ".xyz");
    data::save_xyz(cloud, p);
    auto xyz_back = data::load_xyz(p);
    xyz_back.parts = cloud.parts;
    compare(xyz_back);
  }
  if (worst_ulp > 1) problems += " ulp";

  // Corrupted inputs.
  const std::string good = data::read_file(ck);
  std::size_t corrupted = 0, rejected = 0;
  auto expect_ck = [&](const std::string& bytes) {
    ++corrupted;
    rejected += throws_as<CheckpointError>([&] { data::decode_checkpoint(bytes); });
  };
  expect_ck(good.substr(0, good.size() / 2));
  expect_ck(good.substr(0, 10));
  expect_ck(good + "x");
  std::string flipped = good;
  flipped[4] = 9;  // version
  expect_ck(flipped);
  ++corrupted;
  rejected += throws_as<CheckpointError>([&] { data::load_checkpoint(fixtures / "bad_magic.spvd"); });
  ++corrupted;
  rejected += throws_as<CheckpointError>([&] { data::load_checkpoint(scratch() / "missing.spvd"); });
  for (const char* name : {"truncated_vertices.ply", "integer_coordinate.ply", "big_endian.ply", "bad_token.ply"}) {
    ++corrupted;
    rejected += throws_as<ParseError>([&] { data::load_ply(fixtures / name); });
  }
  ++corrupted;
  rejected += throws_as<ParseError>([&] { data::load_xyz(fixtures / "bad_token.xyz"); });
  auto bin = data::format_ply(data::synth_shape(data::ShapeKind::kBox, 64, srng));
  ++corrupted;
  rejected += throws_as<ParseError>([&] { data::parse_ply(bin.substr(0, bin.size() - 5)); });
  if (rejected != corrupted) problems += " corrupt";

  return {problems.empty(), "checkpoint forward bit-identical, " + std::to_string(clouds) + " cloud round trips within " +
                                std::to_string(worst_ulp) + " ULP, " + std::to_string(rejected) + "/" +
                                std::to_string(corrupted) + " corrupted inputs rejected" + problems};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spvd acceptance checks"};
  std::vector<int> only;
  std::string fixtures = SPVD_FIXTURE_DIR;
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_option("--fixtures", fixtures, "fixture directory");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"forward process matches closed form", forward_process},
      {"finite-difference gradients", gradients},
      {"sparse conv equals dense oracle", sparse_conv_oracle},
      {"trilinear devoxelization", trilinear},
      {"ragged batches equal per-sample loops", ragged_batches},
      {"metric oracles", metric_oracles},
      {"overfit small mixed set", overfit},
      {"DDIM determinism and linear cost", ddim_timing},
      {"KNOWN points preserved", known_points},
      {"checkpoint and file round trips", [&] { return persistence(fixtures); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << ": " << criteria[i].first << " (" << o.detail << ")"
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
