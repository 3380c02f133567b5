#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "spvd/autodiff/grad_check.hpp"
#include "spvd/autodiff/ops.hpp"
#include "spvd/common/error.hpp"
#include "spvd/diffusion/diffusion.hpp"
#include "spvd/diffusion/embedding.hpp"
#include "support/random.hpp"

using namespace spvd;
using namespace spvd::diffusion;
using TD = ad::Tensor<double>;

namespace {

EpsModel<double> zero_model() {
  return [](const TD& x, std::span<const int>, std::span<const int>, std::size_t) {
    return TD::zeros(x.shape());
  };
}

EpsModel<double> constant_model(std::vector<double> eps) {
  return [eps](const TD& x, std::span<const int>, std::span<const int>, std::size_t) {
    return TD::constant(x.shape(), eps);
  };
}

PointBatch<double> random_batch(std::mt19937_64& rng, std::size_t b, std::size_t n) {
  return PointBatch<double>(b, n, test::uniform_values(rng, b * n * 3));
}

}  // namespace

TEST_CASE("linear schedule") {
  SUBCASE("T = 2 hand arithmetic") {
    auto s = make_linear_schedule(2, 0.1, 0.2, SigmaVariant::kPosterior);
    CHECK(s.alpha_bar[1] == doctest::Approx(0.9).epsilon(1e-14));
    CHECK(s.alpha_bar[2] == doctest::Approx(0.72).epsilon(1e-14));
    CHECK(s.sigma[2] * s.sigma[2] == doctest::Approx((1 - 0.9) / (1 - 0.72) * 0.2).epsilon(1e-12));
    CHECK(s.sigma[2] * s.sigma[2] == doctest::Approx(0.0714).epsilon(1e-3));
  }
  SUBCASE("default schedule") {
    auto s = make_linear_schedule(1000, 1e-4, 0.02);
    for (int t = 1; t <= 1000; ++t) {
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
      CHECK(s.alpha_bar[t] > 0);
      CHECK(std::abs(s.alpha_bar[t] - s.alpha_bar[t - 1] * s.alpha[t]) < 1e-12);
      CHECK(std::abs(s.alpha[t] - (1 - s.beta[t])) < 1e-12);
      if (t > 1) {
        CHECK(s.beta[t] > s.beta[t - 1]);
        double post = (1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t]) * s.beta[t];
        CHECK(std::abs(s.sigma[t] * s.sigma[t] - post) < 1e-12);
      }
    }
    CHECK(s.alpha_bar[1000] < 5e-5);
    auto q = make_linear_schedule(1000, 1e-4, 0.02, SigmaVariant::kSqrtBeta);
    CHECK(q.sigma[500] == std::sqrt(q.beta[500]));
  }
  SUBCASE("invalid ranges") {
    CHECK_THROWS_AS(make_linear_schedule(1, 0.1, 0.2), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.2, 0.1), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.1), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), ConfigError);
    CHECK_THROWS_AS(parse_sigma_variant("cosine"), ConfigError);
  }
}

TEST_CASE("forward_sample") {
  auto s = make_linear_schedule(1000, 1e-4, 0.02);
  std::mt19937_64 rng(41);
  auto x0 = random_batch(rng, 2, 5);
  SUBCASE("zero noise scales x0") {
    std::vector<double> eps(x0.xyz.size(), 0.0);
    std::vector<int> t{10, 700};
    auto xt = forward_sample<double>(x0, t, eps, s);
    for (std::size_t i = 0; i < xt.size(); ++i) {
      int ti = i < 15 ? 10 : 700;
      CHECK(xt[i] == doctest::Approx(std::sqrt(s.alpha_bar[ti]) * x0.xyz[i]).epsilon(1e-14));
    }
  }
  SUBCASE("ᾱ_T near zero returns approximately the noise") {
    auto eps = test::uniform_values(rng, x0.xyz.size());
    std::vector<int> t{1000, 1000};
    auto xt = forward_sample<double>(x0, t, eps, s);
    for (std::size_t i = 0; i < xt.size(); ++i) CHECK(std::abs(xt[i] - eps[i]) < 1e-2);
  }
  SUBCASE("out-of-range t") {
    std::vector<double> eps(x0.xyz.size(), 0.0);
    std::vector<int> t{0, 5};
    CHECK_THROWS_AS(forward_sample<double>(x0, t, eps, s), ContractError);
    t = {1, 1001};
    CHECK_THROWS_AS(forward_sample<double>(x0, t, eps, s), ContractError);
  }
  SUBCASE("iterated single steps match the closed form (Monte Carlo)") {
    // 10^4 draws of a 3D point; the variance does not depend on x0, so it is
    // pooled over the three coordinates.
    const int draws = 10000;
    const double x0v[3] = {0.7, -0.3, 0.1};
    auto sm = make_linear_schedule(100, 1e-3, 0.2);
    for (int t : {1, 50, 100}) {
      CAPTURE(t);
      std::normal_distribution<double> n01(0.0, 1.0);
      std::vector<double> it(draws * 3), cf(draws * 3);
      PointBatch<double> one(1, 1, {x0v[0], x0v[1], x0v[2]});
      std::vector<int> ts{t};
      for (int d = 0; d < draws; ++d) {
        for (int a = 0; a < 3; ++a) {
          double x = x0v[a];
          for (int k = 1; k <= t; ++k) x = std::sqrt(1 - sm.beta[k]) * x + std::sqrt(sm.beta[k]) * n01(rng);
          it[d * 3 + a] = x;
        }
        std::vector<double> e{n01(rng), n01(rng), n01(rng)};
        auto y = forward_sample<double>(one, ts, e, sm);
        std::copy(y.begin(), y.end(), cf.begin() + d * 3);
      }
      const double v_true = 1 - sm.alpha_bar[t];
      for (const auto* xs : {&it, &cf}) {
        double var = 0;
        for (int a = 0; a < 3; ++a) {
          double m = 0;
          for (int d = 0; d < draws; ++d) m += (*xs)[d * 3 + a] / draws;
          for (int d = 0; d < draws; ++d) var += ((*xs)[d * 3 + a] - m) * ((*xs)[d * 3 + a] - m) / (3.0 * draws);
          const double m_true = std::sqrt(sm.alpha_bar[t]) * x0v[a];
          // Relative to the spread, since the mean can approach 0.
          CHECK(std::abs(m - m_true) / std::max(std::abs(m_true), std::sqrt(v_true)) < 0.02);
        }
        CHECK(std::abs(var - v_true) / v_true < 0.02);
      }
    }
  }
}

TEST_CASE("training_loss") {
  auto s = make_linear_schedule(100, 1e-3, 0.2);
  std::mt19937_64 rng(42);
  auto x0 = random_batch(rng, 3, 16);
  SUBCASE("oracle denoiser gives zero loss") {
    auto eps = test::uniform_values(rng, x0.xyz.size());
    std::vector<int> t{5, 50, 99};
    auto loss = training_loss_fixed<double>(constant_model(eps), x0, t, eps, {}, nullptr, s);
    CHECK(loss.item() == 0.0);
  }
  SUBCASE("zero model has loss close to one") {
    auto big = random_batch(rng, 64, 256);
    Rng r(7);
    auto loss = training_loss<double>(zero_model(), big, {}, nullptr, s, r);
    CHECK(std::abs(loss.item() - 1.0) < 0.05);
  }
  SUBCASE("full FREE mask equals the unmasked loss exactly") {
    auto eps = test::uniform_values(rng, x0.xyz.size());
    std::vector<int> t{5, 50, 99};
    auto m = constant_model(test::uniform_values(rng, x0.xyz.size()));
    SampleMask mask{3, 16, std::vector<std::uint8_t>(48, 0)};
    auto a = training_loss_fixed<double>(m, x0, t, eps, {}, nullptr, s);
    auto b = training_loss_fixed<double>(m, x0, t, eps, {}, &mask, s);
    CHECK(a.item() == b.item());
  }
  SUBCASE("KNOWN points are clean inputs and excluded from the loss") {
    auto eps = test::uniform_values(rng, x0.xyz.size());
    std::vector<int> t{5, 50, 99};
    SampleMask mask{3, 16, std::vector<std::uint8_t>(48, 0)};
    for (std::size_t p = 0; p < 48; p += 2) mask.known[p] = 1;
    std::vector<double> seen;
    EpsModel<double> spy = [&](const TD& x, std::span<const int>, std::span<const int>, std::size_t) {
      seen.assign(x.data().begin(), x.data().end());
      // Exact on FREE points, garbage on KNOWN ones.
      std::vector<double> out(eps);
      for (std::size_t p = 0; p < 48; p += 2) out[p * 3] += 100;
      return TD::constant(x.shape(), out);
    };
    auto loss = training_loss_fixed<double>(spy, x0, t, eps, {}, &mask, s);
    CHECK(loss.item() == 0.0);
    for (std::size_t p = 0; p < 48; p += 2)
      for (int a = 0; a < 3; ++a) CHECK(seen[p * 3 + a] == x0.xyz[p * 3 + a]);
  }
  SUBCASE("mask without FREE points is rejected") {
    SampleMask mask{3, 16, std::vector<std::uint8_t>(48, 0)};
    for (std::size_t p = 16; p < 32; ++p) mask.known[p] = 1;
    Rng r(1);
    CHECK_THROWS_AS(training_loss<double>(zero_model(), x0, {}, &mask, s, r), ContractError);
  }
  SUBCASE("gradient through a tiny network passes finite differences") {
    auto w1 = test::random_param(rng, {3 + 4, 6});
    auto b1 = test::random_param(rng, {6});
    auto w2 = test::random_param(rng, {6, 3});
    EpsModel<double> net = [&](const TD& x, std::span<const int> t, std::span<const int>, std::size_t batch) {
      auto emb = sinusoidal_embedding<double>(t, 4);
      std::vector<std::int64_t> rows(x.rows());
      for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = static_cast<std::int64_t>(r / (x.rows() / batch));
      auto h = ad::concat_cols(x, ad::gather_rows(emb, rows));
      return ad::linear(ad::silu(ad::linear(h, w1, b1)), w2, TD());
    };
    auto eps = test::uniform_values(rng, x0.xyz.size());
    std::vector<int> t{3, 40, 90};
    auto loss = [&] { return training_loss_fixed<double>(net, x0, t, eps, {}, nullptr, s); };
    std::vector<ad::Probe> probes;
    for (auto* p : {&w1, &b1, &w2})
      for (std::size_t i = 0; i < p->numel(); ++i) probes.push_back({*p, i});
    CHECK(ad::grad_check_probes(loss, probes).max_rel_error < 1e-4);
  }
}

TEST_CASE("ddpm") {
  auto s = make_linear_schedule(100, 1e-3, 0.2);
  std::mt19937_64 rng(43);
  SUBCASE("zero prediction and zero noise divide by √α_t") {
    auto x = test::uniform_values(rng, 12);
    std::vector<double> eps(12, 0.0), z(12, 0.0);
    auto y = ddpm_update<double>(x, eps, 40, s, z);
    for (std::size_t i = 0; i < 12; ++i) CHECK(y[i] == doctest::Approx(x[i] / std::sqrt(s.alpha[40])).epsilon(1e-14));
  }
  SUBCASE("t = 1 is deterministic") {
    auto xb = random_batch(rng, 2, 4);
    auto net = constant_model(test::uniform_values(rng, 24));
    Rng r1(1), r2(2);
    CHECK(ddpm_step<double>(net, xb, 1, s, r1) == ddpm_step<double>(net, xb, 1, s, r2));
    CHECK(ddpm_step<double>(net, xb, 2, s, r1) != ddpm_step<double>(net, xb, 2, s, r2));
  }
  SUBCASE("T = 2 with oracle noise prediction recovers x0") {
    auto s2 = make_linear_schedule(2, 0.1, 0.2);
    auto x0 = test::uniform_values(rng, 9);
    auto eps = test::uniform_values(rng, 9);
    PointBatch<double> b(1, 3, x0);
    std::vector<int> t{2};
    auto x2 = forward_sample<double>(b, t, eps, s2);
    std::vector<double> z(9, 0.0);
    // ε that maps x_t to x0 at each step.
    auto oracle = [&](const std::vector<double>& xt, int step) {
      std::vector<double> e(9);
      for (int i = 0; i < 9; ++i)
        e[i] = (xt[i] - std::sqrt(s2.alpha_bar[step]) * x0[i]) / std::sqrt(1 - s2.alpha_bar[step]);
      return e;
    };
    auto x1 = ddpm_update<double>(x2, oracle(x2, 2), 2, s2, z);
    auto xr = ddpm_update<double>(x1, oracle(x1, 1), 1, s2, z);
    for (int i = 0; i < 9; ++i) CHECK(std::abs(xr[i] - x0[i]) < 1e-5);
  }
}

TEST_CASE("ddim") {
  auto s = make_linear_schedule(100, 1e-3, 0.2);
  std::mt19937_64 rng(44);
  auto x0 = random_batch(rng, 1, 4);
  auto eps = test::uniform_values(rng, 12);
  SUBCASE("oracle ε recovers x0 at the terminal step") {
    std::vector<int> t{60};
    auto xt = forward_sample<double>(x0, t, eps, s);
    auto y = ddim_update<double>(xt, eps, 60, 0, s);
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(y[i] - x0.xyz[i]) < 1e-12);
    // Intermediate step lands exactly on the forward process at t_prev.
    std::vector<int> tp{25};
    auto expect = forward_sample<double>(x0, tp, eps, s);
    auto mid = ddim_update<double>(xt, eps, 60, 25, s);
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(mid[i] - expect[i]) < 1e-12);
  }
  SUBCASE("non-monotone pairs are rejected") {
    CHECK_THROWS_AS(ddim_update<double>(eps, eps, 10, 10, s), ContractError);
    CHECK_THROWS_AS(ddim_update<double>(eps, eps, 10, 20, s), ContractError);
  }
  SUBCASE("timestep subsequence") {
    auto ts = ddim_timesteps(1000, 100);
    CHECK(ts.size() == 100);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() == 1);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
    auto all = ddim_timesteps(100, 100);
    for (int i = 0; i < 100; ++i) CHECK(all[i] == 100 - i);
    CHECK(ddim_timesteps(50, 1) == std::vector<int>{50});
    CHECK_THROWS_AS(ddim_timesteps(100, 101), ConfigError);
  }
}

TEST_CASE("sample") {
  auto s = make_linear_schedule(20, 1e-3, 0.2);
  auto net = [](const TD& x, std::span<const int> t, std::span<const int>, std::size_t) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= 0.1 * t[0] / 20.0;
    return TD::constant(x.shape(), out);
  };
  SUBCASE("each rule is deterministic per seed and shaped B × N × 3") {
    for (auto rule : {SamplerRule::kDdpm, SamplerRule::kDdim}) {
      SamplerOptions o{rule, 20, false};
      Rng a(5), b(5), c(6);
      auto x = sample<double>(net, 2, 7, s, o, {}, nullptr, a);
      auto y = sample<double>(net, 2, 7, s, o, {}, nullptr, b);
      auto z = sample<double>(net, 2, 7, s, o, {}, nullptr, c);
      CHECK(x.batch == 2);
      CHECK(x.points == 7);
      CHECK(x.xyz.size() == 42);
      CHECK(x.xyz == y.xyz);
      CHECK(x.xyz != z.xyz);
    }
    SamplerOptions zero{SamplerRule::kDdpm, 20, true};
    Rng a(1), b(1);
    CHECK(sample<double>(net, 1, 3, s, zero, {}, nullptr, a).xyz == sample<double>(net, 1, 3, s, zero, {}, nullptr, b).xyz);
  }
  SUBCASE("steps beyond T are rejected") {
    Rng r(1);
    CHECK_THROWS_AS(sample<double>(net, 1, 3, s, {SamplerRule::kDdim, 21, false}, {}, nullptr, r), ConfigError);
    CHECK_THROWS_AS(sample<double>(net, 1, 3, s, {SamplerRule::kDdpm, 10, false}, {}, nullptr, r), ConfigError);
  }
  SUBCASE("known points are never moved") {
    std::mt19937_64 rng(45);
    KnownPoints<double> k{random_batch(rng, 2, 6), SampleMask{2, 6, {1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 1, 1}}};
    std::size_t calls = 0;
    EpsModel<double> watch = [&](const TD& x, std::span<const int>, std::span<const int>, std::size_t) {
      ++calls;
      for (std::size_t p = 0; p < 12; ++p)
        if (k.mask.known[p])
          for (int a = 0; a < 3; ++a) CHECK(x.data()[p * 3 + a] == k.points.xyz[p * 3 + a]);
      return TD::constant(x.shape(), std::vector<double>(x.numel(), 0.3));
    };
    for (auto rule : {SamplerRule::kDdpm, SamplerRule::kDdim}) {
      Rng r(3);
      auto out = sample<double>(watch, 2, 6, s, {rule, rule == SamplerRule::kDdim ? 7 : 20, false}, {}, &k, r);
      for (std::size_t p = 0; p < 12; ++p)
        if (k.mask.known[p])
          for (int a = 0; a < 3; ++a) CHECK(out.xyz[p * 3 + a] == k.points.xyz[p * 3 + a]);
    }
    CHECK(calls == 27);
  }
  SUBCASE("completion with zero FREE points is rejected") {
    std::mt19937_64 rng(46);
    KnownPoints<double> k{random_batch(rng, 1, 3), SampleMask{1, 3, {1, 1, 1}}};
    Rng r(1);
    CHECK_THROWS_AS(sample<double>(net, 1, 3, s, {SamplerRule::kDdim, 5, false}, {}, &k, r), ContractError);
  }
}

TEST_CASE("embeddings") {
  SUBCASE("t = 0 alternates 0 and 1") {
    std::vector<int> t{0};
    auto e = sinusoidal_embedding<double>(t, 16);
    for (std::size_t i = 0; i < 16; ++i) CHECK(e.data()[i] == (i % 2 == 0 ? 0.0 : 1.0));
  }
  SUBCASE("injective over 1..1000 at width 64") {
    std::vector<int> t(1000);
    for (int i = 0; i < 1000; ++i) t[i] = i + 1;
    auto e = sinusoidal_embedding<double>(t, 64);
    std::set<std::vector<double>> rows;
    for (int i = 0; i < 1000; ++i) rows.insert(std::vector<double>(e.data().begin() + i * 64, e.data().begin() + (i + 1) * 64));
    CHECK(rows.size() == 1000);
    double min_gap = 1e9;
    for (int i = 0; i < 1000; ++i)
      for (int j = i + 1; j < 1000; ++j) {
        double d = 0;
        for (int k = 0; k < 64; ++k) d = std::max(d, std::abs(e.at(i, k) - e.at(j, k)));
        min_gap = std::min(min_gap, d);
      }
    CHECK(min_gap > 1e-6);
  }
  SUBCASE("class lookup and unknown ids") {
    auto table = TD::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    std::vector<int> c{1, 0};
    auto e = class_embedding(table, c);
    CHECK(e.at(0, 0) == 4);
    CHECK(e.at(1, 2) == 3);
    std::vector<int> bad{2};
    CHECK_THROWS_AS(class_embedding(table, bad), ContractError);
    CHECK_THROWS_AS(sinusoidal_embedding<double>(c, 7), ConfigError);
  }
}
