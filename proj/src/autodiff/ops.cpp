#include "spvd/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spvd/common/error.hpp"

namespace spvd::ad {

namespace {

template <typename T>
Node<T>& in(Node<T>& self, std::size_t i) {
  return *self.inputs[i];
}

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(s));
}

bool is_row_vector_for(const Shape& vec, const Shape& mat) {
  if (mat.size() != 2) return false;
  if (vec.size() == 1) return vec[0] == mat[1];
  return vec.size() == 2 && vec[0] == 1 && vec[1] == mat[1];
}

enum class Layout { kSame, kRowB, kRowA };

Layout broadcast_layout(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Layout::kSame;
  if (is_row_vector_for(b, a)) return Layout::kRowB;
  if (is_row_vector_for(a, b)) return Layout::kRowA;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
}

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* name) {
  const Layout layout = broadcast_layout(a.shape(), b.shape(), name);
  const Tensor<T>& big = layout == Layout::kRowA ? b : a;
  const std::size_t n = big.numel();
  const std::size_t f = layout == Layout::kSame ? n : big.cols();
  // Index of the a/b element participating in output element i.
  auto ia = [=](std::size_t i) { return layout == Layout::kRowA ? i % f : i; };
  auto ib = [=](std::size_t i) { return layout == Layout::kRowB ? i % f : i; };

  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[ia(i)], y = bv[ib(i)];
    out[i] = kind == Binary::kAdd ? x + y : kind == Binary::kSub ? x - y : x * y;
  }
  return make_result<T>(name, big.shape(), std::move(out), {a, b}, [=](Node<T>& self) {
    Node<T>& na = in(self, 0);
    Node<T>& nb = in(self, 1);
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T d = kind == Binary::kMul ? g[i] * nb.value[ib(i)] : g[i];
        ga[ia(i)] += d;
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T d = kind == Binary::kMul ? g[i] * na.value[ia(i)] : kind == Binary::kSub ? -g[i] : g[i];
        gb[ib(i)] += d;
      }
    }
  });
}

// C[m,n] += A[m,k] · B[k,n]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += G[m,n] · B[k,n]ᵀ
template <typename T>
void gemm_nt_acc(const T* g, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      da[i * k + p] += s;
    }
  }
}

// dB[k,n] += A[m,k]ᵀ · G[m,n]
template <typename T>
void gemm_tn_acc(const T* a, const T* g, T* db, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(k); ++p) {
    T* drow = db + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[i * k + p];
      const T* grow = g + i * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

void check_index(std::int64_t v, std::size_t bound, const char* op) {
  if (v < 0 || static_cast<std::size_t>(v) >= bound) {
    throw IndexError(std::string(op) + ": index " + std::to_string(v) + " outside [0, " + std::to_string(bound) +
                     ")");
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [=](Node<T>& self) {
    Node<T>& na = in(self, 0);
    Node<T>& nb = in(self, 1);
    if (na.requires_grad) gemm_nt_acc(self.grad.data(), nb.value.data(), na.ensure_grad().data(), m, k, n);
    if (nb.requires_grad) gemm_tn_acc(na.value.data(), self.grad.data(), nb.ensure_grad().data(), m, k, n);
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank2(x.shape(), "linear");
  require_rank2(w.shape(), "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw DimensionError("linear: input width " + std::to_string(k) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != n) throw DimensionError("linear: bias " + shape_str(bias.shape()));
  std::vector<T> out(m * n, T(0));
  if (has_bias) {
    const auto bv = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * n);
  }
  gemm_acc(x.data().data(), w.data().data(), out.data(), m, k, n);
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>("linear", {m, n}, std::move(out), std::move(inputs), [=](Node<T>& self) {
    Node<T>& nx = in(self, 0);
    Node<T>& nw = in(self, 1);
    if (nx.requires_grad) gemm_nt_acc(self.grad.data(), nw.value.data(), nx.ensure_grad().data(), m, k, n);
    if (nw.requires_grad) gemm_tn_acc(nx.value.data(), self.grad.data(), nw.ensure_grad().data(), m, k, n);
    if (has_bias && in(self, 2).requires_grad) {
      auto& gb = in(self, 2).ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kMul, "mul");
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (T(1) + std::exp(-xv[i]));
  return make_result<T>("silu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    Node<T>& nx = in(self, 0);
    auto& g = nx.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = nx.value[i];
      const T s = T(1) / (T(1) + std::exp(-v));
      g[i] += self.grad[i] * s * (T(1) + v * (T(1) - s));
    }
  });
}

template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  const Layout ls = broadcast_layout(x.shape(), scale.shape(), "scale_shift");
  const Layout lt = broadcast_layout(x.shape(), shift.shape(), "scale_shift");
  if (ls == Layout::kRowA || lt == Layout::kRowA) {
    throw DimensionError("scale_shift: scale/shift may not be larger than the input");
  }
  const std::size_t n = x.numel();
  const std::size_t f = x.cols();
  auto is = [=](std::size_t i) { return ls == Layout::kRowB ? i % f : i; };
  auto it = [=](std::size_t i) { return lt == Layout::kRowB ? i % f : i; };
  const auto xv = x.data(), sv = scale.data(), tv = shift.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = sv[is(i)] * xv[i] + tv[it(i)];
  return make_result<T>("scale_shift", x.shape(), std::move(out), {x, scale, shift}, [=](Node<T>& self) {
    Node<T>& nx = in(self, 0);
    Node<T>& ns = in(self, 1);
    Node<T>& nt = in(self, 2);
    const auto& g = self.grad;
    if (nx.requires_grad) {
      auto& gx = nx.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * ns.value[is(i)];
    }
    if (ns.requires_grad) {
      auto& gs = ns.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gs[is(i)] += g[i] * nx.value[i];
    }
    if (nt.requires_grad) {
      auto& gt = nt.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gt[it(i)] += g[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>("scale", x.shape(), std::move(out), {x}, [=](Node<T>& self) {
    auto& g = in(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>("sum", {}, {s}, {x}, [](Node<T>& self) {
    auto& g = in(self, 0).ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target, std::span<const T> row_weights) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t r = pred.rows(), c = pred.cols();
  std::vector<T> w(row_weights.begin(), row_weights.end());
  if (w.empty()) w.assign(r, T(1));
  if (w.size() != r) throw DimensionError("mse: row weight count does not match rows");
  T wsum = 0;
  for (T v : w) wsum += v;
  if (!(wsum > T(0))) throw ContractError("mse: row weights sum to zero");
  const T norm = T(1) / (wsum * static_cast<T>(c));
  const auto pv = pred.data(), tv = target.data();
  T loss = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (w[i] == T(0)) continue;
    T row = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = pv[i * c + j] - tv[i * c + j];
      row += d * d;
    }
    loss += w[i] * row;
  }
  std::vector<T> tcopy(tv.begin(), tv.end());
  return make_result<T>("mse", {}, {loss * norm}, {pred},
                        [=, tcopy = std::move(tcopy), w = std::move(w)](Node<T>& self) {
                          Node<T>& np = in(self, 0);
                          auto& g = np.ensure_grad();
                          const T s = self.grad[0] * T(2) * norm;
                          for (std::size_t i = 0; i < r; ++i) {
                            if (w[i] == T(0)) continue;
                            for (std::size_t j = 0; j < c; ++j) {
                              g[i * c + j] += s * w[i] * (np.value[i * c + j] - tcopy[i * c + j]);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> segment_reduce(const Tensor<T>& values, std::span<const std::int64_t> ids, std::size_t num_segments,
                         Reduce mode) {
  require_rank2(values.shape(), "segment_reduce");
  const std::size_t r = values.dim(0), f = values.dim(1);
  if (ids.size() != r) throw DimensionError("segment_reduce: one segment id per row required");
  for (std::size_t i = 0; i < r; ++i) {
    check_index(ids[i], num_segments, "segment_reduce");
    if (i > 0 && ids[i] < ids[i - 1]) throw IndexError("segment_reduce: segment ids must be sorted");
  }
  std::vector<std::size_t> counts(num_segments, 0);
  for (auto id : ids) ++counts[static_cast<std::size_t>(id)];

  const auto v = values.data();
  std::vector<T> out(num_segments * f, T(0));
  std::vector<std::int64_t> argmax;  // row feeding each output element (max mode)
  if (mode == Reduce::kMax) {
    argmax.assign(num_segments * f, -1);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t s = static_cast<std::size_t>(ids[i]);
      for (std::size_t j = 0; j < f; ++j) {
        auto& am = argmax[s * f + j];
        if (am < 0 || v[i * f + j] > out[s * f + j]) {
          am = static_cast<std::int64_t>(i);
          out[s * f + j] = v[i * f + j];
        }
      }
    }
  } else {
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t s = static_cast<std::size_t>(ids[i]);
      for (std::size_t j = 0; j < f; ++j) out[s * f + j] += v[i * f + j];
    }
    if (mode == Reduce::kMean) {
      for (std::size_t s = 0; s < num_segments; ++s) {
        if (counts[s] == 0) continue;
        const T c = static_cast<T>(counts[s]);
        for (std::size_t j = 0; j < f; ++j) out[s * f + j] /= c;
      }
    }
  }
  std::vector<std::int64_t> id_copy(ids.begin(), ids.end());
  return make_result<T>(
      "segment_reduce", {num_segments, f}, std::move(out), {values},
      [=, id_copy = std::move(id_copy), counts = std::move(counts), argmax = std::move(argmax)](Node<T>& self) {
        auto& g = in(self, 0).ensure_grad();
        if (mode == Reduce::kMax) {
          for (std::size_t e = 0; e < argmax.size(); ++e) {
            if (argmax[e] >= 0) g[static_cast<std::size_t>(argmax[e]) * f + e % f] += self.grad[e];
          }
          return;
        }
        for (std::size_t i = 0; i < r; ++i) {
          const std::size_t s = static_cast<std::size_t>(id_copy[i]);
          const T w = mode == Reduce::kMean ? T(1) / static_cast<T>(counts[s]) : T(1);
          for (std::size_t j = 0; j < f; ++j) g[i * f + j] += w * self.grad[s * f + j];
        }
      });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int64_t> idx) {
  require_rank2(table.shape(), "gather_rows");
  const std::size_t r = table.dim(0), f = table.dim(1), k = idx.size();
  for (auto i : idx) check_index(i, r, "gather_rows");
  const auto tv = table.data();
  std::vector<T> out(k * f);
  for (std::size_t i = 0; i < k; ++i) {
    std::copy_n(tv.begin() + idx[i] * f, f, out.begin() + i * f);
  }
  std::vector<std::int64_t> idx_copy(idx.begin(), idx.end());
  return make_result<T>("gather_rows", {k, f}, std::move(out), {table},
                        [=, idx_copy = std::move(idx_copy)](Node<T>& self) {
                          auto& g = in(self, 0).ensure_grad();
                          for (std::size_t i = 0; i < k; ++i) {
                            const std::size_t row = static_cast<std::size_t>(idx_copy[i]);
                            for (std::size_t j = 0; j < f; ++j) g[row * f + j] += self.grad[i * f + j];
                          }
                        });
}

template <typename T>
Tensor<T> scatter_add(const Tensor<T>& base, std::span<const std::int64_t> idx, const Tensor<T>& src) {
  require_rank2(base.shape(), "scatter_add");
  require_rank2(src.shape(), "scatter_add");
  const std::size_t r = base.dim(0), f = base.dim(1), k = idx.size();
  if (src.dim(0) != k || src.dim(1) != f) {
    throw DimensionError("scatter_add: source " + shape_str(src.shape()) + " does not match index/base");
  }
  for (auto i : idx) check_index(i, r, "scatter_add");
  std::vector<T> out(base.data().begin(), base.data().end());
  const auto sv = src.data();
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < f; ++j) out[idx[i] * f + j] += sv[i * f + j];
  }
  std::vector<std::int64_t> idx_copy(idx.begin(), idx.end());
  return make_result<T>("scatter_add", {r, f}, std::move(out), {base, src},
                        [=, idx_copy = std::move(idx_copy)](Node<T>& self) {
                          Node<T>& nb = in(self, 0);
                          Node<T>& ns = in(self, 1);
                          if (nb.requires_grad) {
                            auto& g = nb.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (ns.requires_grad) {
                            auto& g = ns.ensure_grad();
                            for (std::size_t i = 0; i < k; ++i) {
                              const std::size_t row = static_cast<std::size_t>(idx_copy[i]);
                              for (std::size_t j = 0; j < f; ++j) g[i * f + j] += self.grad[row * f + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, std::span<const std::int64_t> sample_ids,
                     const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  require_rank2(x.shape(), "group_norm");
  const std::size_t r = x.dim(0), f = x.dim(1);
  if (groups == 0 || f % groups != 0) {
    throw ConfigError("group_norm: width " + std::to_string(f) + " not divisible by " + std::to_string(groups) +
                      " groups");
  }
  if (sample_ids.size() != r) throw DimensionError("group_norm: one sample id per row required");
  if (gamma.numel() != f || beta.numel() != f) throw DimensionError("group_norm: gamma/beta width mismatch");
  std::size_t num_samples = 0;
  for (auto id : sample_ids) {
    if (id < 0) throw IndexError("group_norm: negative sample id");
    num_samples = std::max<std::size_t>(num_samples, static_cast<std::size_t>(id) + 1);
  }
  const std::size_t gs = f / groups;
  const std::size_t stats = num_samples * groups;
  std::vector<double> mu(stats, 0.0), var(stats, 0.0), cnt(stats, 0.0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t s = static_cast<std::size_t>(sample_ids[i]);
    for (std::size_t j = 0; j < f; ++j) {
      const std::size_t k = s * groups + j / gs;
      mu[k] += xv[i * f + j];
      cnt[k] += 1.0;
    }
  }
  for (std::size_t k = 0; k < stats; ++k) mu[k] = cnt[k] > 0 ? mu[k] / cnt[k] : 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t s = static_cast<std::size_t>(sample_ids[i]);
    for (std::size_t j = 0; j < f; ++j) {
      const std::size_t k = s * groups + j / gs;
      const double d = xv[i * f + j] - mu[k];
      var[k] += d * d;
    }
  }
  std::vector<T> inv_std(stats);
  for (std::size_t k = 0; k < stats; ++k) {
    const double v = cnt[k] > 0 ? var[k] / cnt[k] : 0.0;
    inv_std[k] = static_cast<T>(1.0 / std::sqrt(v + eps));
  }
  std::vector<T> xhat(r * f);
  std::vector<T> out(r * f);
  const auto gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t s = static_cast<std::size_t>(sample_ids[i]);
    for (std::size_t j = 0; j < f; ++j) {
      const std::size_t k = s * groups + j / gs;
      const T h = static_cast<T>((xv[i * f + j] - mu[k])) * inv_std[k];
      xhat[i * f + j] = h;
      out[i * f + j] = gv[j % gv.size()] * h + bv[j % bv.size()];
    }
  }
  std::vector<std::int64_t> ids(sample_ids.begin(), sample_ids.end());
  return make_result<T>(
      "group_norm", x.shape(), std::move(out), {x, gamma, beta},
      [=, ids = std::move(ids), xhat = std::move(xhat), inv_std = std::move(inv_std),
       cnt = std::move(cnt)](Node<T>& self) {
        Node<T>& nx = in(self, 0);
        Node<T>& ng = in(self, 1);
        Node<T>& nb = in(self, 2);
        const auto& g = self.grad;
        if (ng.requires_grad || nb.requires_grad) {
          auto& gg = ng.ensure_grad();
          auto& gb = nb.ensure_grad();
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
              gg[j] += g[i * f + j] * xhat[i * f + j];
              gb[j] += g[i * f + j];
            }
          }
        }
        if (!nx.requires_grad) return;
        // dx = inv_std · (dh - mean(dh) - xhat · mean(dh · xhat)), dh = g · gamma
        std::vector<double> m1(stats, 0.0), m2(stats, 0.0);
        for (std::size_t i = 0; i < r; ++i) {
          const std::size_t s = static_cast<std::size_t>(ids[i]);
          for (std::size_t j = 0; j < f; ++j) {
            const std::size_t k = s * groups + j / gs;
            const double dh = static_cast<double>(g[i * f + j]) * ng.value[j];
            m1[k] += dh;
            m2[k] += dh * xhat[i * f + j];
          }
        }
        for (std::size_t k = 0; k < stats; ++k) {
          if (cnt[k] > 0) {
            m1[k] /= cnt[k];
            m2[k] /= cnt[k];
          }
        }
        auto& gx = nx.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          const std::size_t s = static_cast<std::size_t>(ids[i]);
          for (std::size_t j = 0; j < f; ++j) {
            const std::size_t k = s * groups + j / gs;
            const double dh = static_cast<double>(g[i * f + j]) * ng.value[j];
            gx[i * f + j] += static_cast<T>(inv_std[k] * (dh - m1[k] - xhat[i * f + j] * m2[k]));
          }
        }
      });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "concat_cols");
  require_rank2(b.shape(), "concat_cols");
  if (a.dim(0) != b.dim(0)) throw DimensionError("concat_cols: row counts differ");
  const std::size_t r = a.dim(0), fa = a.dim(1), fb = b.dim(1), f = fa + fb;
  std::vector<T> out(r * f);
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.begin() + i * fa, fa, out.begin() + i * f);
    std::copy_n(bv.begin() + i * fb, fb, out.begin() + i * f + fa);
  }
  return make_result<T>("concat_cols", {r, f}, std::move(out), {a, b}, [=](Node<T>& self) {
    Node<T>& na = in(self, 0);
    Node<T>& nb = in(self, 1);
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < fa; ++j) g[i * fa + j] += self.grad[i * f + j];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < fb; ++j) g[i * fb + j] += self.grad[i * f + fa + j];
    }
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x.shape(), "slice_cols");
  const std::size_t r = x.dim(0), f = x.dim(1);
  if (begin >= end || end > f) throw DimensionError("slice_cols: invalid column range");
  const std::size_t w = end - begin;
  std::vector<T> out(r * w);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) std::copy_n(xv.begin() + i * f + begin, w, out.begin() + i * w);
  return make_result<T>("slice_cols", {r, w}, std::move(out), {x}, [=](Node<T>& self) {
    auto& g = in(self, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * f + begin + j] += self.grad[i * w + j];
  });
}

#define SPVD_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> silu(const Tensor<T>&);                                                                 \
  template Tensor<T> scale_shift(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                                 \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&, std::span<const T>);                            \
  template Tensor<T> segment_reduce(const Tensor<T>&, std::span<const std::int64_t>, std::size_t, Reduce);  \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::int64_t>);                           \
  template Tensor<T> scatter_add(const Tensor<T>&, std::span<const std::int64_t>, const Tensor<T>&);         \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t, std::span<const std::int64_t>,                \
                                const Tensor<T>&, const Tensor<T>&, double);                                 \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);

SPVD_INSTANTIATE_OPS(float)
SPVD_INSTANTIATE_OPS(double)

}  // namespace spvd::ad
