#include "spvd/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "spvd/common/error.hpp"
#include "spvd/common/rng.hpp"

namespace spvd::metrics {

namespace {

template <typename T>
std::size_t count_points(std::span<const T> a, const char* what) {
  if (a.size() % 3 != 0) throw DimensionError(std::string(what) + ": coordinate count is not a multiple of 3");
  if (a.empty()) throw ContractError(std::string(what) + ": empty point set");
  return a.size() / 3;
}

template <typename T>
double sq_dist(std::span<const T> a, std::size_t i, std::span<const T> b, std::size_t j) {
  const double dx = static_cast<double>(a[i * 3]) - static_cast<double>(b[j * 3]);
  const double dy = static_cast<double>(a[i * 3 + 1]) - static_cast<double>(b[j * 3 + 1]);
  const double dz = static_cast<double>(a[i * 3 + 2]) - static_cast<double>(b[j * 3 + 2]);
  return dx * dx + dy * dy + dz * dz;
}

template <typename T>
std::vector<double> cost_matrix(std::span<const T> a, std::span<const T> b, std::size_t n) {
  std::vector<double> c(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = std::sqrt(sq_dist(a, i, b, j));
  return c;
}

double assignment_cost(std::span<const double> cost, std::size_t n, const std::vector<std::int64_t>& match) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += cost[i * n + match[i]];
  return s;
}

// Gauss-Seidel auction with ε-scaling on benefits −c. Returns the matching
// and the dual lower bound of the last phase, or nothing when the requested
// relative gap could not be certified.
std::optional<std::pair<std::vector<std::int64_t>, double>> auction(std::span<const double> cost, std::size_t n,
                                                                   double rel_gap) {
  const double cmax = *std::max_element(cost.begin(), cost.end());
  if (cmax == 0) return std::pair{std::vector<std::int64_t>(n, 0), 0.0};
  std::vector<double> price(n, 0.0);
  std::vector<std::int64_t> owner(n), match(n);
  double eps = cmax / 4;
  const double eps_min = cmax * 1e-10;
  while (eps >= eps_min) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(match.begin(), match.end(), -1);
    std::deque<std::size_t> open(n);
    std::iota(open.begin(), open.end(), 0);
    while (!open.empty()) {
      const std::size_t i = open.front();
      open.pop_front();
      double v1 = -std::numeric_limits<double>::infinity(), v2 = v1;
      std::size_t j1 = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = -cost[i * n + j] - price[j];
        if (v > v1) {
          v2 = v1;
          v1 = v;
          j1 = j;
        } else if (v > v2) {
          v2 = v;
        }
      }
      price[j1] += (n > 1 ? v1 - v2 : 0.0) + eps;
      if (owner[j1] >= 0) {
        match[owner[j1]] = -1;
        open.push_back(static_cast<std::size_t>(owner[j1]));
      }
      owner[j1] = static_cast<std::int64_t>(i);
      match[i] = static_cast<std::int64_t>(j1);
    }
    const double primal = assignment_cost(cost, n, match);
    double dual = std::accumulate(price.begin(), price.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) best = std::max(best, -cost[i * n + j] - price[j]);
      dual += best;
    }
    const double lower = std::max(0.0, -dual);
    if (primal <= (1 + rel_gap) * lower) return std::pair{match, lower};
    eps /= 4;
  }
  return std::nullopt;
}

}  // namespace

template <typename T>
double chamfer(std::span<const T> a, std::span<const T> b) {
  const std::size_t n = count_points(a, "chamfer"), m = count_points(b, "chamfer");
  std::vector<double> best_b(m, std::numeric_limits<double>::infinity());
  double sa = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      const double d = sq_dist(a, i, b, j);
      best = std::min(best, d);
      best_b[j] = std::min(best_b[j], d);
    }
    sa += best;
  }
  double sb = 0;
  for (double v : best_b) sb += v;
  return sa / static_cast<double>(n) + sb / static_cast<double>(m);
}

std::vector<std::int64_t> solve_assignment(std::span<const double> cost, std::size_t n) {
  if (cost.size() != n * n) throw DimensionError("assignment: cost matrix must be n × n");
  // Shortest augmenting paths with potentials, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::int64_t> match(n);
  for (std::size_t j = 1; j <= n; ++j) match[p[j] - 1] = static_cast<std::int64_t>(j - 1);
  return match;
}

template <typename T>
EmdResult emd(std::span<const T> a, std::span<const T> b, const EmdOptions& opts) {
  const std::size_t n = count_points(a, "emd"), m = count_points(b, "emd");
  if (n != m) {
    throw ContractError("emd: point counts differ (" + std::to_string(n) + " vs " + std::to_string(m) + ")");
  }
  const auto cost = cost_matrix(a, b, n);
  EmdResult r;
  const bool exact = opts.mode == EmdMode::kExact || (opts.mode == EmdMode::kAuto && n <= opts.exact_limit);
  if (!exact) {
    if (auto sol = auction(cost, n, opts.epsilon)) {
      r.assignment = std::move(sol->first);
      r.value = assignment_cost(cost, n, r.assignment) / static_cast<double>(n);
      r.lower_bound = sol->second / static_cast<double>(n);
      return r;
    }
  }
  r.assignment = solve_assignment(cost, n);
  r.value = assignment_cost(cost, n, r.assignment) / static_cast<double>(n);
  r.lower_bound = r.value;
  r.exact = true;
  return r;
}

std::string to_string(Metric m) { return m == Metric::kChamfer ? "CD" : "EMD"; }

DistanceMatrix pairwise(const std::vector<CloudF>& a, const std::vector<CloudF>& b, Metric metric,
                        const EmdOptions& emd_opts) {
  DistanceMatrix d{a.size(), b.size(), metric, std::vector<double>(a.size() * b.size())};
  const auto total = static_cast<std::int64_t>(d.values.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t k = 0; k < total; ++k) {
    const std::size_t i = static_cast<std::size_t>(k) / d.cols, j = static_cast<std::size_t>(k) % d.cols;
    std::span<const float> x(a[i]), y(b[j]);
    d.values[k] = metric == Metric::kChamfer ? chamfer(x, y) : emd(x, y, emd_opts).value;
  }
  return d;
}

double one_nn_accuracy(const DistanceMatrix& gg, const DistanceMatrix& rr, const DistanceMatrix& gr) {
  const std::size_t ng = gg.rows, nr = rr.rows;
  if (ng < 2 || nr < 2) throw ContractError("1-NNA: each set needs at least 2 shapes");
  if (gg.cols != ng || rr.cols != nr || gr.rows != ng || gr.cols != nr) {
    throw DimensionError("1-NNA: distance matrix shapes are inconsistent");
  }
  // Merged index: gen shapes 0..ng-1, then ref shapes.
  auto dist = [&](std::size_t x, std::size_t y) {
    if (x < ng && y < ng) return gg.at(x, y);
    if (x >= ng && y >= ng) return rr.at(x - ng, y - ng);
    if (x < ng) return gr.at(x, y - ng);
    return gr.at(y, x - ng);
  };
  const std::size_t total = ng + nr;
  std::size_t correct = 0;
  for (std::size_t x = 0; x < total; ++x) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t y = 0; y < total; ++y) {
      if (y == x) continue;
      const double d = dist(x, y);
      if (d < best) {
        best = d;
        arg = y;
      }
    }
    if ((x < ng) == (arg < ng)) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

double mmd(const DistanceMatrix& gr) {
  if (gr.rows == 0 || gr.cols == 0) throw ContractError("MMD: empty set");
  double s = 0;
  for (std::size_t j = 0; j < gr.cols; ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < gr.rows; ++i) best = std::min(best, gr.at(i, j));
    s += best;
  }
  return s / static_cast<double>(gr.cols);
}

double coverage(const DistanceMatrix& gr) {
  if (gr.rows == 0 || gr.cols == 0) throw ContractError("COV: empty set");
  std::vector<char> hit(gr.cols, 0);
  for (std::size_t i = 0; i < gr.rows; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < gr.cols; ++j)
      if (gr.at(i, j) < gr.at(i, arg)) arg = j;
    hit[arg] = 1;
  }
  return 100.0 * static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(gr.cols);
}

RunMetrics evaluate(const std::vector<CloudF>& gen, const std::vector<CloudF>& ref, bool with_emd,
                    const EmdOptions& emd_opts) {
  auto values = [&](Metric m) {
    const auto gg = pairwise(gen, gen, m, emd_opts);
    const auto rr = pairwise(ref, ref, m, emd_opts);
    const auto gr = pairwise(gen, ref, m, emd_opts);
    return MetricValues{one_nn_accuracy(gg, rr, gr), mmd(gr), coverage(gr)};
  };
  RunMetrics r;
  r.cd = values(Metric::kChamfer);
  if (with_emd) r.emd = values(Metric::kEmd);
  return r;
}

namespace {

double nna_gap(const RunMetrics& r) {
  double g = std::abs(r.cd.one_nna - 50.0);
  if (r.emd) g = 0.5 * (g + std::abs(r.emd->one_nna - 50.0));
  return g;
}

std::size_t pick_best(const std::vector<RunMetrics>& runs) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < runs.size(); ++k)
    if (nna_gap(runs[k]) < nna_gap(runs[best])) best = k;
  return best;
}

}  // namespace

MetricReport eval_report_runs(const std::vector<std::vector<CloudF>>& gen_runs, const std::vector<CloudF>& ref,
                              const ReportOptions& opts) {
  if (gen_runs.empty()) throw ContractError("eval: no runs");
  MetricReport rep;
  rep.seed = opts.seed;
  rep.ref_size = ref.size();
  rep.gen_size = gen_runs.front().size();
  for (const auto& g : gen_runs) rep.runs.push_back(evaluate(g, ref, opts.with_emd, opts.emd));
  rep.best_run = pick_best(rep.runs);
  return rep;
}

MetricReport eval_report(const std::vector<CloudF>& gen, const std::vector<CloudF>& ref, const ReportOptions& opts) {
  if (opts.runs < 1) throw ConfigError("eval: runs must be at least 1");
  std::vector<std::vector<CloudF>> sets;
  for (int k = 0; k < opts.runs; ++k) {
    if (gen.size() <= ref.size()) {
      sets.push_back(gen);
      continue;
    }
    auto rng = make_stream(opts.seed, "eval", static_cast<std::uint64_t>(k));
    std::vector<std::size_t> idx(gen.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(ref.size());
    std::sort(idx.begin(), idx.end());
    std::vector<CloudF> pick;
    for (auto i : idx) pick.push_back(gen[i]);
    sets.push_back(std::move(pick));
  }
  auto rep = eval_report_runs(sets, ref, opts);
  rep.gen_size = gen.size();
  return rep;
}

nlohmann::json MetricReport::to_json() const {
  auto values = [](const MetricValues& v) { return nlohmann::json{{"1-NNA", v.one_nna}, {"MMD", v.mmd}, {"COV", v.cov}}; };
  auto run = [&](const RunMetrics& r) {
    nlohmann::json j{{"CD", values(r.cd)}};
    j["EMD"] = r.emd ? values(*r.emd) : nlohmann::json("omitted");
    return j;
  };
  nlohmann::json j;
  j["runs"] = nlohmann::json::array();
  for (const auto& r : runs) j["runs"].push_back(run(r));
  j["best_run"] = best_run;
  j["best"] = run(best());
  j["gen_size"] = gen_size;
  j["ref_size"] = ref_size;
  j["seed"] = seed;
  if (!emd_note.empty()) j["emd_note"] = emd_note;
  j["conventions"] = {{"CD", "mean squared nearest-neighbour distance, summed over both directions"},
                      {"EMD", "mean Euclidean cost of an optimal bijection"},
                      {"1-NNA", "percent, 50 is ideal"},
                      {"COV", "percent"}};
  return j;
}

std::string MetricReport::table() const {
  const auto& b = best();
  std::ostringstream os;
  os << std::left << std::setw(8) << "metric" << std::right << std::setw(14) << "CD" << std::setw(14) << "EMD"
     << "\n";
  auto row = [&](const char* name, double cd, std::optional<double> em) {
    os << std::left << std::setw(8) << name << std::right << std::fixed << std::setprecision(6) << std::setw(14) << cd;
    if (em) {
      os << std::setw(14) << *em;
    } else {
      os << std::setw(14) << "omitted";
    }
    os << "\n";
  };
  row("1-NNA", b.cd.one_nna, b.emd ? std::optional(b.emd->one_nna) : std::nullopt);
  row("MMD", b.cd.mmd, b.emd ? std::optional(b.emd->mmd) : std::nullopt);
  row("COV", b.cd.cov, b.emd ? std::optional(b.emd->cov) : std::nullopt);
  return os.str();
}

template double chamfer(std::span<const float>, std::span<const float>);
template double chamfer(std::span<const double>, std::span<const double>);
template EmdResult emd(std::span<const float>, std::span<const float>, const EmdOptions&);
template EmdResult emd(std::span<const double>, std::span<const double>, const EmdOptions&);

}  // namespace spvd::metrics
