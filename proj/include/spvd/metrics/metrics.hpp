#pragma once

// Shape distances and set-level generative metrics.
//
// Clouds are flat xyz arrays (N × 3). Chamfer distance uses squared
// Euclidean nearest-neighbour distances, averaged per direction; EMD is the
// mean Euclidean cost of an optimal bijection.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace spvd::metrics {

using CloudF = std::vector<float>;

template <typename T>
double chamfer(std::span<const T> a, std::span<const T> b);

enum class EmdMode { kExact, kApprox, kAuto };

struct EmdOptions {
  EmdMode mode = EmdMode::kAuto;
  /// Relative suboptimality bound of the approximate solver.
  double epsilon = 0.005;
  /// kAuto solves exactly up to this many points.
  std::size_t exact_limit = 512;
};

struct EmdResult {
  double value = 0;
  std::vector<std::int64_t> assignment;  // a[i] ↔ b[assignment[i]]
  /// Certified lower bound on the optimum (equals value for exact solves).
  double lower_bound = 0;
  bool exact = false;
};

template <typename T>
EmdResult emd(std::span<const T> a, std::span<const T> b, const EmdOptions& opts = {});

/// Exact minimum-cost assignment for a dense n × n cost matrix (row-major);
/// returns the column matched to each row.
std::vector<std::int64_t> solve_assignment(std::span<const double> cost, std::size_t n);

enum class Metric { kChamfer, kEmd };
std::string to_string(Metric m);

/// rows × cols pairwise shape distances, row-major.
struct DistanceMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Metric metric = Metric::kChamfer;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

DistanceMatrix pairwise(const std::vector<CloudF>& a, const std::vector<CloudF>& b, Metric metric,
                        const EmdOptions& emd_opts = {});

/// Leave-one-out 1-NN classification accuracy (percent) of the merged
/// gen ∪ ref set. Ties go to the lower merged index (gen before ref).
double one_nn_accuracy(const DistanceMatrix& gen_gen, const DistanceMatrix& ref_ref, const DistanceMatrix& gen_ref);

/// Mean over ref shapes of the distance to the closest gen shape.
double mmd(const DistanceMatrix& gen_ref);
/// Percent of ref shapes that are the nearest ref shape of some gen shape.
double coverage(const DistanceMatrix& gen_ref);

struct MetricValues {
  double one_nna = 0;
  double mmd = 0;
  double cov = 0;
};

struct RunMetrics {
  MetricValues cd;
  std::optional<MetricValues> emd;  // empty when EMD was skipped
};

struct ReportOptions {
  int runs = 3;
  std::uint64_t seed = 0;
  bool with_emd = true;
  EmdOptions emd;
};

struct MetricReport {
  std::vector<RunMetrics> runs;
  std::size_t best_run = 0;
  std::size_t gen_size = 0;
  std::size_t ref_size = 0;
  std::uint64_t seed = 0;
  /// Why EMD is absent, when it is.
  std::string emd_note;

  const RunMetrics& best() const { return runs.at(best_run); }
  nlohmann::json to_json() const;
  /// Aligned text table: metric, CD value, EMD value.
  std::string table() const;
};

RunMetrics evaluate(const std::vector<CloudF>& gen, const std::vector<CloudF>& ref, bool with_emd,
                    const EmdOptions& emd_opts = {});

/// Each run evaluates a seeded random subset of |ref| shapes from `gen`
/// (the whole set when |gen| <= |ref|). The best run has 1-NNA closest to
/// 50 % (mean over the computed metrics).
MetricReport eval_report(const std::vector<CloudF>& gen, const std::vector<CloudF>& ref, const ReportOptions& opts);

/// Same, with one explicit generated set per run.
MetricReport eval_report_runs(const std::vector<std::vector<CloudF>>& gen_runs, const std::vector<CloudF>& ref,
                              const ReportOptions& opts);

}  // namespace spvd::metrics
