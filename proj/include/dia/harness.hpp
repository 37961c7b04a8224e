#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dia/engine.hpp"
#include "dia/io.hpp"
#include "dia/oracle.hpp"

namespace dia {

enum class ExperimentKind { dia_vs_uniform, gradient_variance, sampler_variance, policy_ordering, oracle_table };
std::string_view to_string(ExperimentKind k);
ExperimentKind parse_experiment_kind(std::string_view s);

enum class MseTarget { proxy, truth };

struct DiagnosticsConfig {
  // gradient_variance
  std::vector<int> sizes{200, 500, 1000, 2000};
  int replications = 500;
  double fd_step = 0.05;
  int grad_component = 0;
  // sampler_variance / policy_ordering
  int n = 2000;
  std::vector<long> subset_sizes{10, 30, 100};
  std::vector<double> alphas{0.5, 0.65, 0.8};
  Vec behavior;              // empty: uniform
  std::vector<Vec> targets;  // fixed unconditional policies
  MseTarget mse_target = MseTarget::proxy;
  // oracle_table
  BruteForceOptions oracle;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::dia_vs_uniform;
  DgpConfig dgp;
  int K = 5;
  int batch_n = 1000;
  int trials = 1;
  std::uint64_t seed = 0;
  ResampleConfig resample;
  OptimizeOptions optimize;
  bool warm_start_policy = true;
  // Estimator overrides as JSON (family, encoding, basis, index_offset, ridge,
  // hidden); null means the domain default.
  Json estimator;
  DiagnosticsConfig diagnostics;
  std::string output = "out";

  void validate() const;
};

ExperimentConfig experiment_config_from_json(const Json& j);
Json experiment_config_to_json(const ExperimentConfig& c);
EstimatorSpec resolve_estimator(const Json& overrides, const DgpInstance& dgp);

// Runs fn(i) for i in [0, n) on a small thread pool; results must be written
// to per-index slots. DIA_THREADS overrides the worker count.
void parallel_for(int n, const std::function<void(int)>& fn);

struct PairedSummary {
  int trials = 0;
  double mean_ratio = 0.0;      // mean over trials of final MSE_dia / MSE_uniform
  double ratio_stderr = 0.0;
  double ratio_of_means = 0.0;  // mean final MSE_dia / mean final MSE_uniform
  double mean_diff = 0.0;       // mean of MSE_uniform - MSE_dia
  double diff_stderr = 0.0;
};

struct DiaVsUniformResult {
  CsvTable trace;
  std::vector<double> final_dia, final_uniform;
  PairedSummary summary;
};
DiaVsUniformResult run_dia_vs_uniform(const ExperimentConfig& cfg);
PairedSummary paired_summary(const std::vector<double>& dia, const std::vector<double>& uniform);

struct MomentStats {
  double mean = 0.0, variance = 0.0, stderr_ = 0.0;
  int count = 0;
};
MomentStats moment_stats(const std::vector<double>& v);

struct GradientVarianceRow {
  int n = 0;
  std::string estimator;  // naive, cv, if, fd
  MomentStats stats;
  MomentStats fd;
};
struct GradientVarianceResult {
  std::vector<GradientVarianceRow> rows;
  CsvTable table;
  const GradientVarianceRow& row(int n, const std::string& estimator) const;
};
GradientVarianceResult run_gradient_variance(const ExperimentConfig& cfg);

struct SamplerVarianceRow {
  long k = 0;
  MomentStats rs, is;
  int rs_failures = 0;
  int is_overflows = 0;
};
struct SamplerVarianceResult {
  std::vector<SamplerVarianceRow> rows;
  CsvTable table;
};
SamplerVarianceResult run_sampler_variance(const ExperimentConfig& cfg);

struct PolicyOrderingResult {
  int seeds = 0;
  int consistent = 0;  // seeds whose ranking is identical across all alphas
  int failures = 0;    // seeds where some estimate failed
  CsvTable table;
  double fraction() const { return seeds ? static_cast<double>(consistent) / seeds : 0.0; }
};
PolicyOrderingResult run_policy_ordering(const ExperimentConfig& cfg);

CsvTable oracle_table_csv(const BruteForceResult& r, int m);
BruteForceResult run_oracle_table(const ExperimentConfig& cfg);

// Dispatches on cfg.experiment, writes CSVs plus sidecars into out_dir and
// returns the written CSV paths.
std::vector<std::filesystem::path> run_experiment(const ExperimentConfig& cfg,
                                                  const std::filesystem::path& out_dir);

}  // namespace dia
