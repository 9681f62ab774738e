#pragma once

// Measure-train-plan loop (safe active learning and the random baseline),
// evaluation metrics, persistence and cross-seed aggregation.

#include "salgpode/gpode_model.hpp"
#include "salgpode/planner.hpp"
#include "salgpode/simulators.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace salgpode {

enum class Method { sal, random };

std::string to_string(Method m);
Method method_from_string(const std::string& name);

struct MetricsSettings {
  int validation_episodes = 20;
  int validation_grid = 6;  // per dimension, over the candidate box
  std::uint64_t validation_seed = 20240601;
  int nll_K = 256;
  int f1_grid = 15;  // per dimension
  int f1_K = 256;
  Eigen::Index features = 1024;
  IntegratorConfig integrator;
};

struct ExperimentConfig {
  std::string system = "vdp";
  int M = 8;
  std::vector<std::uint64_t> seeds{0};
  Method method = Method::sal;
  AcquisitionKind acquisition = AcquisitionKind::entropy;

  // Planner
  double delta = 0.9;
  int n_candidates = 64;
  SearchStrategy strategy = SearchStrategy::random_search;
  int planning_K = 32;
  Eigen::Index planning_features = 1024;
  bool include_x0_noise = false;
  IntegratorConfig sampling_integrator;
  /// Random baseline rejects truly unsafe draws (ablation only).
  bool safe_random_baseline = false;

  TrainConfig train;
  ModelOptions model;
  MetricsSettings metrics;

  std::string output_dir = "runs";
  /// When false the seconds column is written as 0 so reruns are byte-identical.
  bool record_wall_clock = true;

  void validate() const;
};

/// Throws ConfigError on unknown keys or invalid values.
ExperimentConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

PlannerConfig planner_config(const ExperimentConfig& config, const SystemSpec& system);

struct MetricsRecord {
  std::uint64_t seed = 0;
  int budget = 0;
  Method method = Method::sal;
  AcquisitionKind acquisition = AcquisitionKind::entropy;
  double nll = 0.0;
  double f1 = 0.0;
  std::optional<Vec> theta;  // initial state chosen in this round
  std::optional<double> xi_est;
  std::optional<bool> truly_safe;
  double seconds = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

inline constexpr const char* kMetricsHeader =
    "seed,budget,method,acquisition,nll,f1,theta_0,theta_1,xi_est,truly_safe,seconds";

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records);
void save_metrics(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);
/// Throws SchemaError on a header mismatch or malformed row.
std::vector<MetricsRecord> read_metrics_csv(std::istream& is);
std::vector<MetricsRecord> load_metrics(const std::filesystem::path& path);

/// Held-out episodes from truly-safe starts on a fixed grid over the candidate box.
Dataset make_validation_set(const SystemSpec& system, const MetricsSettings& settings);

/// Per-entry mixture NLL of one observation matrix under sampled trajectories:
/// -log[(1/K) sum_l N(y | x^l, sigma^2 I)] / (N d). Diverged samples are
/// dropped; if none remain the result is 1e6 / (N d).
double mixture_nll(std::span<const Trajectory> trajectories, const Mat& observations, const Vec& sigma);

/// Mean over episodes of the per-entry mixture negative log-likelihood under
/// K posterior trajectory draws started at each episode's true initial state.
double validation_nll(const GPODEModel& model, const Dataset& validation, int K, Rng& rng,
                      Eigen::Index features = 1024, const IntegratorConfig& integrator = {});

struct Confusion {
  int tp = 0, fp = 0, fn = 0, tn = 0;
};

/// 2TP / (2TP + FP + FN) with "safe" as the positive class; 1 when TP = FP = FN = 0.
double f1_score(const Confusion& c);

/// Uniform grid with n points per dimension over the box (edges included).
std::vector<Vec> box_grid(const Box& box, int n);

struct F1Result {
  double f1 = 0.0;
  Confusion confusion;
};

F1Result f1_safe_set(const GPODEModel& model, const SystemSpec& system, const std::vector<Vec>& grid,
                     const std::vector<bool>& truth, double delta, const SamplingConfig& sampling,
                     Rng& rng);
F1Result f1_safe_set(const GPODEModel& model, const SystemSpec& system, const std::vector<Vec>& grid,
                     double delta, const SamplingConfig& sampling, Rng& rng);

inline constexpr int kRunStateSchemaVersion = 1;

/// Everything needed to continue a loop at `next_round`.
struct RunState {
  ExperimentConfig config;
  std::uint64_t seed = 0;
  Method method = Method::sal;
  int next_round = 0;
  int skipped_rounds = 0;
  Dataset episodes;
  GPODEModel model;
  std::vector<MetricsRecord> records;
};

nlohmann::json run_state_to_json(const RunState& state);
/// Throws SchemaError; never returns a partially filled state.
RunState run_state_from_json(const nlohmann::json& doc);
void save_run_state(const std::filesystem::path& path, const RunState& state);
RunState load_run_state(const std::filesystem::path& path);

struct RunResult {
  std::vector<MetricsRecord> records;
  GPODEModel model;
  Dataset episodes;
  int skipped_rounds = 0;
};

struct RunOptions {
  /// Called after every completed round with the state needed to resume.
  std::function<void(const RunState&)> on_round;
  /// Stop (returning the partial result) once this many rounds have completed.
  std::optional<int> stop_after_round;
  /// Log sink for human-readable progress; may be empty.
  std::function<void(const std::string&)> log;
};

/// Runs the loop for one seed with config.method.
RunResult run_loop(const ExperimentConfig& config, std::uint64_t seed, const RunOptions& options = {});
/// Continues a loop from a saved state.
RunResult resume_loop(const RunState& state, const RunOptions& options = {});

RunResult run_sal_loop(ExperimentConfig config, std::uint64_t seed, const RunOptions& options = {});
RunResult run_random_loop(ExperimentConfig config, std::uint64_t seed, const RunOptions& options = {});

struct SummaryRow {
  Method method = Method::sal;
  AcquisitionKind acquisition = AcquisitionKind::entropy;
  int budget = 0;
  int n_seeds = 0;
  double nll_mean = 0, nll_std = 0, nll_lo = 0, nll_hi = 0;
  double f1_mean = 0, f1_std = 0, f1_lo = 0, f1_hi = 0;
};

inline constexpr const char* kSummaryHeader =
    "method,acquisition,budget,n_seeds,nll_mean,nll_std,nll_lo,nll_hi,f1_mean,f1_std,f1_lo,f1_hi";

/// Per (method, acquisition, budget): mean, sample std (n - 1) and mean -+ 2 std.
std::vector<SummaryRow> aggregate(const std::vector<MetricsRecord>& records);
void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows);

}  // namespace salgpode
