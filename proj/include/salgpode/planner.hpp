#pragma once

// Safety-constrained maximization of the acquisition over candidate initial states.

#include "salgpode/acquisition.hpp"
#include "salgpode/box.hpp"
#include "salgpode/gpode_model.hpp"
#include "salgpode/rng.hpp"

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace salgpode {

enum class AcquisitionKind {
  entropy,             // Monte-Carlo marginal entropy of the observations
  mutual_information,  // entropy minus the (constant) conditional noise entropy
  covariance,          // trace of the empirical trajectory covariance
  covariance_logdet,
};

enum class SearchStrategy { random_search, refine_local };

struct PlannerConfig {
  Box domain;
  SafetyBounds safety;
  double delta = 0.9;
  int n_candidates = 64;
  SearchStrategy strategy = SearchStrategy::random_search;
  SamplingConfig sampling;
  int refine_steps = 20;
  double refine_step_fraction = 0.05;

  void validate() const;
};

struct CandidateScore {
  Vec theta;
  double acquisition = 0.0;
  double xi = 0.0;
};

struct PlanResult {
  Vec chosen;
  double acquisition = 0.0;
  double xi = 0.0;
  std::vector<CandidateScore> evaluated;
};

class NoFeasibleCandidate : public std::runtime_error {
 public:
  NoFeasibleCandidate(CandidateScore best, double delta);
  /// Candidate with the largest estimated safety probability.
  const CandidateScore& best() const { return best_; }

 private:
  CandidateScore best_;
};

/// Index of the feasible (xi >= delta) candidate with the largest acquisition;
/// ties keep the earliest index.
std::optional<std::size_t> select_feasible(std::span<const CandidateScore> scores, double delta);

/// Scores candidates against one fixed ensemble of posterior function draws.
/// All candidates share the same x0 and observation noise, so a score depends
/// only on (ensemble, theta). `key` is accepted for the ScoreFn signature.
class CandidateScorer {
 public:
  CandidateScorer(const GPODEModel& model, std::vector<double> schedule, const PlannerConfig& config,
                  AcquisitionKind kind, const Rng& rng);

  CandidateScore score(const Vec& theta, std::uint64_t key) const;
  /// Posterior trajectories from theta for every draw in the ensemble.
  std::vector<Trajectory> trajectories(const Vec& theta, std::uint64_t key) const;

 private:
  const GPODEModel& model_;
  std::vector<double> schedule_;
  PlannerConfig config_;
  AcquisitionKind kind_;
  Rng noise_streams_;
  std::vector<SampledDynamics> draws_;
};

using ScoreFn = std::function<CandidateScore(const Vec& theta, std::uint64_t key)>;

/// Random search (plus optional coordinate hill-climbing) with an arbitrary scorer.
PlanResult optimize_candidates(const ScoreFn& score, const PlannerConfig& config, Rng& rng);

/// Throws NoFeasibleCandidate when no evaluated candidate reaches delta.
PlanResult propose(const GPODEModel& model, std::span<const double> schedule,
                   const PlannerConfig& config, AcquisitionKind acquisition, Rng& rng);

/// Uniform draw from the box; no model, no safety filter.
Vec random_baseline_propose(const Box& domain, Rng& rng);

std::string to_string(AcquisitionKind kind);
AcquisitionKind acquisition_from_string(const std::string& name);

}  // namespace salgpode
