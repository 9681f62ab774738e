#include "salgpode/planner.hpp"

#include "salgpode/errors.hpp"
#include "salgpode/parallel.hpp"

#include <cmath>
#include <limits>

namespace salgpode {

void PlannerConfig::validate() const {
  domain.validate();
  safety.validate();
  if (safety.dim() != domain.dim()) throw ContractViolation("PlannerConfig: safety/domain dimension");
  if (!(delta >= 0.0 && delta < 1.0)) throw ContractViolation("PlannerConfig: delta must be in [0, 1)");
  if (n_candidates < 1) throw ContractViolation("PlannerConfig: n_candidates must be >= 1");
  if (sampling.K < 1) throw ContractViolation("PlannerConfig: K must be >= 1");
  if (refine_steps < 0 || !(refine_step_fraction > 0.0))
    throw ContractViolation("PlannerConfig: bad refinement settings");
}

NoFeasibleCandidate::NoFeasibleCandidate(CandidateScore best, double delta)
    : std::runtime_error("no candidate reaches safety probability " + std::to_string(delta) +
                         " (best xi = " + std::to_string(best.xi) + ")"),
      best_(std::move(best)) {}

std::optional<std::size_t> select_feasible(std::span<const CandidateScore> scores, double delta) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i].xi >= delta)) continue;
    if (!best || scores[i].acquisition > scores[*best].acquisition) best = i;
  }
  return best;
}

CandidateScorer::CandidateScorer(const GPODEModel& model, std::vector<double> schedule,
                                 const PlannerConfig& config, AcquisitionKind kind, const Rng& rng)
    : model_(model),
      schedule_(std::move(schedule)),
      config_(config),
      kind_(kind),
      noise_streams_(rng.split(3)) {
  Rng draw_rng = rng.split(2);
  draws_ = draw_posterior_functions(model_, config_.sampling.K, draw_rng, config_.sampling.features);
}

// Every candidate sees the same x0 and observation noise (common random
// numbers); otherwise noise differences swamp the score differences.
std::vector<Trajectory> CandidateScorer::trajectories(const Vec& theta, std::uint64_t) const {
  Rng rng = noise_streams_.split(0);
  std::vector<Trajectory> out;
  out.reserve(draws_.size());
  for (const auto& g : draws_) {
    Vec start = theta;
    if (config_.sampling.include_x0_noise) start += model_.x0_std * rng.normal_vector(theta.size());
    out.push_back(rollout(g, start, schedule_, config_.sampling.integrator));
  }
  return out;
}

CandidateScore CandidateScorer::score(const Vec& theta, std::uint64_t key) const {
  CandidateScore s;
  s.theta = theta;
  const auto trajs = trajectories(theta, key);
  s.xi = safety_probability(trajs, config_.safety);
  std::vector<Trajectory> valid;
  for (const auto& t : trajs)
    if (t.ok()) valid.push_back(t);
  if (valid.size() < 2) {
    s.acquisition = -std::numeric_limits<double>::infinity();
    return s;
  }
  switch (kind_) {
    case AcquisitionKind::entropy:
    case AcquisitionKind::mutual_information: {
      Rng rng = noise_streams_.split(7);
      const auto obs = sample_observations(valid, model_.obs_noise, rng);
      s.acquisition = entropy_acquisition(valid, obs, model_.obs_noise);
      if (kind_ == AcquisitionKind::mutual_information)
        s.acquisition -= conditional_entropy_constant(model_.obs_noise,
                                                      static_cast<Eigen::Index>(schedule_.size()));
      break;
    }
    case AcquisitionKind::covariance:
      s.acquisition = covariance_acquisition(valid, CovarianceScalarization::trace);
      break;
    case AcquisitionKind::covariance_logdet:
      s.acquisition = covariance_acquisition(valid, CovarianceScalarization::log_det);
      break;
  }
  return s;
}

PlanResult optimize_candidates(const ScoreFn& score, const PlannerConfig& config, Rng& rng) {
  config.validate();
  const auto n = static_cast<std::size_t>(config.n_candidates);
  Rng candidate_rng = rng.split(1);
  std::vector<Vec> thetas;
  thetas.reserve(n);
  for (std::size_t i = 0; i < n; ++i) thetas.push_back(random_baseline_propose(config.domain, candidate_rng));

  PlanResult result;
  result.evaluated.resize(n);
  parallel_for(n, [&](std::size_t i) { result.evaluated[i] = score(thetas[i], i); });

  const auto best = select_feasible(result.evaluated, config.delta);
  if (!best) {
    std::size_t safest = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (result.evaluated[i].xi > result.evaluated[safest].xi) safest = i;
    throw NoFeasibleCandidate(result.evaluated[safest], config.delta);
  }
  CandidateScore current = result.evaluated[*best];

  if (config.strategy == SearchStrategy::refine_local) {
    const Vec step = config.refine_step_fraction * config.domain.width();
    const Eigen::Index d = config.domain.dim();
    std::uint64_t key = n;
    for (int it = 0; it < config.refine_steps; ++it) {
      std::vector<Vec> moves;
      for (Eigen::Index e = 0; e < d; ++e)
        for (double sign : {1.0, -1.0}) {
          Vec t = current.theta;
          t[e] += sign * step[e];
          t = config.domain.clamp(t);
          if ((t - current.theta).cwiseAbs().maxCoeff() > 0.0) moves.push_back(std::move(t));
        }
      std::vector<CandidateScore> scored(moves.size());
      const std::uint64_t base_key = key;
      parallel_for(moves.size(), [&](std::size_t i) { scored[i] = score(moves[i], base_key + i); });
      key += moves.size();
      result.evaluated.insert(result.evaluated.end(), scored.begin(), scored.end());
      const auto pick = select_feasible(scored, config.delta);
      if (!pick || !(scored[*pick].acquisition > current.acquisition)) break;
      current = scored[*pick];
    }
  }

  result.chosen = current.theta;
  result.acquisition = current.acquisition;
  result.xi = current.xi;
  return result;
}

PlanResult propose(const GPODEModel& model, std::span<const double> schedule,
                   const PlannerConfig& config, AcquisitionKind acquisition, Rng& rng) {
  config.validate();
  if (config.domain.dim() != model.state_dim())
    throw ContractViolation("propose: domain dimension differs from the model state");
  if ((acquisition == AcquisitionKind::entropy || acquisition == AcquisitionKind::mutual_information) &&
      config.sampling.K < 2)
    throw ContractViolation("propose: entropy acquisition needs K >= 2");
  const CandidateScorer scorer(model, std::vector<double>(schedule.begin(), schedule.end()), config,
                               acquisition, rng);
  return optimize_candidates(
      [&scorer](const Vec& theta, std::uint64_t key) { return scorer.score(theta, key); }, config, rng);
}

Vec random_baseline_propose(const Box& domain, Rng& rng) {
  Vec x(domain.dim());
  for (Eigen::Index e = 0; e < domain.dim(); ++e) x[e] = rng.uniform(domain.lo[e], domain.hi[e]);
  return x;
}

std::string to_string(AcquisitionKind kind) {
  switch (kind) {
    case AcquisitionKind::entropy: return "entropy";
    case AcquisitionKind::mutual_information: return "mutual-information";
    case AcquisitionKind::covariance: return "covariance";
    case AcquisitionKind::covariance_logdet: return "covariance-logdet";
  }
  return "unknown";
}

AcquisitionKind acquisition_from_string(const std::string& name) {
  if (name == "entropy") return AcquisitionKind::entropy;
  if (name == "mutual-information") return AcquisitionKind::mutual_information;
  if (name == "covariance") return AcquisitionKind::covariance;
  if (name == "covariance-logdet") return AcquisitionKind::covariance_logdet;
  throw ConfigError("unknown acquisition '" + name + "'");
}

}  // namespace salgpode
