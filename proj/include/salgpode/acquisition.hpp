#pragma once

// Information scores and sampled safety probability for a candidate initial
// state, computed from an ensemble of posterior trajectory samples.

#include "salgpode/box.hpp"
#include "salgpode/ode.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace salgpode {

struct SamplingConfig {
  int K = 32;
  bool include_x0_noise = false;
  std::uint64_t seed = 0;
  Eigen::Index features = 1024;
  IntegratorConfig integrator;
};

/// Monte-Carlo marginal entropy of the observation sequence:
///   -(1/K) sum_m log[(1/K) sum_l N(y^m | x^l, sigma^2 I)]
/// with log-sum-exp stabilization. Requires K >= 2 non-diverged samples.
double entropy_acquisition(std::span<const Trajectory> trajectories,
                           std::span<const Eigen::MatrixXd> observations, const Eigen::VectorXd& sigma);

/// Same estimator on a precomputed K x K matrix of log-densities
/// log N(y^m | x^l) (row m, column l).
double entropy_from_log_densities(const Eigen::MatrixXd& log_density);

enum class CovarianceScalarization { trace, log_det };

/// Scalarized unbiased empirical covariance of the flattened (N*d) trajectories.
/// log_det adds 1e-9 to the diagonal.
double covariance_acquisition(std::span<const Trajectory> trajectories,
                              CovarianceScalarization mode = CovarianceScalarization::trace);

/// Fraction of trajectories that stay inside the bounds at x0 and every
/// output time. Diverged samples count as violations.
double safety_probability(std::span<const Trajectory> trajectories, const SafetyBounds& bounds);

/// Entropy of the observation noise given the trajectory: (N d / 2) log(2 pi e sigma^2).
double conditional_entropy_constant(double sigma, Eigen::Index N, Eigen::Index d);
double conditional_entropy_constant(const Eigen::VectorXd& sigma, Eigen::Index N);

}  // namespace salgpode
