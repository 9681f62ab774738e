#pragma once

// GP-ODE model: a sparse variational GP over the vector field, trained by
// maximizing a Monte-Carlo ELBO through sampled-dynamics rollouts.

#include "salgpode/box.hpp"
#include "salgpode/kernel_gp.hpp"
#include "salgpode/ode.hpp"
#include "salgpode/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace salgpode {

/// One measured trajectory: commanded initial state, schedule and noisy observations.
struct Episode {
  Vec initial_choice;
  std::vector<double> times;
  Mat observations;  // N x d

  Eigen::Index size() const { return observations.rows(); }
  void validate() const;
};

using Dataset = std::vector<Episode>;

struct GPODEModel {
  RbfKernel kernel;
  Mat Z;                      // L x d inducing inputs
  Mat q_mean;                 // L x d, one column per output
  std::vector<Mat> q_factor;  // lower triangular, Sigma_u[o] = C C^T
  Vec obs_noise;              // per-output standard deviation
  double x0_std = 0.1;        // std of the initial-state policy around the first observation
  std::uint64_t seed = 0;

  Eigen::Index state_dim() const { return Z.cols(); }
  Eigen::Index num_inducing() const { return Z.rows(); }
  InducingSet inducing() const;
  void validate() const;
};

/// Inducing inputs on a uniform grid when L is a perfect d-th power, a
/// seeded Latin hypercube otherwise.
Mat inducing_layout(const Box& region, Eigen::Index L, Rng& rng);

struct ModelOptions {
  Eigen::Index num_inducing = 20;
  double lengthscale_fraction = 0.2;  // initial lengthscale = fraction * region width
  double signal_variance = 1.0;
  double x0_std = 0.1;
};

/// Prior-initialized model: q(U) = p(U).
GPODEModel make_model(const Box& region, const Vec& obs_noise, const ModelOptions& options,
                      std::uint64_t seed);

/// Initializes q(U) from an exact GP fitted to finite-difference velocities
/// of the observations. Optionally resets the signal variance to the mean
/// squared velocity.
void initialize_from_data(GPODEModel& model, const Dataset& data, bool set_signal_variance);

struct ElboSettings {
  Eigen::Index features = 256;
  /// Largest RK4 step of the differentiable training rollout.
  double rk4_step = 0.1;
  double divergence_bound = 1e6;
  /// Log-likelihood assigned to an episode whose rollout diverged.
  double failure_loglik = -1e6;
};

struct TrainConfig {
  int iterations = 150;
  double learning_rate = 0.02;
  /// The step size decays linearly to learning_rate * final_lr_fraction.
  double final_lr_fraction = 0.1;
  /// Step multiplier for the covariance factor entries relative to the means.
  double factor_step_scale = 0.1;
  int K_train = 4;
  std::uint64_t seed = 0;
  bool sigma_trainable = true;
  bool hypers_trainable = true;
  ElboSettings elbo;

  void validate() const;
};

/// Monte-Carlo ELBO: mean over K_train joint draws of (g, x0) of the summed
/// Gaussian log-likelihoods, minus KL(q(U) || p(U)).
double elbo(const GPODEModel& model, const Dataset& data, int K_train, Rng& rng,
            const ElboSettings& settings = {});

struct ElboGradient {
  double value = 0.0;
  Vec gradient;  // layout of pack_parameters
};

/// ELBO estimate and its exact gradient (for the drawn noise) with respect to
/// the packed parameters, by reverse-mode differentiation through fixed-step RK4.
ElboGradient elbo_with_gradient(const GPODEModel& model, const Dataset& data, int K_train, Rng& rng,
                                const ElboSettings& settings = {});

/// [q_mean (col-major) | q_factor lower triangles | log l | log sf2 | log sigma]
Vec pack_parameters(const GPODEModel& model);
void unpack_parameters(GPODEModel& model, const Vec& theta);

struct TrainResult {
  GPODEModel model;
  std::vector<double> loss_trace;  // negative ELBO estimate per iteration
};

/// Adam ascent on the ELBO. Deterministic given config.seed.
TrainResult train(GPODEModel model, const Dataset& data, const TrainConfig& config);

/// Draws K posterior functions from q(U) with `features` Fourier bases each.
std::vector<SampledDynamics> draw_posterior_functions(const GPODEModel& model, int K, Rng& rng,
                                                      Eigen::Index features);

Trajectory rollout(const SampledDynamics& g, const Vec& x0, std::span<const double> times,
                   const IntegratorConfig& config);

struct PredictSettings {
  Eigen::Index features = 1024;
  IntegratorConfig integrator;
};

/// K independent posterior draws integrated from x0 (or from x0 + x0_std * noise).
std::vector<Trajectory> predict_trajectories(const GPODEModel& model, const Vec& x0,
                                             std::span<const double> times, int K, Rng& rng,
                                             bool x0_noise, const PredictSettings& settings = {});

/// y = x + eps, eps ~ N(0, sigma_o^2) per entry. Diverged trajectories give NaN rows.
std::vector<Mat> sample_observations(std::span<const Trajectory> trajectories, const Vec& sigma,
                                     Rng& rng);

inline constexpr int kModelSchemaVersion = 1;

nlohmann::json model_to_json(const GPODEModel& model);
/// Throws SchemaError on malformed input or a schema_version mismatch.
GPODEModel model_from_json(const nlohmann::json& doc);
void save_model(const GPODEModel& model, const std::filesystem::path& path);
GPODEModel load_model(const std::filesystem::path& path);

nlohmann::json episode_to_json(const Episode& e);
Episode episode_from_json(const nlohmann::json& doc);

}  // namespace salgpode
