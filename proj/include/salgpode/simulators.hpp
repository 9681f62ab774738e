#pragma once

// Ground-truth dynamical systems standing in for the physical test bench.

#include "salgpode/box.hpp"
#include "salgpode/gpode_model.hpp"
#include "salgpode/ode.hpp"
#include "salgpode/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace salgpode {

/// printed: dx2/dt = mu (1 - x1)^2 x2 - x1; classical: mu (1 - x1^2) x2 - x1.
enum class VdpForm { printed, classical };

Eigen::VectorXd vdp_rhs(const Eigen::Ref<const Eigen::VectorXd>& x, double mu,
                        VdpForm form = VdpForm::printed);

/// (alpha x1 - beta x1 x2, -gamma x2 + delta x1 x2)
Eigen::VectorXd lv_rhs(const Eigen::Ref<const Eigen::VectorXd>& x, double alpha, double beta,
                       double gamma, double delta);

struct SystemSpec {
  std::string name;
  VectorField rhs;
  std::map<std::string, double> params;
  SafetyBounds safety;
  double horizon = 1.0;
  int n_obs = 1;
  double obs_noise = 0.0;
  Box theta;                      // candidate domain for initial states
  Eigen::VectorXd initial_state;  // designated first episode

  Eigen::Index dim() const { return theta.dim(); }
  std::vector<double> schedule() const { return uniform_schedule(horizon, n_obs); }
  void validate() const;
};

/// Registered names: "vdp" (classical damping, the benchmark default),
/// "vdp-printed" and "lotka-volterra".
std::vector<std::string> system_names();
/// Throws ConfigError for unknown names.
SystemSpec make_system(const std::string& name);

/// High-accuracy integrator settings used for ground truth.
IntegratorConfig reference_integrator();

/// Integrates the true field from x0 on the system schedule and adds
/// N(0, obs_noise^2) noise. Throws DivergenceError if the truth blows up.
Episode measure(const SystemSpec& system, const Eigen::VectorXd& x0, Rng& rng);

/// Noise-free check of the safety box on a dense grid of check_factor * N
/// points over [0, T] (plus x0). Divergence counts as unsafe.
bool is_truly_safe(const SystemSpec& system, const Eigen::VectorXd& x0, int check_factor = 10);

}  // namespace salgpode
