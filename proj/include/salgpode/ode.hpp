#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <vector>

namespace salgpode {

using VectorField = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

enum class IntegratorMethod { rk4_fixed, dopri45_adaptive };

struct IntegratorConfig {
  IntegratorMethod method = IntegratorMethod::dopri45_adaptive;
  double rtol = 1e-6;
  double atol = 1e-8;
  /// First trial step for the adaptive method; <= 0 selects it automatically.
  double initial_step = 0.0;
  /// Largest step for rk4_fixed (each output interval is split evenly).
  double fixed_step = 0.05;
  long max_steps = 100000;
  /// States whose max-norm exceeds this are treated as diverged.
  double divergence_bound = 1e8;

  void validate() const;
};

enum class TrajectoryStatus { ok, diverged, step_budget_exceeded };

/// States at the requested times; the initial state at t = 0 is kept separately.
struct Trajectory {
  std::vector<double> times;
  Eigen::MatrixXd states;  // N x d
  Eigen::VectorXd x0;
  TrajectoryStatus status = TrajectoryStatus::ok;

  bool ok() const { return status == TrajectoryStatus::ok; }
  bool diverged() const { return status != TrajectoryStatus::ok; }
  Eigen::Index size() const { return states.rows(); }
};

/// Integrates from x0 at t = 0 and reports the states at `times`
/// (strictly increasing, >= 0). Failures are reported through `status`;
/// rows after a failure are filled with NaN.
Trajectory integrate_flagged(const VectorField& rhs, const Eigen::VectorXd& x0,
                             std::span<const double> times, const IntegratorConfig& config);

/// Like integrate_flagged but throws StepBudgetError / DivergenceError.
Trajectory integrate(const VectorField& rhs, const Eigen::VectorXd& x0,
                     std::span<const double> times, const IntegratorConfig& config);

/// Uniform schedule t_i = i * horizon / n for i = 1..n.
std::vector<double> uniform_schedule(double horizon, int n);

}  // namespace salgpode
