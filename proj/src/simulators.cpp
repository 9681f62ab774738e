#include "salgpode/simulators.hpp"

#include "salgpode/errors.hpp"

#include <cmath>
#include <limits>

namespace salgpode {

Eigen::VectorXd vdp_rhs(const Eigen::Ref<const Eigen::VectorXd>& x, double mu, VdpForm form) {
  if (x.size() != 2) throw ContractViolation("vdp_rhs: state must be 2-dimensional");
  const double damping = form == VdpForm::printed ? (1.0 - x[0]) * (1.0 - x[0]) : 1.0 - x[0] * x[0];
  return Eigen::Vector2d(x[1], mu * damping * x[1] - x[0]);
}

Eigen::VectorXd lv_rhs(const Eigen::Ref<const Eigen::VectorXd>& x, double alpha, double beta,
                       double gamma, double delta) {
  if (x.size() != 2) throw ContractViolation("lv_rhs: state must be 2-dimensional");
  return Eigen::Vector2d(alpha * x[0] - beta * x[0] * x[1], -gamma * x[1] + delta * x[0] * x[1]);
}

void SystemSpec::validate() const {
  if (!rhs) throw ContractViolation("SystemSpec: missing vector field");
  if (n_obs < 1 || !(horizon > 0.0)) throw ContractViolation("SystemSpec: need N >= 1 and T > 0");
  if (obs_noise < 0.0) throw ContractViolation("SystemSpec: negative noise");
  theta.validate();
  safety.validate();
  if (safety.dim() != theta.dim() || initial_state.size() != theta.dim())
    throw ContractViolation("SystemSpec: dimension mismatch");
}

std::vector<std::string> system_names() { return {"vdp", "vdp-printed", "lotka-volterra"}; }

namespace {

SystemSpec make_vdp(VdpForm form, std::string name) {
  SystemSpec s;
  s.name = std::move(name);
  const double mu = 0.5;
  s.params = {{"mu", mu}, {"classical", form == VdpForm::classical ? 1.0 : 0.0}};
  s.rhs = [mu, form](const Eigen::VectorXd& x) { return vdp_rhs(x, mu, form); };
  s.safety = SafetyBounds(Eigen::Vector2d(-4.0, -4.0), Eigen::Vector2d(4.0, 4.0));
  s.theta = Box(Eigen::Vector2d(-4.0, -4.0), Eigen::Vector2d(4.0, 4.0));
  s.horizon = 3.0;
  s.n_obs = 16;
  s.obs_noise = 0.05;
  s.initial_state = Eigen::Vector2d(-1.5, 2.5);
  return s;
}

SystemSpec make_lv() {
  SystemSpec s;
  s.name = "lotka-volterra";
  const double a = 0.5, b = 0.05, g = 0.5, dl = 0.05;
  s.params = {{"alpha", a}, {"beta", b}, {"gamma", g}, {"delta", dl}};
  s.rhs = [=](const Eigen::VectorXd& x) { return lv_rhs(x, a, b, g, dl); };
  s.safety = SafetyBounds(Eigen::Vector2d(0.2, 0.2), Eigen::Vector2d(25.0, 25.0));
  s.theta = Box(Eigen::Vector2d(1.0, 1.0), Eigen::Vector2d(15.0, 15.0));
  s.horizon = 10.0;
  s.n_obs = 20;
  s.obs_noise = 0.1;
  s.initial_state = Eigen::Vector2d(5.0, 10.0);
  return s;
}

}  // namespace

SystemSpec make_system(const std::string& name) {
  if (name == "vdp") return make_vdp(VdpForm::classical, name);
  if (name == "vdp-printed") return make_vdp(VdpForm::printed, name);
  if (name == "lotka-volterra" || name == "lv") return make_lv();
  throw ConfigError("unknown system '" + name + "'");
}

IntegratorConfig reference_integrator() {
  IntegratorConfig cfg;
  cfg.method = IntegratorMethod::dopri45_adaptive;
  cfg.rtol = 1e-9;
  cfg.atol = 1e-11;
  cfg.max_steps = 1000000;
  return cfg;
}

Episode measure(const SystemSpec& system, const Eigen::VectorXd& x0, Rng& rng) {
  system.validate();
  if (x0.size() != system.dim()) throw ContractViolation("measure: x0 dimension mismatch");
  if (!system.theta.contains(x0)) throw ContractViolation("measure: x0 outside the candidate box");
  const auto times = system.schedule();
  const Trajectory tr = integrate(system.rhs, x0, times, reference_integrator());
  Episode ep;
  ep.initial_choice = x0;
  ep.times = times;
  ep.observations = tr.states;
  if (system.obs_noise > 0.0)
    ep.observations += system.obs_noise * rng.normal_matrix(tr.states.rows(), tr.states.cols());
  return ep;
}

bool is_truly_safe(const SystemSpec& system, const Eigen::VectorXd& x0, int check_factor) {
  if (!system.safety.contains(x0)) return false;
  const int n = std::max(1, check_factor) * system.n_obs;
  const auto grid = uniform_schedule(system.horizon, n);
  const Trajectory tr = integrate_flagged(system.rhs, x0, grid, reference_integrator());
  if (!tr.ok()) return false;
  for (Eigen::Index i = 0; i < tr.states.rows(); ++i)
    if (!system.safety.contains(tr.states.row(i).transpose())) return false;
  return true;
}

}  // namespace salgpode
