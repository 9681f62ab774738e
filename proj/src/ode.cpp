#include "salgpode/ode.hpp"

#include "salgpode/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace salgpode {
namespace {

using Eigen::VectorXd;

// Dormand-Prince 5(4) tableau with the 4th-order continuous extension of dopri5.
constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;
constexpr double a21 = 1.0 / 5.0;
constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                 a54 = -212.0 / 729.0;
constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                 a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0,
                 a75 = -2187.0 / 6784.0, a76 = 11.0 / 84.0;
constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                 e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

bool escaped(const VectorXd& x, double bound) {
  return !x.allFinite() || x.cwiseAbs().maxCoeff() > bound;
}

void check_inputs(const VectorXd& x0, std::span<const double> times) {
  if (!x0.allFinite()) throw ContractViolation("integrate: non-finite initial state");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i]) || times[i] < 0.0)
      throw ContractViolation("integrate: output times must be finite and >= 0");
    if (i > 0 && !(times[i] > times[i - 1]))
      throw ContractViolation("integrate: output times must be strictly increasing");
  }
}

Trajectory make_output(const VectorXd& x0, std::span<const double> times) {
  Trajectory out;
  out.times.assign(times.begin(), times.end());
  out.x0 = x0;
  out.states.setConstant(static_cast<Eigen::Index>(times.size()), x0.size(),
                         std::numeric_limits<double>::quiet_NaN());
  return out;
}

void integrate_rk4(const VectorField& f, Trajectory& out, const IntegratorConfig& cfg) {
  VectorXd x = out.x0;
  double t = 0.0;
  long steps = 0;
  for (std::size_t n = 0; n < out.times.size(); ++n) {
    const double span = out.times[n] - t;
    if (span > 0.0) {
      const long m = std::max(1L, static_cast<long>(std::ceil(span / cfg.fixed_step - 1e-9)));
      const double h = span / static_cast<double>(m);
      for (long s = 0; s < m; ++s) {
        if (++steps > cfg.max_steps) {
          out.status = TrajectoryStatus::step_budget_exceeded;
          return;
        }
        const VectorXd k1 = f(x);
        const VectorXd k2 = f(x + 0.5 * h * k1);
        const VectorXd k3 = f(x + 0.5 * h * k2);
        const VectorXd k4 = f(x + h * k3);
        x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (escaped(x, cfg.divergence_bound)) {
          out.status = TrajectoryStatus::diverged;
          return;
        }
      }
      t = out.times[n];
    }
    out.states.row(static_cast<Eigen::Index>(n)) = x.transpose();
  }
}

double scaled_rms(const VectorXd& v, const VectorXd& scale) {
  return std::sqrt((v.array() / scale.array()).square().mean());
}

void integrate_dopri(const VectorField& f, Trajectory& out, const IntegratorConfig& cfg) {
  const double t_end = out.times.empty() ? 0.0 : out.times.back();
  std::size_t next_out = 0;
  VectorXd y = out.x0;
  double t = 0.0;
  while (next_out < out.times.size() && out.times[next_out] <= 0.0) {
    out.states.row(static_cast<Eigen::Index>(next_out++)) = y.transpose();
  }
  if (next_out == out.times.size()) return;

  const double rtol = cfg.rtol, atol = cfg.atol;
  VectorXd k1 = f(y);
  long evals = 1;
  auto sk_of = [&](const VectorXd& a, const VectorXd& b) {
    return (atol + rtol * a.cwiseAbs().cwiseMax(b.cwiseAbs()).array()).matrix().eval();
  };

  double h = cfg.initial_step;
  if (!(h > 0.0)) {
    const VectorXd sk = sk_of(y, y);
    const double dn0 = scaled_rms(y, sk), dn1 = scaled_rms(k1, sk);
    double h0 = (dn0 < 1e-5 || dn1 < 1e-5) ? 1e-6 : 0.01 * dn0 / dn1;
    h0 = std::min(h0, t_end);
    const VectorXd k2 = f(y + h0 * k1);
    ++evals;
    const double dn2 = scaled_rms(k2 - k1, sk) / h0;
    const double dmax = std::max(dn1, dn2);
    const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 0.2);
    h = std::min(100.0 * h0, h1);
  }

  constexpr double safe = 0.9, beta = 0.04, facc1 = 1.0 / 0.2, facc2 = 1.0 / 10.0;
  const double expo1 = 0.2 - beta * 0.75;
  double facold = 1e-4;
  bool last_rejected = false;
  long steps = 0;

  while (t < t_end) {
    if (++steps > cfg.max_steps) {
      out.status = TrajectoryStatus::step_budget_exceeded;
      return;
    }
    if (h < 1e-12 * std::max(1.0, std::abs(t))) {
      // Step size underflow: the solution is blowing up.
      out.status = TrajectoryStatus::diverged;
      return;
    }
    if (t + 1.01 * h >= t_end) h = t_end - t;

    const VectorXd k2 = f(y + h * (a21 * k1));
    const VectorXd k3 = f(y + h * (a31 * k1 + a32 * k2));
    const VectorXd k4 = f(y + h * (a41 * k1 + a42 * k2 + a43 * k3));
    const VectorXd k5 = f(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
    const VectorXd k6 = f(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
    const VectorXd y1 = y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    const VectorXd k7 = f(y1);
    evals += 6;

    const VectorXd errv = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    double err = scaled_rms(errv, sk_of(y, y1));
    if (!std::isfinite(err)) err = 1e10;
    const double fac11 = std::pow(err, expo1);

    if (err <= 1.0) {
      facold = std::max(err, 1e-4);
      const double t_new = (h == t_end - t) ? t_end : t + h;
      // Dense output for every requested time inside (t, t_new].
      if (next_out < out.times.size() && out.times[next_out] <= t_new) {
        const VectorXd ydiff = y1 - y;
        const VectorXd bspl = h * k1 - ydiff;
        const VectorXd r4 = ydiff - h * k7 - bspl;
        const VectorXd r5 = h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
        while (next_out < out.times.size() && out.times[next_out] <= t_new) {
          const double th = (out.times[next_out] - t) / h;
          const double th1 = 1.0 - th;
          VectorXd yo = y + th * (ydiff + th1 * (bspl + th * (r4 + th1 * r5)));
          if (out.times[next_out] == t_new) yo = y1;
          out.states.row(static_cast<Eigen::Index>(next_out++)) = yo.transpose();
        }
      }
      y = y1;
      k1 = k7;
      t = t_new;
      if (escaped(y, cfg.divergence_bound)) {
        out.status = TrajectoryStatus::diverged;
        out.states.bottomRows(out.states.rows() - static_cast<Eigen::Index>(next_out))
            .setConstant(std::numeric_limits<double>::quiet_NaN());
        // Rows already written may hold finite values; the status is authoritative.
        return;
      }
      double fac = fac11 / std::pow(facold, beta);
      fac = std::max(facc2, std::min(facc1, fac / safe));
      double h_new = h / fac;
      if (last_rejected) h_new = std::min(h_new, h);
      last_rejected = false;
      h = h_new;
    } else {
      h = h / std::min(facc1, fac11 / safe);
      last_rejected = true;
    }
  }
  (void)evals;
}

}  // namespace

void IntegratorConfig::validate() const {
  if (!(rtol > 0.0) || !(atol > 0.0)) throw ContractViolation("IntegratorConfig: tolerances must be > 0");
  if (!(fixed_step > 0.0)) throw ContractViolation("IntegratorConfig: fixed_step must be > 0");
  if (max_steps < 1) throw ContractViolation("IntegratorConfig: max_steps must be >= 1");
}

Trajectory integrate_flagged(const VectorField& rhs, const Eigen::VectorXd& x0,
                             std::span<const double> times, const IntegratorConfig& config) {
  config.validate();
  check_inputs(x0, times);
  Trajectory out = make_output(x0, times);
  if (config.method == IntegratorMethod::rk4_fixed)
    integrate_rk4(rhs, out, config);
  else
    integrate_dopri(rhs, out, config);
  if (out.ok() && !out.states.allFinite()) out.status = TrajectoryStatus::diverged;
  return out;
}

Trajectory integrate(const VectorField& rhs, const Eigen::VectorXd& x0,
                     std::span<const double> times, const IntegratorConfig& config) {
  Trajectory out = integrate_flagged(rhs, x0, times, config);
  switch (out.status) {
    case TrajectoryStatus::ok:
      return out;
    case TrajectoryStatus::step_budget_exceeded:
      throw StepBudgetError("integrate: max_steps exceeded");
    case TrajectoryStatus::diverged:
      break;
  }
  throw DivergenceError("integrate: state became non-finite or left the divergence bound");
}

std::vector<double> uniform_schedule(double horizon, int n) {
  if (!(horizon > 0.0) || n < 1) throw ContractViolation("uniform_schedule: need horizon > 0, n >= 1");
  std::vector<double> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = horizon * (i + 1) / n;
  return t;
}

}  // namespace salgpode
