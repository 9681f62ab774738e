#include "salgpode/acquisition.hpp"

#include "salgpode/errors.hpp"

#include <cmath>
#include <numbers>

namespace salgpode {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

}  // namespace

double entropy_from_log_densities(const Eigen::MatrixXd& log_density) {
  const Eigen::Index K = log_density.rows();
  if (K < 2 || log_density.cols() != K)
    throw ContractViolation("entropy_acquisition: need a K x K density matrix with K >= 2");
  const double logK = std::log(static_cast<double>(K));
  double acc = 0.0;
  for (Eigen::Index m = 0; m < K; ++m) acc += log_sum_exp(log_density.row(m).transpose()) - logK;
  return -acc / static_cast<double>(K);
}

double entropy_acquisition(std::span<const Trajectory> trajectories,
                           std::span<const Eigen::MatrixXd> observations, const Eigen::VectorXd& sigma) {
  const auto K = static_cast<Eigen::Index>(trajectories.size());
  if (K < 2) throw ContractViolation("entropy_acquisition: K must be >= 2");
  if (static_cast<Eigen::Index>(observations.size()) != K)
    throw ContractViolation("entropy_acquisition: trajectory/observation count mismatch");
  const Eigen::Index N = trajectories[0].states.rows(), d = trajectories[0].states.cols();
  if (sigma.size() != d || !(sigma.array() > 0.0).all())
    throw ContractViolation("entropy_acquisition: sigma must be positive per dimension");
  for (Eigen::Index l = 0; l < K; ++l) {
    const auto& tr = trajectories[static_cast<std::size_t>(l)];
    if (tr.diverged()) throw ContractViolation("entropy_acquisition: diverged sample in ensemble");
    if (tr.states.rows() != N || tr.states.cols() != d ||
        observations[static_cast<std::size_t>(l)].rows() != N ||
        observations[static_cast<std::size_t>(l)].cols() != d)
      throw ContractViolation("entropy_acquisition: samples not aligned on one schedule");
  }
  const Eigen::ArrayXd inv_var = sigma.array().square().inverse();
  const double log_norm = -0.5 * static_cast<double>(N) *
                          (static_cast<double>(d) * kLog2Pi + 2.0 * sigma.array().log().sum());
  Eigen::MatrixXd logp(K, K);
  for (Eigen::Index m = 0; m < K; ++m) {
    const auto& y = observations[static_cast<std::size_t>(m)];
    for (Eigen::Index l = 0; l < K; ++l) {
      const auto& x = trajectories[static_cast<std::size_t>(l)].states;
      const double q = ((y - x).array().square().rowwise() * inv_var.transpose()).sum();
      logp(m, l) = log_norm - 0.5 * q;
    }
  }
  return entropy_from_log_densities(logp);
}

double covariance_acquisition(std::span<const Trajectory> trajectories, CovarianceScalarization mode) {
  const auto K = static_cast<Eigen::Index>(trajectories.size());
  if (K < 2) throw ContractViolation("covariance_acquisition: K must be >= 2");
  const Eigen::Index N = trajectories[0].states.rows(), d = trajectories[0].states.cols();
  Eigen::MatrixXd flat(K, N * d);
  for (Eigen::Index l = 0; l < K; ++l) {
    const auto& s = trajectories[static_cast<std::size_t>(l)].states;
    if (s.rows() != N || s.cols() != d)
      throw ContractViolation("covariance_acquisition: samples not aligned");
    for (Eigen::Index n = 0; n < N; ++n) flat.block(l, n * d, 1, d) = s.row(n);
  }
  const Eigen::MatrixXd centered = flat.rowwise() - flat.colwise().mean();
  if (mode == CovarianceScalarization::trace)
    return centered.array().square().sum() / static_cast<double>(K - 1);
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(K - 1);
  cov.diagonal().array() += 1e-9;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  return ldlt.vectorD().array().log().sum();
}

double safety_probability(std::span<const Trajectory> trajectories, const SafetyBounds& bounds) {
  if (trajectories.empty()) throw ContractViolation("safety_probability: K must be >= 1");
  std::size_t safe = 0;
  for (const auto& tr : trajectories) {
    if (tr.diverged() || !bounds.contains(tr.x0)) continue;
    bool inside = true;
    for (Eigen::Index i = 0; i < tr.states.rows() && inside; ++i)
      inside = bounds.contains(tr.states.row(i).transpose());
    if (inside) ++safe;
  }
  return static_cast<double>(safe) / static_cast<double>(trajectories.size());
}

double conditional_entropy_constant(double sigma, Eigen::Index N, Eigen::Index d) {
  if (!(sigma > 0.0)) throw ContractViolation("conditional_entropy_constant: sigma must be > 0");
  return 0.5 * static_cast<double>(N * d) * std::log(2.0 * std::numbers::pi * std::numbers::e * sigma * sigma);
}

double conditional_entropy_constant(const Eigen::VectorXd& sigma, Eigen::Index N) {
  double acc = 0.0;
  for (Eigen::Index o = 0; o < sigma.size(); ++o) acc += conditional_entropy_constant(sigma[o], N, 1);
  return acc;
}

}  // namespace salgpode
