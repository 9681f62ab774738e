#include <doctest.h>

#include "salgpode/acquisition.hpp"
#include "salgpode/errors.hpp"
#include "salgpode/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace salgpode;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Trajectory make_traj(const MatrixXd& states, const VectorXd& x0) {
  Trajectory t;
  for (Eigen::Index i = 0; i < states.rows(); ++i) t.times.push_back(0.1 * static_cast<double>(i + 1));
  t.states = states;
  t.x0 = x0;
  return t;
}

Trajectory scalar_traj(double x) { return make_traj(MatrixXd::Constant(1, 1, x), VectorXd::Zero(1)); }

// Static Gaussian oracle: x ~ N(0, tau^2), y = x + N(0, sigma^2).
double static_entropy_estimate(int K, double tau, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Trajectory> trajs;
  std::vector<MatrixXd> obs;
  for (int i = 0; i < K; ++i) {
    const double x = tau * rng.normal();
    trajs.push_back(scalar_traj(x));
    obs.push_back(MatrixXd::Constant(1, 1, x + sigma * rng.normal()));
  }
  return entropy_acquisition(trajs, obs, VectorXd::Constant(1, sigma));
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

// Ensemble of K flattened N*d Gaussian trajectories with covariance scale^2 * A A^T.
std::vector<Trajectory> gaussian_ensemble(int K, const MatrixXd& A, double scale, Rng& rng, Eigen::Index N,
                                          Eigen::Index d) {
  std::vector<Trajectory> out;
  for (int l = 0; l < K; ++l) {
    const VectorXd flat = scale * A * rng.normal_vector(A.cols());
    MatrixXd s(N, d);
    for (Eigen::Index n = 0; n < N; ++n) s.row(n) = flat.segment(n * d, d).transpose();
    out.push_back(make_traj(s, VectorXd::Zero(d)));
  }
  return out;
}

}  // namespace

TEST_SUITE("acquisition-safety") {
  TEST_CASE("entropy of identical noise-free samples is the density at the mean") {
    std::vector<Trajectory> trajs(5, scalar_traj(0.0));
    std::vector<MatrixXd> obs(5, MatrixXd::Zero(1, 1));
    CHECK(entropy_acquisition(trajs, obs, VectorXd::Ones(1)) == doctest::Approx(0.5 * std::log(2 * M_PI)).epsilon(1e-12));
  }

  TEST_CASE("entropy requires K >= 2 and aligned, finite samples") {
    std::vector<Trajectory> one{scalar_traj(0.0)};
    std::vector<MatrixXd> obs{MatrixXd::Zero(1, 1)};
    CHECK_THROWS_AS(entropy_acquisition(one, obs, VectorXd::Ones(1)), ContractViolation);
    std::vector<Trajectory> two{scalar_traj(0.0), scalar_traj(1.0)};
    two[1].status = TrajectoryStatus::diverged;
    std::vector<MatrixXd> obs2(2, MatrixXd::Zero(1, 1));
    CHECK_THROWS_AS(entropy_acquisition(two, obs2, VectorXd::Ones(1)), ContractViolation);
    CHECK_THROWS_AS(entropy_from_log_densities(MatrixXd::Zero(1, 1)), ContractViolation);
  }

  TEST_CASE("static Gaussian oracle") {
    const double tau = 1.0, sigma = 0.5;
    const double truth = 0.5 * std::log(2 * M_PI * M_E * (tau * tau + sigma * sigma));
    CHECK(truth == doctest::Approx(1.5305).epsilon(1e-4));
    std::vector<double> est;
    for (std::uint64_t s = 0; s < 20; ++s) est.push_back(static_entropy_estimate(4096, tau, sigma, s));
    CHECK(std::abs(median(est) - truth) / truth < 0.05);
  }

  TEST_CASE("entropy error shrinks with K") {
    const double tau = 1.0, sigma = 0.5;
    const double truth = 0.5 * std::log(2 * M_PI * M_E * (tau * tau + sigma * sigma));
    std::vector<double> med;
    for (int K : {64, 256, 4096}) {
      std::vector<double> err;
      for (std::uint64_t s = 0; s < 20; ++s) err.push_back(std::abs(static_entropy_estimate(K, tau, sigma, 100 + s) - truth));
      med.push_back(median(err));
    }
    MESSAGE("median abs error " << med[0] << " " << med[1] << " " << med[2]);
    CHECK(med[1] < med[0]);
    CHECK(med[2] < med[1]);
  }

  TEST_CASE("adding a constant to every log density shifts the entropy by minus that constant") {
    Rng rng(2);
    MatrixXd logp = rng.normal_matrix(6, 6);
    const double c = 3.7;
    MatrixXd shifted = logp.array() + c;
    CHECK(entropy_from_log_densities(shifted) == doctest::Approx(entropy_from_log_densities(logp) - c).epsilon(1e-12));
  }

  TEST_CASE("covariance acquisition") {
    std::vector<Trajectory> same(4, make_traj(MatrixXd::Constant(3, 2, 1.5), VectorXd::Zero(2)));
    CHECK(covariance_acquisition(same) == 0.0);
    std::vector<Trajectory> two{scalar_traj(0.0), scalar_traj(2.0)};
    CHECK(covariance_acquisition(two) == doctest::Approx(2.0));
    CHECK_THROWS_AS(covariance_acquisition(std::vector<Trajectory>{scalar_traj(0)}), ContractViolation);
    // log-det of a 1x1 covariance 2 (+1e-9)
    CHECK(covariance_acquisition(two, CovarianceScalarization::log_det) == doctest::Approx(std::log(2.0)).epsilon(1e-8));
  }

  TEST_CASE("covariance and entropy rank Gaussian ensembles alike") {
    Rng rng(31);
    const Eigen::Index N = 3, d = 2;
    const MatrixXd A = rng.normal_matrix(N * d, N * d) * 0.5;
    std::vector<double> ent, tr, ld;
    const VectorXd sigma = VectorXd::Constant(d, 0.3);
    for (int c = 0; c < 20; ++c) {
      const double scale = 0.2 + 0.1 * c;
      Rng r = rng.split(static_cast<std::uint64_t>(c));
      const auto trajs = gaussian_ensemble(1024, A, scale, r, N, d);
      std::vector<MatrixXd> obs;
      for (const auto& t : trajs) obs.push_back(t.states + sigma[0] * r.normal_matrix(N, d));
      ent.push_back(entropy_acquisition(trajs, obs, sigma));
      tr.push_back(covariance_acquisition(trajs));
      ld.push_back(covariance_acquisition(trajs, CovarianceScalarization::log_det));
    }
    CHECK(spearman(ent, tr) > 0.9);
    CHECK(spearman(ent, ld) > 0.9);
  }

  TEST_CASE("safety probability") {
    const SafetyBounds box(VectorXd::Constant(1, -4.0), VectorXd::Constant(1, 4.0));
    std::vector<Trajectory> inside(8, scalar_traj(1.0));
    CHECK(safety_probability(inside, box) == 1.0);
    std::vector<Trajectory> mixed{scalar_traj(1.0), scalar_traj(-3.0), scalar_traj(5.0), scalar_traj(4.0)};
    CHECK(safety_probability(mixed, box) == 0.75);
    Trajectory div = scalar_traj(0.0);
    div.status = TrajectoryStatus::diverged;
    CHECK(safety_probability(std::vector<Trajectory>{div, scalar_traj(0.0)}, box) == 0.5);
    Trajectory bad_start = make_traj(MatrixXd::Zero(1, 1), VectorXd::Constant(1, 10.0));
    CHECK(safety_probability(std::vector<Trajectory>{bad_start}, box) == 0.0);
    Trajectory nan_row = scalar_traj(std::nan(""));
    CHECK(safety_probability(std::vector<Trajectory>{nan_row}, box) == 0.0);
    CHECK_THROWS_AS(safety_probability(std::vector<Trajectory>{}, box), ContractViolation);

    // Infinite sides are inactive.
    const SafetyBounds half(VectorXd::Constant(1, 0.0), VectorXd::Constant(1, INFINITY));
    CHECK(safety_probability(std::vector<Trajectory>{scalar_traj(1e30)}, half) == 1.0);
  }

  TEST_CASE("safety probability is in [0, 1] and monotone under shrinking") {
    Rng rng(12);
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 50; ++i) trajs.push_back(make_traj(2.5 * rng.normal_matrix(5, 2), 0.5 * rng.normal_vector(2)));
    SafetyBounds box(VectorXd::Constant(2, -4.0), VectorXd::Constant(2, 4.0));
    double prev = 1.0;
    for (double f : {1.0, 0.9, 0.7, 0.5, 0.3, 0.1}) {
      const double xi = safety_probability(trajs, box.shrunk(f));
      CHECK(xi >= 0.0);
      CHECK(xi <= 1.0);
      CHECK(xi <= prev);
      prev = xi;
    }
  }

  TEST_CASE("conditional entropy constant") {
    CHECK(conditional_entropy_constant(1.0, 1, 1) == doctest::Approx(0.5 * std::log(2 * M_PI * M_E)).epsilon(1e-12));
    CHECK(conditional_entropy_constant(1.0, 1, 1) == doctest::Approx(1.4189).epsilon(1e-4));
    CHECK(conditional_entropy_constant(0.5, 16, 2) == doctest::Approx(16.0 * std::log(2 * M_PI * M_E * 0.25)));
    CHECK(conditional_entropy_constant(VectorXd::Constant(2, 0.5), 16) ==
          doctest::Approx(conditional_entropy_constant(0.5, 16, 2)));
    CHECK_THROWS_AS(conditional_entropy_constant(0.0, 1, 1), ContractViolation);
  }

  TEST_CASE("subtracting the conditional entropy keeps the argmax") {
    Rng rng(8);
    const VectorXd sigma = VectorXd::Constant(2, 0.2);
    const double c = conditional_entropy_constant(sigma, 4);
    std::vector<double> raw, mi;
    for (int cand = 0; cand < 12; ++cand) {
      std::vector<Trajectory> trajs;
      std::vector<MatrixXd> obs;
      const double spread = rng.uniform(0.1, 2.0);
      for (int l = 0; l < 16; ++l) {
        trajs.push_back(make_traj(spread * rng.normal_matrix(4, 2), VectorXd::Zero(2)));
        obs.push_back(trajs.back().states + 0.2 * rng.normal_matrix(4, 2));
      }
      raw.push_back(entropy_acquisition(trajs, obs, sigma));
      mi.push_back(raw.back() - c);
    }
    CHECK(std::max_element(raw.begin(), raw.end()) - raw.begin() == std::max_element(mi.begin(), mi.end()) - mi.begin());
  }
}
