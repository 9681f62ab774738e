#pragma once

// Squared-exponential kernel, sparse variational inducing set, random Fourier
// features and pathwise (prior + Matheron update) function sampling.

#include "salgpode/rng.hpp"

#include <Eigen/Dense>

#include <vector>

namespace salgpode {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// k(x, x') = signal_variance * exp(-0.5 * sum_j ((x_j - x'_j) / l_j)^2)
struct RbfKernel {
  Vec lengthscales;
  double signal_variance = 1.0;

  RbfKernel() = default;
  RbfKernel(Vec lengthscales, double signal_variance);

  Eigen::Index dim() const { return lengthscales.size(); }
  /// Throws ContractViolation on non-positive parameters.
  void validate() const;
};

double kernel_eval(const RbfKernel& kernel, const Eigen::Ref<const Vec>& x,
                   const Eigen::Ref<const Vec>& x2);

/// Cross-covariance matrix between the rows of X (n x d) and X2 (m x d).
Mat gram(const RbfKernel& kernel, const Eigen::Ref<const Mat>& X, const Eigen::Ref<const Mat>& X2);

/// Cholesky of K + jitter * I. The jitter starts at 1e-6 * scale and is
/// escalated by x10 up to 1e-2 * scale before a NumericalError is raised.
struct JitteredCholesky {
  Eigen::LLT<Mat> llt;
  double jitter = 0.0;

  Mat solve(const Eigen::Ref<const Mat>& rhs) const { return llt.solve(rhs); }
  Mat matrix_l() const { return llt.matrixL(); }
  double log_det() const;
};

JitteredCholesky jittered_cholesky(const Eigen::Ref<const Mat>& K, double scale);

/// Inducing inputs Z (L x d) with a per-output Gaussian q(U_:,o) = N(mean_:,o, cov[o]).
struct InducingSet {
  Mat Z;
  Mat mean;
  std::vector<Mat> cov;

  Eigen::Index size() const { return Z.rows(); }
  Eigen::Index input_dim() const { return Z.cols(); }
  Eigen::Index output_dim() const { return mean.cols(); }
  /// Shapes agree, L >= 1, every covariance symmetric with eigenvalues >= -1e-8.
  void validate() const;
};

/// phi_i(x) = amplitude * cos(frequencies_i . x + phases_i), amplitude = sqrt(2 sf2 / S).
struct FourierFeatureSet {
  Mat frequencies;  // S x d
  Vec phases;       // S
  Mat weights;      // S x outputs, standard normal
  double amplitude = 0.0;

  Eigen::Index size() const { return frequencies.rows(); }
  Vec features(const Eigen::Ref<const Vec>& x) const;
  /// Feature matrix at the rows of X (n x S).
  Mat feature_matrix(const Eigen::Ref<const Mat>& X) const;
};

/// Draws S features from the RBF spectral density. `outputs` independent
/// weight columns share the same frequencies and phases.
FourierFeatureSet sample_fourier_features(const RbfKernel& kernel, Eigen::Index S, Rng& rng,
                                          Eigen::Index outputs = -1);

/// One posterior function draw g(x) = sum_i w_i phi_i(x) + sum_j v_j k(x, Z_j).
/// Immutable after construction; evaluation is thread-safe.
class SampledDynamics {
 public:
  SampledDynamics(FourierFeatureSet features, Mat update_weights, Mat inducing_inputs,
                  RbfKernel kernel);

  Vec operator()(const Eigen::Ref<const Vec>& x) const { return evaluate(x); }
  /// Throws ContractViolation for non-finite or wrongly sized input.
  Vec evaluate(const Eigen::Ref<const Vec>& x) const;
  Vec prior_term(const Eigen::Ref<const Vec>& x) const;
  Vec update_term(const Eigen::Ref<const Vec>& x) const;

  const FourierFeatureSet& features() const { return features_; }
  const Mat& update_weights() const { return v_; }
  const Mat& inducing_inputs() const { return Z_; }
  const RbfKernel& kernel() const { return kernel_; }
  Eigen::Index input_dim() const { return Z_.cols(); }
  Eigen::Index output_dim() const { return v_.cols(); }

 private:
  Vec kernel_row(const Eigen::Ref<const Vec>& x) const;

  FourierFeatureSet features_;
  Mat v_;
  Mat Z_;
  RbfKernel kernel_;
  Vec inv_l2_;
};

/// Draws U ~ q(U) (via LDLT square roots of each covariance) and a feature set,
/// then solves v = K^-1 (U - Phi w).
SampledDynamics draw_function(const InducingSet& inducing, const RbfKernel& kernel,
                              Eigen::Index S, Rng& rng);

/// Same as draw_function with U supplied explicitly (L x outputs).
SampledDynamics condition_function(const Mat& Z, const Mat& U, const RbfKernel& kernel,
                                   FourierFeatureSet features);

/// sum_o KL(N(mean_o, cov_o) || N(0, K)).
double kl_divergence(const InducingSet& inducing, const RbfKernel& kernel);

/// Analytic marginals of the sparse variational posterior at test inputs:
/// mean = k_xZ K^-1 m, cov = k_xx - k_xZ K^-1 (K - S) K^-1 k_Zx (per output).
struct PosteriorMoments {
  Mat mean;              // n x outputs
  std::vector<Mat> cov;  // n x n per output
};

PosteriorMoments sparse_posterior(const InducingSet& inducing, const RbfKernel& kernel,
                                  const Eigen::Ref<const Mat>& X);

/// Symmetric square root factor F (F F^T = A) of a PSD matrix via LDLT.
Mat psd_factor(const Eigen::Ref<const Mat>& A);

}  // namespace salgpode
