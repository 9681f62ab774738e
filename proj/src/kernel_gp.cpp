#include "salgpode/kernel_gp.hpp"

#include "salgpode/errors.hpp"
#include "vector_math.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace salgpode {

RbfKernel::RbfKernel(Vec l, double sv) : lengthscales(std::move(l)), signal_variance(sv) {
  validate();
}

void RbfKernel::validate() const {
  if (lengthscales.size() == 0) throw ContractViolation("RbfKernel: no lengthscales");
  if (!(lengthscales.array() > 0.0).all() || !lengthscales.allFinite())
    throw ContractViolation("RbfKernel: lengthscales must be positive and finite");
  if (!(signal_variance > 0.0) || !std::isfinite(signal_variance))
    throw ContractViolation("RbfKernel: signal variance must be positive and finite");
}

double kernel_eval(const RbfKernel& kernel, const Eigen::Ref<const Vec>& x,
                   const Eigen::Ref<const Vec>& x2) {
  if (x.size() != kernel.dim() || x2.size() != kernel.dim())
    throw ContractViolation("kernel_eval: dimension mismatch");
  const double r2 = ((x - x2).array() / kernel.lengthscales.array()).square().sum();
  return kernel.signal_variance * std::exp(-0.5 * r2);
}

Mat gram(const RbfKernel& kernel, const Eigen::Ref<const Mat>& X, const Eigen::Ref<const Mat>& X2) {
  if (X.cols() != kernel.dim() || X2.cols() != kernel.dim())
    throw ContractViolation("gram: dimension mismatch");
  const Eigen::ArrayXd inv_l = kernel.lengthscales.array().inverse();
  const Mat A = X * inv_l.matrix().asDiagonal();
  const Mat B = X2 * inv_l.matrix().asDiagonal();
  Mat K(X.rows(), X2.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = 0; j < X2.rows(); ++j)
      K(i, j) = kernel.signal_variance * std::exp(-0.5 * (A.row(i) - B.row(j)).squaredNorm());
  return K;
}

double JitteredCholesky::log_det() const {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

JitteredCholesky jittered_cholesky(const Eigen::Ref<const Mat>& K, double scale) {
  if (K.rows() != K.cols()) throw ContractViolation("jittered_cholesky: matrix not square");
  const Mat sym = 0.5 * (K + K.transpose());
  for (double rel = 1e-6; rel <= 1e-2 * (1.0 + 1e-9); rel *= 10.0) {
    JitteredCholesky out;
    out.jitter = rel * scale;
    Mat A = sym;
    A.diagonal().array() += out.jitter;
    out.llt.compute(A);
    if (out.llt.info() == Eigen::Success && out.llt.matrixLLT().diagonal().allFinite() &&
        (out.llt.matrixLLT().diagonal().array() > 0.0).all())
      return out;
  }
  throw NumericalError("Cholesky failed after jitter escalation to 1e-2 * scale");
}

void InducingSet::validate() const {
  if (Z.rows() < 1) throw ContractViolation("InducingSet: need at least one inducing input");
  if (mean.rows() != Z.rows()) throw ContractViolation("InducingSet: mean rows != L");
  if (static_cast<Eigen::Index>(cov.size()) != mean.cols())
    throw ContractViolation("InducingSet: one covariance per output required");
  for (const auto& S : cov) {
    if (S.rows() != Z.rows() || S.cols() != Z.rows())
      throw ContractViolation("InducingSet: covariance must be L x L");
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-8 * (1.0 + S.cwiseAbs().maxCoeff()))
      throw ContractViolation("InducingSet: covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (S + S.transpose()), Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-8)
      throw ContractViolation("InducingSet: covariance not positive semidefinite");
  }
}

Vec FourierFeatureSet::features(const Eigen::Ref<const Vec>& x) const {
  Vec proj = frequencies * x + phases;
  detail::cos_inplace(proj.data(), static_cast<std::size_t>(proj.size()));
  return amplitude * proj;
}

Mat FourierFeatureSet::feature_matrix(const Eigen::Ref<const Mat>& X) const {
  Mat proj = X * frequencies.transpose();
  proj.rowwise() += phases.transpose();
  detail::cos_inplace(proj.data(), static_cast<std::size_t>(proj.size()));
  return amplitude * proj;
}

FourierFeatureSet sample_fourier_features(const RbfKernel& kernel, Eigen::Index S, Rng& rng,
                                          Eigen::Index outputs) {
  if (S < 1) throw ContractViolation("sample_fourier_features: S must be >= 1");
  kernel.validate();
  if (outputs < 0) outputs = kernel.dim();
  FourierFeatureSet f;
  f.frequencies = rng.normal_matrix(S, kernel.dim());
  f.frequencies *= kernel.lengthscales.array().inverse().matrix().asDiagonal();
  f.phases.resize(S);
  for (Eigen::Index i = 0; i < S; ++i) f.phases[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  f.weights = rng.normal_matrix(S, outputs);
  f.amplitude = std::sqrt(2.0 * kernel.signal_variance / static_cast<double>(S));
  return f;
}

SampledDynamics::SampledDynamics(FourierFeatureSet features, Mat update_weights,
                                 Mat inducing_inputs, RbfKernel kernel)
    : features_(std::move(features)),
      v_(std::move(update_weights)),
      Z_(std::move(inducing_inputs)),
      kernel_(std::move(kernel)) {
  if (Z_.cols() != kernel_.dim() || features_.frequencies.cols() != kernel_.dim() ||
      v_.rows() != Z_.rows() || features_.weights.cols() != v_.cols())
    throw ContractViolation("SampledDynamics: inconsistent shapes");
  inv_l2_ = kernel_.lengthscales.array().square().inverse().matrix();
}

Vec SampledDynamics::kernel_row(const Eigen::Ref<const Vec>& x) const {
  Vec k(Z_.rows());
  for (Eigen::Index j = 0; j < Z_.rows(); ++j) {
    double r2 = 0.0;
    for (Eigen::Index e = 0; e < Z_.cols(); ++e) {
      const double diff = x[e] - Z_(j, e);
      r2 += diff * diff * inv_l2_[e];
    }
    k[j] = kernel_.signal_variance * std::exp(-0.5 * r2);
  }
  return k;
}

Vec SampledDynamics::prior_term(const Eigen::Ref<const Vec>& x) const {
  return features_.weights.transpose() * features_.features(x);
}

Vec SampledDynamics::update_term(const Eigen::Ref<const Vec>& x) const {
  return v_.transpose() * kernel_row(x);
}

Vec SampledDynamics::evaluate(const Eigen::Ref<const Vec>& x) const {
  if (x.size() != Z_.cols()) throw ContractViolation("SampledDynamics: dimension mismatch");
  if (!x.allFinite()) throw ContractViolation("SampledDynamics: non-finite input");
  return prior_term(x) + update_term(x);
}

Mat psd_factor(const Eigen::Ref<const Mat>& A) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (A + A.transpose()));
  const Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

SampledDynamics condition_function(const Mat& Z, const Mat& U, const RbfKernel& kernel,
                                   FourierFeatureSet features) {
  const Mat K = gram(kernel, Z, Z);
  const auto chol = jittered_cholesky(K, kernel.signal_variance);
  const Mat Phi = features.feature_matrix(Z);
  Mat v = chol.solve(U - Phi * features.weights);
  return SampledDynamics(std::move(features), std::move(v), Z, kernel);
}

SampledDynamics draw_function(const InducingSet& inducing, const RbfKernel& kernel,
                              Eigen::Index S, Rng& rng) {
  inducing.validate();
  if (inducing.input_dim() != kernel.dim())
    throw ContractViolation("draw_function: kernel/inducing dimension mismatch");
  const Eigen::Index L = inducing.size();
  Mat U = inducing.mean;
  for (Eigen::Index o = 0; o < inducing.output_dim(); ++o) {
    const Vec zeta = rng.normal_vector(L);
    U.col(o) += psd_factor(inducing.cov[o]) * zeta;
  }
  auto features = sample_fourier_features(kernel, S, rng, inducing.output_dim());
  return condition_function(inducing.Z, U, kernel, std::move(features));
}

double kl_divergence(const InducingSet& inducing, const RbfKernel& kernel) {
  inducing.validate();
  const Eigen::Index L = inducing.size();
  const Mat K = gram(kernel, inducing.Z, inducing.Z);
  const auto chol = jittered_cholesky(K, kernel.signal_variance);
  const double logdet_k = chol.log_det();
  double kl = 0.0;
  for (Eigen::Index o = 0; o < inducing.output_dim(); ++o) {
    const Mat& S = inducing.cov[o];
    const Vec m = inducing.mean.col(o);
    Eigen::LDLT<Mat> ldlt(0.5 * (S + S.transpose()));
    const Vec d = ldlt.vectorD();
    if ((d.array() <= 0.0).any())
      throw NumericalError("kl_divergence: variational covariance is singular");
    const double logdet_s = d.array().log().sum();
    const double trace = chol.solve(S).trace();
    const double maha = m.dot(chol.solve(m).col(0));
    kl += 0.5 * (trace + maha - static_cast<double>(L) + logdet_k - logdet_s);
  }
  return kl;
}

PosteriorMoments sparse_posterior(const InducingSet& inducing, const RbfKernel& kernel,
                                  const Eigen::Ref<const Mat>& X) {
  inducing.validate();
  const Mat K = gram(kernel, inducing.Z, inducing.Z);
  const auto chol = jittered_cholesky(K, kernel.signal_variance);
  const Mat Kxz = gram(kernel, X, inducing.Z);
  const Mat Kxx = gram(kernel, X, X);
  const Mat A = chol.solve(Kxz.transpose()).transpose();  // k_xZ K^-1
  Mat Kj = K;
  Kj.diagonal().array() += chol.jitter;
  PosteriorMoments out;
  out.mean = A * inducing.mean;
  for (Eigen::Index o = 0; o < inducing.output_dim(); ++o)
    out.cov.push_back(Kxx - A * (Kj - inducing.cov[o]) * A.transpose());
  return out;
}

}  // namespace salgpode
