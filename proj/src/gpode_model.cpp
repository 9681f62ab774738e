#include "salgpode/gpode_model.hpp"

#include "salgpode/errors.hpp"
#include "vector_math.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>

namespace salgpode {

using nlohmann::json;

void Episode::validate() const {
  if (observations.rows() < 1) throw ContractViolation("Episode: no observations");
  if (static_cast<Eigen::Index>(times.size()) != observations.rows())
    throw ContractViolation("Episode: times and observations differ in length");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1])) throw ContractViolation("Episode: times not strictly increasing");
  if (initial_choice.size() != 0 && initial_choice.size() != observations.cols())
    throw ContractViolation("Episode: initial choice dimension mismatch");
}

InducingSet GPODEModel::inducing() const {
  InducingSet s;
  s.Z = Z;
  s.mean = q_mean;
  for (const auto& C : q_factor) s.cov.push_back(C * C.transpose());
  return s;
}

void GPODEModel::validate() const {
  kernel.validate();
  const Eigen::Index L = Z.rows(), d = Z.cols();
  if (L < 1 || kernel.dim() != d) throw ContractViolation("GPODEModel: bad inducing inputs");
  if (q_mean.rows() != L || q_mean.cols() != d)
    throw ContractViolation("GPODEModel: variational mean must be L x d");
  if (static_cast<Eigen::Index>(q_factor.size()) != d)
    throw ContractViolation("GPODEModel: need one factor per output");
  for (const auto& C : q_factor)
    if (C.rows() != L || C.cols() != L) throw ContractViolation("GPODEModel: factor must be L x L");
  if (obs_noise.size() != d || !(obs_noise.array() > 0.0).all())
    throw ContractViolation("GPODEModel: observation noise must be positive");
  if (!(x0_std > 0.0)) throw ContractViolation("GPODEModel: x0_std must be positive");
}

Mat inducing_layout(const Box& region, Eigen::Index L, Rng& rng) {
  region.validate();
  if (L < 1) throw ContractViolation("inducing_layout: L must be >= 1");
  const Eigen::Index d = region.dim();
  const auto per_dim = static_cast<Eigen::Index>(
      std::llround(std::pow(static_cast<double>(L), 1.0 / static_cast<double>(d))));
  Eigen::Index total = 1;
  for (Eigen::Index e = 0; e < d; ++e) total *= per_dim;
  Mat Z(L, d);
  if (total == L) {
    for (Eigen::Index i = 0; i < L; ++i) {
      Eigen::Index rem = i;
      for (Eigen::Index e = 0; e < d; ++e) {
        const Eigen::Index k = rem % per_dim;
        rem /= per_dim;
        Z(i, e) = region.lo[e] + (static_cast<double>(k) + 0.5) / per_dim * (region.hi[e] - region.lo[e]);
      }
    }
    return Z;
  }
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(L));
  for (Eigen::Index e = 0; e < d; ++e) {
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    for (Eigen::Index i = 0; i < L; ++i)
      Z(i, e) = region.lo[e] + (static_cast<double>(perm[static_cast<std::size_t>(i)]) + 0.5) / L *
                                   (region.hi[e] - region.lo[e]);
  }
  return Z;
}

GPODEModel make_model(const Box& region, const Vec& obs_noise, const ModelOptions& options,
                      std::uint64_t seed) {
  GPODEModel m;
  Rng rng(seed);
  m.seed = seed;
  m.Z = inducing_layout(region, options.num_inducing, rng);
  m.kernel = RbfKernel(options.lengthscale_fraction * region.width(), options.signal_variance);
  m.q_mean = Mat::Zero(m.Z.rows(), m.Z.cols());
  const auto chol = jittered_cholesky(gram(m.kernel, m.Z, m.Z), m.kernel.signal_variance);
  m.q_factor.assign(static_cast<std::size_t>(m.Z.cols()), chol.matrix_l());
  m.obs_noise = obs_noise;
  m.x0_std = options.x0_std;
  m.validate();
  return m;
}

void initialize_from_data(GPODEModel& model, const Dataset& data, bool set_signal_variance) {
  const Eigen::Index d = model.state_dim();
  std::vector<Vec> mids, vels;
  std::vector<double> dts;
  for (const auto& ep : data) {
    ep.validate();
    for (Eigen::Index n = 0; n + 1 < ep.size(); ++n) {
      const double dt = ep.times[static_cast<std::size_t>(n + 1)] - ep.times[static_cast<std::size_t>(n)];
      mids.push_back(0.5 * (ep.observations.row(n) + ep.observations.row(n + 1)).transpose());
      vels.push_back((ep.observations.row(n + 1) - ep.observations.row(n)).transpose() / dt);
      dts.push_back(dt);
    }
  }
  if (mids.empty()) return;
  const auto n = static_cast<Eigen::Index>(mids.size());
  Mat X(n, d), Y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    X.row(i) = mids[static_cast<std::size_t>(i)].transpose();
    Y.row(i) = vels[static_cast<std::size_t>(i)].transpose();
  }
  if (set_signal_variance) {
    const double ms = Y.array().square().mean();
    model.kernel.signal_variance = std::max(ms, 1e-2);
  }
  const Mat Kzz = gram(model.kernel, model.Z, model.Z);
  const Mat Kzx = gram(model.kernel, model.Z, X);
  const Mat Kxx = gram(model.kernel, X, X);
  for (Eigen::Index o = 0; o < d; ++o) {
    const double var_y = std::max((Y.col(o).array() - Y.col(o).mean()).square().mean(), 1e-12);
    Mat A = Kxx;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double dt = dts[static_cast<std::size_t>(i)];
      A(i, i) += 2.0 * model.obs_noise[o] * model.obs_noise[o] / (dt * dt) + 0.01 * var_y;
    }
    const auto chol = jittered_cholesky(A, model.kernel.signal_variance);
    model.q_mean.col(o) = Kzx * chol.solve(Y.col(o));
    const Mat S = Kzz - Kzx * chol.solve(Kzx.transpose());
    model.q_factor[static_cast<std::size_t>(o)] =
        jittered_cholesky(S, model.kernel.signal_variance).matrix_l();
  }
}

void TrainConfig::validate() const {
  if (iterations < 1) throw ContractViolation("TrainConfig: iterations must be >= 1");
  if (K_train < 1) throw ContractViolation("TrainConfig: K_train must be >= 1");
  if (!(learning_rate > 0.0)) throw ContractViolation("TrainConfig: learning_rate must be > 0");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0))
    throw ContractViolation("TrainConfig: final_lr_fraction must be in (0, 1]");
  if (!(factor_step_scale > 0.0)) throw ContractViolation("TrainConfig: factor_step_scale must be positive");
  if (elbo.features < 1) throw ContractViolation("TrainConfig: features must be >= 1");
  if (!(elbo.rk4_step > 0.0)) throw ContractViolation("TrainConfig: rk4_step must be > 0");
}

// ---------------------------------------------------------------------------
// Parameter packing

namespace {

Eigen::Index packed_size(Eigen::Index L, Eigen::Index d) {
  return L * d + d * L * (L + 1) / 2 + d + 1 + d;
}

}  // namespace

Vec pack_parameters(const GPODEModel& m) {
  const Eigen::Index L = m.num_inducing(), d = m.state_dim();
  Vec theta(packed_size(L, d));
  Eigen::Index k = 0;
  for (Eigen::Index o = 0; o < d; ++o)
    for (Eigen::Index j = 0; j < L; ++j) theta[k++] = m.q_mean(j, o);
  for (const auto& C : m.q_factor)
    for (Eigen::Index c = 0; c < L; ++c)
      for (Eigen::Index r = c; r < L; ++r) theta[k++] = C(r, c);
  for (Eigen::Index e = 0; e < d; ++e) theta[k++] = std::log(m.kernel.lengthscales[e]);
  theta[k++] = std::log(m.kernel.signal_variance);
  for (Eigen::Index o = 0; o < d; ++o) theta[k++] = std::log(m.obs_noise[o]);
  return theta;
}

void unpack_parameters(GPODEModel& m, const Vec& theta) {
  const Eigen::Index L = m.num_inducing(), d = m.state_dim();
  if (theta.size() != packed_size(L, d)) throw ContractViolation("unpack_parameters: size mismatch");
  Eigen::Index k = 0;
  for (Eigen::Index o = 0; o < d; ++o)
    for (Eigen::Index j = 0; j < L; ++j) m.q_mean(j, o) = theta[k++];
  for (auto& C : m.q_factor) {
    C.setZero();
    for (Eigen::Index c = 0; c < L; ++c)
      for (Eigen::Index r = c; r < L; ++r) C(r, c) = theta[k++];
  }
  for (Eigen::Index e = 0; e < d; ++e) m.kernel.lengthscales[e] = std::exp(theta[k++]);
  m.kernel.signal_variance = std::exp(theta[k++]);
  for (Eigen::Index o = 0; o < d; ++o) m.obs_noise[o] = std::exp(theta[k++]);
}

// ---------------------------------------------------------------------------
// ELBO and its reverse-mode gradient

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

struct HyperCache {
  Mat R;  // unscaled correlation at Z
  Mat K;  // sf2 * R + jitter
  JitteredCholesky chol;
  Vec inv_l2;
  double sf2 = 1.0;
};

HyperCache make_cache(const GPODEModel& m) {
  HyperCache c;
  c.sf2 = m.kernel.signal_variance;
  c.inv_l2 = m.kernel.lengthscales.array().square().inverse().matrix();
  const Mat K0 = gram(m.kernel, m.Z, m.Z);
  c.R = K0 / c.sf2;
  c.chol = jittered_cholesky(K0, c.sf2);
  c.K = K0;
  c.K.diagonal().array() += c.chol.jitter;
  return c;
}

struct Draw {
  Mat zeta;   // L x d
  Mat V;      // L x d
  Mat omega;  // S x d
  Vec phase;  // S
  Mat W;      // S x d
  double amp = 0.0;
  Mat cosZ, sinZ;  // L x S
};

struct DrawGrad {
  Mat GV;
  double G_amp = 0.0;
  Vec G_logl;
  double G_logsf2 = 0.0;
};

class DrawEvaluator {
 public:
  DrawEvaluator(const GPODEModel& m, const HyperCache& c, const Draw& dr) : m_(m), c_(c), dr_(dr) {}

  Vec f(const Vec& p) const {
    Vec cs = dr_.omega * p + dr_.phase;
    detail::cos_inplace(cs.data(), static_cast<std::size_t>(cs.size()));
    Vec out = dr_.amp * (dr_.W.transpose() * cs);
    out.noalias() += dr_.V.transpose() * kernel_row(p);
    return out;
  }

  /// Returns J(p)^T lam and accumulates the parameter adjoints of g(p) . lam.
  Vec vjp(const Vec& p, const Vec& lam, DrawGrad& g) const {
    Eigen::ArrayXd cs = (dr_.omega * p + dr_.phase).array();
    Eigen::ArrayXd sn = cs;
    detail::cos_inplace(cs.data(), static_cast<std::size_t>(cs.size()));
    detail::sin_inplace(sn.data(), static_cast<std::size_t>(sn.size()));
    const Eigen::ArrayXd alpha = (dr_.W * lam).array();
    g.G_amp += (alpha * cs).sum();
    const Vec tmp = (dr_.amp * alpha * sn).matrix();
    const Vec Ot = dr_.omega.transpose() * tmp;
    Vec jt = -Ot;
    g.G_logl.array() += p.array() * Ot.array();

    const Eigen::Index L = m_.Z.rows();
    for (Eigen::Index j = 0; j < L; ++j) {
      const Vec diff = p - m_.Z.row(j).transpose();
      const double r2 = (diff.array().square() * c_.inv_l2.array()).sum();
      const double kj = c_.sf2 * std::exp(-0.5 * r2);
      g.GV.row(j) += kj * lam.transpose();
      const double coef = dr_.V.row(j).dot(lam) * kj;
      g.G_logsf2 += coef;
      g.G_logl.array() += coef * diff.array().square() * c_.inv_l2.array();
      jt.array() -= coef * diff.array() * c_.inv_l2.array();
    }
    return jt;
  }

 private:
  Vec kernel_row(const Vec& p) const {
    const Eigen::Index L = m_.Z.rows();
    Vec k(L);
    for (Eigen::Index j = 0; j < L; ++j) {
      const double r2 = ((p - m_.Z.row(j).transpose()).array().square() * c_.inv_l2.array()).sum();
      k[j] = c_.sf2 * std::exp(-0.5 * r2);
    }
    return k;
  }

  const GPODEModel& m_;
  const HyperCache& c_;
  const Draw& dr_;
};

struct Step {
  double h;
  Vec x, p2, p3, p4;
};

struct Rollout {
  std::vector<Step> steps;
  std::vector<std::size_t> obs_end;  // number of steps taken when observation n is reached
  Mat X;
  bool diverged = false;
};

bool bad_state(const Vec& x, double bound) {
  return !x.allFinite() || x.cwiseAbs().maxCoeff() > bound;
}

Rollout forward_rollout(const DrawEvaluator& g, const Episode& ep, const Vec& x_first,
                        const ElboSettings& s, bool keep_steps) {
  Rollout r;
  const Eigen::Index N = ep.size();
  r.X.resize(N, x_first.size());
  r.X.row(0) = x_first.transpose();
  r.obs_end.assign(static_cast<std::size_t>(N), 0);
  Vec x = x_first;
  for (Eigen::Index n = 1; n < N; ++n) {
    const double span = ep.times[static_cast<std::size_t>(n)] - ep.times[static_cast<std::size_t>(n - 1)];
    const long m = std::max(1L, static_cast<long>(std::ceil(span / s.rk4_step - 1e-9)));
    const double h = span / static_cast<double>(m);
    for (long k = 0; k < m; ++k) {
      const Vec k1 = g.f(x);
      Vec p2 = x + 0.5 * h * k1;
      const Vec k2 = g.f(p2);
      Vec p3 = x + 0.5 * h * k2;
      const Vec k3 = g.f(p3);
      Vec p4 = x + h * k3;
      const Vec k4 = g.f(p4);
      Vec xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      if (keep_steps) r.steps.push_back({h, x, std::move(p2), std::move(p3), std::move(p4)});
      x = std::move(xn);
      if (bad_state(x, s.divergence_bound)) {
        r.diverged = true;
        return r;
      }
    }
    r.X.row(n) = x.transpose();
    r.obs_end[static_cast<std::size_t>(n)] = r.steps.size();
  }
  return r;
}

void backward_rollout(const DrawEvaluator& g, const Rollout& r, const Mat& dX, DrawGrad& grad) {
  const auto N = static_cast<std::size_t>(r.X.rows());
  Vec lam = Vec::Zero(r.X.cols());
  for (std::size_t n = N - 1; n >= 1; --n) {
    lam += dX.row(static_cast<Eigen::Index>(n)).transpose();
    for (std::size_t k = r.obs_end[n]; k-- > r.obs_end[n - 1];) {
      const Step& st = r.steps[k];
      const double h = st.h;
      Vec dk1 = (h / 6.0) * lam, dk2 = (h / 3.0) * lam, dk3 = (h / 3.0) * lam;
      const Vec dk4 = (h / 6.0) * lam;
      const Vec dp4 = g.vjp(st.p4, dk4, grad);
      lam += dp4;
      dk3 += h * dp4;
      const Vec dp3 = g.vjp(st.p3, dk3, grad);
      lam += dp3;
      dk2 += 0.5 * h * dp3;
      const Vec dp2 = g.vjp(st.p2, dk2, grad);
      lam += dp2;
      dk1 += 0.5 * h * dp2;
      lam += g.vjp(st.x, dk1, grad);
    }
  }
}

struct ParamGrad {
  Mat mean;
  std::vector<Mat> factor;
  Vec logl;
  double logsf2 = 0.0;
  Vec logsig;
  Mat GK;
};

ElboGradient elbo_impl(const GPODEModel& m, const Dataset& data, int K_train, Rng& rng,
                       const ElboSettings& s, bool want_grad) {
  m.validate();
  if (K_train < 1) throw ContractViolation("elbo: K_train must be >= 1");
  if (s.features < 1) throw ContractViolation("elbo: features must be >= 1");
  const Eigen::Index L = m.num_inducing(), d = m.state_dim(), S = s.features;
  for (const auto& ep : data) {
    ep.validate();
    if (ep.observations.cols() != d) throw ContractViolation("elbo: episode dimension mismatch");
  }
  const HyperCache c = make_cache(m);
  const Vec sig2 = m.obs_noise.array().square().matrix();
  const double w = 1.0 / K_train;

  ParamGrad pg;
  if (want_grad) {
    pg.mean = Mat::Zero(L, d);
    pg.factor.assign(static_cast<std::size_t>(d), Mat::Zero(L, L));
    pg.logl = Vec::Zero(d);
    pg.logsig = Vec::Zero(d);
    pg.GK = Mat::Zero(L, L);
  }

  double expected_loglik = 0.0;
  for (int draw = 0; draw < K_train; ++draw) {
    Draw dr;
    dr.zeta = rng.normal_matrix(L, d);
    Mat U = m.q_mean;
    for (Eigen::Index o = 0; o < d; ++o)
      U.col(o) += m.q_factor[static_cast<std::size_t>(o)] * dr.zeta.col(o);
    dr.omega = rng.normal_matrix(S, d) * c.inv_l2.cwiseSqrt().asDiagonal();
    dr.phase.resize(S);
    for (Eigen::Index i = 0; i < S; ++i) dr.phase[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    dr.W = rng.normal_matrix(S, d);
    dr.amp = std::sqrt(2.0 * c.sf2 / static_cast<double>(S));
    Mat projZ = m.Z * dr.omega.transpose();
    projZ.rowwise() += dr.phase.transpose();
    dr.cosZ = projZ;
    detail::cos_inplace(dr.cosZ.data(), static_cast<std::size_t>(dr.cosZ.size()));
    dr.sinZ = projZ.array().sin().matrix();
    dr.V = c.chol.solve(U - dr.amp * dr.cosZ * dr.W);

    const DrawEvaluator g(m, c, dr);
    DrawGrad grad;
    if (want_grad) {
      grad.GV = Mat::Zero(L, d);
      grad.G_logl = Vec::Zero(d);
    }
    for (const auto& ep : data) {
      const Vec x_first = ep.observations.row(0).transpose() + m.x0_std * rng.normal_vector(d);
      const Rollout r = forward_rollout(g, ep, x_first, s, want_grad);
      if (r.diverged) {
        expected_loglik += w * s.failure_loglik;
        continue;
      }
      const Mat resid = ep.observations - r.X;
      double ll = 0.0;
      for (Eigen::Index o = 0; o < d; ++o)
        ll += -0.5 * ep.size() * (kLog2Pi + std::log(sig2[o])) -
              0.5 * resid.col(o).squaredNorm() / sig2[o];
      expected_loglik += w * ll;
      if (want_grad) {
        const Mat dX = w * resid * sig2.cwiseInverse().asDiagonal();
        for (Eigen::Index o = 0; o < d; ++o)
          pg.logsig[o] += w * (-static_cast<double>(ep.size()) + resid.col(o).squaredNorm() / sig2[o]);
        backward_rollout(g, r, dX, grad);
      }
    }
    if (!want_grad) continue;

    const Mat rho = c.chol.solve(grad.GV);
    pg.GK.noalias() -= rho * dr.V.transpose();
    pg.mean += rho;
    for (Eigen::Index o = 0; o < d; ++o)
      pg.factor[static_cast<std::size_t>(o)] +=
          (rho.col(o) * dr.zeta.col(o).transpose()).triangularView<Eigen::Lower>().toDenseMatrix();
    const Mat GPhi = -rho * dr.W.transpose();  // L x S
    grad.G_amp += (GPhi.array() * dr.cosZ.array()).sum();
    const Mat H = dr.amp * (GPhi.array() * dr.sinZ.array()).matrix();
    const Mat HZ = H.transpose() * m.Z;  // S x d
    grad.G_logl += (dr.omega.array() * HZ.array()).colwise().sum().matrix().transpose();
    grad.G_logsf2 += grad.G_amp * dr.amp * 0.5;
    pg.logl += grad.G_logl;
    pg.logsf2 += grad.G_logsf2;
  }

  // KL(q(U) || p(U)) per output, in factor form.
  double kl = 0.0;
  const double logdet_k = c.chol.log_det();
  Mat Kinv;
  if (want_grad) Kinv = c.chol.solve(Mat::Identity(L, L));
  for (Eigen::Index o = 0; o < d; ++o) {
    const Mat& C = m.q_factor[static_cast<std::size_t>(o)];
    const Vec mu = m.q_mean.col(o);
    const Vec Kinv_mu = c.chol.solve(mu);
    const Mat Kinv_C = c.chol.solve(C);
    const double logdet_s = 2.0 * C.diagonal().array().abs().log().sum();
    kl += 0.5 * ((C.array() * Kinv_C.array()).sum() + mu.dot(Kinv_mu) - static_cast<double>(L) +
                 logdet_k - logdet_s);
    if (want_grad) {
      pg.mean.col(o) -= Kinv_mu;
      Mat gC = -Kinv_C.triangularView<Eigen::Lower>().toDenseMatrix();
      gC.diagonal().array() += C.diagonal().array().inverse();
      pg.factor[static_cast<std::size_t>(o)] += gC;
      pg.GK += 0.5 * (Kinv_C * Kinv_C.transpose() + Kinv_mu * Kinv_mu.transpose() - Kinv);
    }
  }

  ElboGradient out;
  out.value = expected_loglik - kl;
  if (!want_grad) return out;

  // Chain dELBO/dK into the kernel hyperparameters (K = sf2 * (R + rel * I)).
  pg.logsf2 += (pg.GK.array() * c.K.array()).sum();
  for (Eigen::Index e = 0; e < d; ++e) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < L; ++j)
      for (Eigen::Index k = 0; k < L; ++k) {
        const double dz = m.Z(j, e) - m.Z(k, e);
        acc += pg.GK(j, k) * c.sf2 * c.R(j, k) * dz * dz;
      }
    pg.logl[e] += acc * c.inv_l2[e];
  }

  out.gradient.resize(packed_size(L, d));
  Eigen::Index k = 0;
  for (Eigen::Index o = 0; o < d; ++o)
    for (Eigen::Index j = 0; j < L; ++j) out.gradient[k++] = pg.mean(j, o);
  for (const auto& G : pg.factor)
    for (Eigen::Index col = 0; col < L; ++col)
      for (Eigen::Index row = col; row < L; ++row) out.gradient[k++] = G(row, col);
  for (Eigen::Index e = 0; e < d; ++e) out.gradient[k++] = pg.logl[e];
  out.gradient[k++] = pg.logsf2;
  for (Eigen::Index o = 0; o < d; ++o) out.gradient[k++] = pg.logsig[o];
  return out;
}

}  // namespace

double elbo(const GPODEModel& model, const Dataset& data, int K_train, Rng& rng,
            const ElboSettings& settings) {
  return elbo_impl(model, data, K_train, rng, settings, false).value;
}

ElboGradient elbo_with_gradient(const GPODEModel& model, const Dataset& data, int K_train, Rng& rng,
                                const ElboSettings& settings) {
  return elbo_impl(model, data, K_train, rng, settings, true);
}

TrainResult train(GPODEModel model, const Dataset& data, const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw ContractViolation("train: dataset must contain at least one episode");
  const Eigen::Index L = model.num_inducing(), d = model.state_dim();
  Vec theta = pack_parameters(model);
  const Eigen::Index n = theta.size();
  const Eigen::Index hyper_begin = n - (2 * d + 1);
  const Eigen::Index sigma_begin = n - d;
  // Variational entries step in units of the prior standard deviation. Adam
  // moves every coordinate by about lr regardless of gradient size, which for
  // the many small Cholesky entries is mostly noise, so those get a smaller step.
  Vec step_scale = Vec::Ones(n);
  step_scale.head(hyper_begin).setConstant(std::sqrt(model.kernel.signal_variance));
  step_scale.segment(L * d, hyper_begin - L * d) *= config.factor_step_scale;

  Vec m1 = Vec::Zero(n), m2 = Vec::Zero(n);
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const Rng base(config.seed);
  TrainResult result;
  result.loss_trace.reserve(static_cast<std::size_t>(config.iterations));

  for (int it = 0; it < config.iterations; ++it) {
    Rng rng = base.split(static_cast<std::uint64_t>(it));
    ElboGradient eg = elbo_with_gradient(model, data, config.K_train, rng, config.elbo);
    if (!std::isfinite(eg.value))
      throw NumericalError("train: non-finite ELBO at iteration " + std::to_string(it));
    result.loss_trace.push_back(-eg.value);
    Vec& grad = eg.gradient;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!std::isfinite(grad[i])) grad[i] = 0.0;
    if (!config.hypers_trainable) grad.segment(hyper_begin, d + 1).setZero();
    if (!config.sigma_trainable) grad.segment(sigma_begin, d).setZero();

    m1 = beta1 * m1 + (1.0 - beta1) * grad;
    m2 = beta2 * m2 + (1.0 - beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, it + 1), c2 = 1.0 - std::pow(beta2, it + 1);
    const double progress = config.iterations > 1 ? static_cast<double>(it) / (config.iterations - 1) : 0.0;
    const double lr = config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * progress);
    theta.array() += lr * step_scale.array() * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);

    for (Eigen::Index e = 0; e < d; ++e)
      theta[hyper_begin + e] = std::clamp(theta[hyper_begin + e], std::log(1e-3), std::log(1e3));
    theta[hyper_begin + d] = std::clamp(theta[hyper_begin + d], std::log(1e-8), std::log(1e8));
    for (Eigen::Index o = 0; o < d; ++o)
      theta[sigma_begin + o] = std::clamp(theta[sigma_begin + o], std::log(1e-6), std::log(1e3));
    unpack_parameters(model, theta);
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

std::vector<SampledDynamics> draw_posterior_functions(const GPODEModel& model, int K, Rng& rng,
                                                      Eigen::Index features) {
  model.validate();
  if (K < 1) throw ContractViolation("draw_posterior_functions: K must be >= 1");
  const Eigen::Index L = model.num_inducing(), d = model.state_dim();
  const Mat Kzz = gram(model.kernel, model.Z, model.Z);
  const auto chol = jittered_cholesky(Kzz, model.kernel.signal_variance);
  std::vector<SampledDynamics> out;
  out.reserve(static_cast<std::size_t>(K));
  for (int l = 0; l < K; ++l) {
    const Mat zeta = rng.normal_matrix(L, d);
    Mat U = model.q_mean;
    for (Eigen::Index o = 0; o < d; ++o)
      U.col(o) += model.q_factor[static_cast<std::size_t>(o)] * zeta.col(o);
    auto f = sample_fourier_features(model.kernel, features, rng, d);
    Mat v = chol.solve(U - f.feature_matrix(model.Z) * f.weights);
    out.emplace_back(std::move(f), std::move(v), model.Z, model.kernel);
  }
  return out;
}

Trajectory rollout(const SampledDynamics& g, const Vec& x0, std::span<const double> times,
                   const IntegratorConfig& config) {
  return integrate_flagged([&g](const Vec& x) { return g.evaluate(x); }, x0, times, config);
}

std::vector<Trajectory> predict_trajectories(const GPODEModel& model, const Vec& x0,
                                             std::span<const double> times, int K, Rng& rng,
                                             bool x0_noise, const PredictSettings& settings) {
  if (x0.size() != model.state_dim()) throw ContractViolation("predict_trajectories: x0 dimension");
  const auto draws = draw_posterior_functions(model, K, rng, settings.features);
  std::vector<Trajectory> out;
  out.reserve(draws.size());
  for (const auto& g : draws) {
    const Vec start = x0_noise ? Vec(x0 + model.x0_std * rng.normal_vector(x0.size())) : x0;
    out.push_back(rollout(g, start, times, settings.integrator));
  }
  return out;
}

std::vector<Mat> sample_observations(std::span<const Trajectory> trajectories, const Vec& sigma,
                                     Rng& rng) {
  std::vector<Mat> out;
  out.reserve(trajectories.size());
  for (const auto& tr : trajectories) {
    if (tr.states.cols() != sigma.size())
      throw ContractViolation("sample_observations: sigma dimension mismatch");
    Mat noise = rng.normal_matrix(tr.states.rows(), tr.states.cols());
    out.push_back(tr.states + noise * sigma.asDiagonal());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json mat_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

json vec_to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Mat mat_from_json(const json& j, const char* what) {
  if (!j.is_array()) throw SchemaError(std::string("expected matrix for ") + what);
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& r = j.at(static_cast<std::size_t>(i));
    if (!r.is_array() || static_cast<Eigen::Index>(r.size()) != cols)
      throw SchemaError(std::string("ragged matrix for ") + what);
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = r.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

Vec vec_from_json(const json& j, const char* what) {
  if (!j.is_array()) throw SchemaError(std::string("expected vector for ") + what);
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

}  // namespace

json model_to_json(const GPODEModel& m) {
  json j;
  j["schema_version"] = kModelSchemaVersion;
  j["kind"] = "gpode_model";
  j["kernel"] = {{"lengthscales", vec_to_json(m.kernel.lengthscales)},
                 {"signal_variance", m.kernel.signal_variance}};
  j["inducing_inputs"] = mat_to_json(m.Z);
  j["q_mean"] = mat_to_json(m.q_mean);
  json factors = json::array();
  for (const auto& C : m.q_factor) factors.push_back(mat_to_json(C));
  j["q_factor"] = std::move(factors);
  j["obs_noise"] = vec_to_json(m.obs_noise);
  j["x0_std"] = m.x0_std;
  j["seed"] = m.seed;
  return j;
}

GPODEModel model_from_json(const json& j) {
  try {
    if (!j.is_object() || !j.contains("schema_version"))
      throw SchemaError("model checkpoint: missing schema_version");
    if (j.at("schema_version").get<int>() != kModelSchemaVersion)
      throw SchemaError("model checkpoint: unsupported schema_version " +
                        j.at("schema_version").dump());
    if (j.value("kind", std::string()) != "gpode_model")
      throw SchemaError("model checkpoint: wrong document kind");
    GPODEModel m;
    m.kernel.lengthscales = vec_from_json(j.at("kernel").at("lengthscales"), "lengthscales");
    m.kernel.signal_variance = j.at("kernel").at("signal_variance").get<double>();
    m.Z = mat_from_json(j.at("inducing_inputs"), "inducing_inputs");
    m.q_mean = mat_from_json(j.at("q_mean"), "q_mean");
    for (const auto& f : j.at("q_factor")) m.q_factor.push_back(mat_from_json(f, "q_factor"));
    m.obs_noise = vec_from_json(j.at("obs_noise"), "obs_noise");
    m.x0_std = j.at("x0_std").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("model checkpoint: ") + e.what());
  } catch (const ContractViolation& e) {
    throw SchemaError(std::string("model checkpoint: ") + e.what());
  }
}

void save_model(const GPODEModel& model, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << model_to_json(model).dump(1) << '\n';
}

GPODEModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw SchemaError("cannot open " + path.string());
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) throw SchemaError("model checkpoint: not valid JSON: " + path.string());
  return model_from_json(j);
}

json episode_to_json(const Episode& e) {
  return {{"initial_choice", vec_to_json(e.initial_choice)},
          {"times", e.times},
          {"observations", mat_to_json(e.observations)}};
}

Episode episode_from_json(const json& j) {
  try {
    Episode e;
    e.initial_choice = vec_from_json(j.at("initial_choice"), "initial_choice");
    e.times = j.at("times").get<std::vector<double>>();
    e.observations = mat_from_json(j.at("observations"), "observations");
    e.validate();
    return e;
  } catch (const json::exception& ex) {
    throw SchemaError(std::string("episode: ") + ex.what());
  } catch (const ContractViolation& ex) {
    throw SchemaError(std::string("episode: ") + ex.what());
  }
}

}  // namespace salgpode
