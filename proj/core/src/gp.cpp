#include "firmbound/gp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "firmbound/error.hpp"
#include "firmbound/rng.hpp"

namespace firmbound {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double softplus_inv(double y) { return y > 30.0 ? y : y + std::log(-std::expm1(-y)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  const Eigen::VectorXd an = A.rowwise().squaredNorm();
  const Eigen::VectorXd bn = B.rowwise().squaredNorm();
  Eigen::MatrixXd d = (-2.0 * A * B.transpose()).colwise() + an;
  d.rowwise() += bn.transpose();
  return d.cwiseMax(0.0);
}

Eigen::MatrixXd kernel_from_distances(const Eigen::MatrixXd& d2, double sigma2, double lengthscale) {
  return sigma2 * (-d2.array() / (2.0 * lengthscale * lengthscale)).exp().matrix();
}

// A^T A via a symmetric rank update.
Eigen::MatrixXd gram(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(a.cols(), a.cols());
  g.selfadjointView<Eigen::Lower>().rankUpdate(a.transpose());
  g.triangularView<Eigen::StrictlyUpper>() = g.transpose();
  return g;
}

// Cholesky of K_ZZ with jitter escalation from the model's jitter up to 1e-4
// (relative to the signal variance).
Eigen::LLT<Eigen::MatrixXd> factor_kzz(const Eigen::MatrixXd& kraw, double sigma2, double jitter,
                                       double* used_jitter = nullptr) {
  const Eigen::Index m = kraw.rows();
  double j = jitter;
  while (true) {
    Eigen::LLT<Eigen::MatrixXd> llt(kraw + j * sigma2 * Eigen::MatrixXd::Identity(m, m));
    if (llt.info() == Eigen::Success) {
      if (used_jitter) *used_jitter = j;
      return llt;
    }
    if (j >= 1e-4) throw NumericFailure("Cholesky of K_ZZ failed even with jitter 1e-4");
    j = std::min(1e-4, j * 10.0);
  }
}

Eigen::LLT<Eigen::MatrixXd> factor_spd(const Eigen::MatrixXd& m, const char* what) {
  const double scale = std::max(1e-300, m.diagonal().cwiseAbs().maxCoeff());
  double j = 0.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(m + j * scale * Eigen::MatrixXd::Identity(m.rows(), m.cols()));
    if (llt.info() == Eigen::Success) return llt;
    j = j == 0.0 ? 1e-12 : j * 100.0;
  }
  throw NumericFailure(std::string("Cholesky failed for ") + what);
}

struct ElboTerms {
  Eigen::MatrixXd kraw_zz, d2_zz, kb, d2_b;
  Eigen::MatrixXd P;      // K_ZZ^{-1}
  Eigen::MatrixXd Q;      // K_ZZ^{-1} Sigma K_ZZ^{-1}
  Eigen::MatrixXd kb_pq;  // K_bZ (P - Q)
  Eigen::VectorXd alpha, r, v;
  double kl = 0.0;
  double lik = 0.0;
  double scale = 1.0;
};

ElboTerms compute_terms(const GPModel& model, const Eigen::MatrixXd& Xb, const Eigen::VectorXd& yb, double m_total) {
  if (Xb.rows() == 0 || Xb.rows() != yb.size()) throw InvalidInput("ELBO batch must be nonempty and consistent");
  if (Xb.cols() != model.inducing.cols()) throw InvalidInput("ELBO batch dimension mismatch");
  ElboTerms t;
  const double s2 = model.signal_variance;
  const double l = model.lengthscale;
  const double eta2 = model.noise_variance;
  const Eigen::Index m = model.inducing.rows();
  const auto b = static_cast<double>(Xb.rows());
  t.scale = m_total / b;

  t.d2_zz = squared_distances(model.inducing, model.inducing);
  t.kraw_zz = kernel_from_distances(t.d2_zz, s2, l);
  const auto llt = factor_kzz(t.kraw_zz, s2, model.jitter);
  t.d2_b = squared_distances(Xb, model.inducing);
  t.kb = kernel_from_distances(t.d2_b, s2, l);

  const Eigen::MatrixXd& Ls = model.cov_chol;
  t.P = llt.solve(Eigen::MatrixXd::Identity(m, m));
  const Eigen::MatrixXd PLs = t.P * Ls;
  t.Q = PLs * PLs.transpose();
  t.alpha = llt.solve(model.mean);
  t.r = (yb.array() - model.prior_mean).matrix() - t.kb * t.alpha;
  t.kb_pq.noalias() = t.kb * (t.P - t.Q);
  t.v = (s2 - t.kb.cwiseProduct(t.kb_pq).rowwise().sum().array()).matrix();

  t.lik = t.scale * (-0.5 * b * std::log(2.0 * std::numbers::pi * eta2) -
                     (t.r.squaredNorm() + t.v.sum()) / (2.0 * eta2));

  const Eigen::MatrixXd Lk = llt.matrixL();
  const Eigen::MatrixXd LinvLs = Lk.triangularView<Eigen::Lower>().solve(Ls);
  double logdet_k = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) logdet_k += 2.0 * std::log(Lk(i, i));
  double logdet_s = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) logdet_s += 2.0 * std::log(std::abs(Ls(i, i)));
  t.kl = 0.5 * (LinvLs.squaredNorm() + model.mean.dot(t.alpha) - static_cast<double>(m) + logdet_k - logdet_s);
  return t;
}

// Sets q(f_Z) to the optimum implied by accumulated data statistics:
// A = K + Phi, mu = K A^{-1} phi, Sigma = K A^{-1} K. Returns A^{-1} phi,
// which equals K^{-1} mu.
Eigen::VectorXd set_variational(GPModel& model, const Eigen::MatrixXd& kzz, const Eigen::MatrixXd& phi_mat,
                                const Eigen::VectorXd& phi_vec) {
  const auto a_llt = factor_spd(kzz + phi_mat, "K_ZZ + data precision");
  const Eigen::VectorXd w = a_llt.solve(phi_vec);
  model.mean = kzz * w;
  const Eigen::MatrixXd half = a_llt.matrixL().solve(kzz);
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(kzz.rows(), kzz.cols());
  sigma.selfadjointView<Eigen::Lower>().rankUpdate(half.transpose());
  sigma.triangularView<Eigen::StrictlyUpper>() = sigma.transpose();
  model.cov_chol = factor_spd(sigma, "variational covariance").matrixL();
  return w;
}

}  // namespace

double rbf_kernel(std::span<const double> s, std::span<const double> s_prime, double sigma2, double lengthscale) {
  if (!(lengthscale > 0.0)) throw InvalidInput("RBF lengthscale must be > 0");
  if (s.size() != s_prime.size()) throw InvalidInput("RBF inputs differ in dimension");
  double d2 = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) d2 += (s[i] - s_prime[i]) * (s[i] - s_prime[i]);
  return sigma2 * std::exp(-d2 / (2.0 * lengthscale * lengthscale));
}

void GPModel::refresh_cache() {
  const Eigen::MatrixXd kraw = kernel_from_distances(squared_distances(inducing, inducing), signal_variance, lengthscale);
  const auto llt = factor_kzz(kraw, signal_variance, jitter);
  weights = llt.solve(mean);
}

double GPModel::predict_mean(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != dim()) throw InvalidInput("query dimension does not match GP model");
  const double inv = 1.0 / (2.0 * lengthscale * lengthscale);
  double out = prior_mean;
  for (Eigen::Index i = 0; i < inducing.rows(); ++i) {
    double d2 = 0.0;
    for (Eigen::Index l = 0; l < inducing.cols(); ++l) {
      const double diff = x[static_cast<std::size_t>(l)] - inducing(i, l);
      d2 += diff * diff;
    }
    out += signal_variance * std::exp(-d2 * inv) * weights(i);
  }
  return out;
}

double elbo(const GPModel& model, const Eigen::MatrixXd& Xb, const Eigen::VectorXd& yb, double m_total) {
  const ElboTerms t = compute_terms(model, Xb, yb, m_total);
  return t.lik - t.kl;
}

double gp_kl(const GPModel& model) {
  // A one-row dummy batch; only the KL term is used.
  const Eigen::MatrixXd xb = model.inducing.topRows(1);
  const Eigen::VectorXd yb = Eigen::VectorXd::Constant(1, model.prior_mean);
  return compute_terms(model, xb, yb, 1.0).kl;
}

namespace {

struct GradientParts {
  Eigen::MatrixXd P;  // K_ZZ^{-1}
  Eigen::MatrixXd C;  // K_bZ^T K_bZ
  Eigen::VectorXd alpha, r;
  Eigen::MatrixXd kb;
  double c_lik = 0.0;
};

// Hyperparameter and noise gradients only. Only traces against symmetric
// matrices are needed, so K_ZZ^{-1} Sigma K_ZZ^{-1} terms collapse into one
// product. `kb` and its Gram matrix may be passed in when already at hand.
GradientParts hyper_gradient(const GPModel& model, const Eigen::MatrixXd& Xb, const Eigen::VectorXd& yb,
                             double m_total, const Eigen::MatrixXd* kb, const Eigen::MatrixXd* kb_gram,
                             ElboGradient& g) {
  if (Xb.rows() == 0 || Xb.rows() != yb.size()) throw InvalidInput("ELBO batch must be nonempty and consistent");
  if (Xb.cols() != model.inducing.cols()) throw InvalidInput("ELBO batch dimension mismatch");
  const double s2 = model.signal_variance;
  const double l = model.lengthscale;
  const double eta2 = model.noise_variance;
  const Eigen::Index m = model.inducing.rows();
  const auto b = static_cast<double>(Xb.rows());
  const double s = m_total / b;

  GradientParts parts;
  const Eigen::MatrixXd d2_zz = squared_distances(model.inducing, model.inducing);
  const Eigen::MatrixXd kraw_zz = kernel_from_distances(d2_zz, s2, l);
  const auto llt = factor_kzz(kraw_zz, s2, model.jitter);
  const Eigen::MatrixXd d2_b = squared_distances(Xb, model.inducing);
  parts.kb = kb ? *kb : kernel_from_distances(d2_b, s2, l);
  parts.C = kb_gram ? *kb_gram : gram(parts.kb);
  const Eigen::MatrixXd& K = parts.kb;
  const Eigen::MatrixXd& C = parts.C;

  parts.P = llt.solve(Eigen::MatrixXd::Identity(m, m));
  const Eigen::MatrixXd& P = parts.P;
  const Eigen::MatrixXd PLs = P * model.cov_chol.triangularView<Eigen::Lower>();
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(m, m);
  Q.selfadjointView<Eigen::Lower>().rankUpdate(PLs);
  Q.triangularView<Eigen::StrictlyUpper>() = Q.transpose();

  parts.alpha = llt.solve(model.mean);
  const Eigen::VectorXd& alpha = parts.alpha;
  parts.r = (yb.array() - model.prior_mean).matrix() - K * alpha;
  const Eigen::VectorXd& r = parts.r;
  const Eigen::MatrixXd PmQ = P - Q;
  const double tr_pq_c = PmQ.cwiseProduct(C).sum();
  const double v_sum = b * s2 - tr_pq_c;
  const Eigen::VectorXd w = P * (K.transpose() * r);
  const double c_lik = -s / (2.0 * eta2);
  parts.c_lik = c_lik;

  // d/dK_ZZ = c (w a^T + a w^T + PCP - PCQ - QCP) + (Q + a a^T - P) / 2
  const Eigen::MatrixXd pc_terms = (P * C) * (P - 2.0 * Q);
  const Eigen::MatrixXd kl_terms = 0.5 * (Q + alpha * alpha.transpose() - P);
  auto dot_kzz = [&](const Eigen::MatrixXd& S) {
    return c_lik * (2.0 * w.dot(S * alpha) + pc_terms.cwiseProduct(S).sum()) + kl_terms.cwiseProduct(S).sum();
  };
  const Eigen::MatrixXd kzz = kraw_zz + model.jitter * s2 * Eigen::MatrixXd::Identity(m, m);
  const Eigen::MatrixXd kraw_d2 = kraw_zz.cwiseProduct(d2_zz);

  // d/dK_bZ = -2c (r a^T + K (P - Q))
  const Eigen::MatrixXd kb_pq = K * PmQ;
  const Eigen::MatrixXd kb_d2 = K.cwiseProduct(d2_b);
  const double kb_dot_kb = -2.0 * c_lik * (r.dot(K * alpha) + tr_pq_c);
  const double kb_dot_kbd2 = -2.0 * c_lik * (r.dot(kb_d2 * alpha) + kb_pq.cwiseProduct(kb_d2).sum());

  g.signal_variance = (dot_kzz(kzz) + kb_dot_kb) / s2 + c_lik * b;
  const double l3 = l * l * l;
  g.lengthscale = (dot_kzz(kraw_d2) + kb_dot_kbd2) / l3;
  g.noise_variance = s * (-b / (2.0 * eta2) + (r.squaredNorm() + v_sum) / (2.0 * eta2 * eta2));
  return parts;
}

}  // namespace

ElboGradient elbo_gradient(const GPModel& model, const Eigen::MatrixXd& Xb, const Eigen::VectorXd& yb,
                           double m_total) {
  ElboGradient g;
  const GradientParts t = hyper_gradient(model, Xb, yb, m_total, nullptr, nullptr, g);
  const double s = m_total / static_cast<double>(Xb.rows());
  const double eta2 = model.noise_variance;
  const Eigen::MatrixXd& P = t.P;
  const Eigen::Index m = model.inducing.rows();
  g.mean = (s / eta2) * (P * (t.kb.transpose() * t.r)) - t.alpha;

  const Eigen::MatrixXd& Ls = model.cov_chol;
  const Eigen::MatrixXd Ls_inv = Ls.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(m, m));
  const Eigen::MatrixXd sigma_inv = Ls_inv.transpose() * Ls_inv;
  const Eigen::MatrixXd g_sigma = t.c_lik * P * t.C * P - 0.5 * P + 0.5 * sigma_inv;
  g.cov_chol = (2.0 * g_sigma * Ls).triangularView<Eigen::Lower>();
  return g;
}

GPModel fit_gp(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const GpConfig& cfg) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (n != y.size()) throw InvalidInput("X and y have different sample counts");
  if (cfg.n_inducing < 1) throw InvalidInput("GP needs at least one inducing point");
  if (n < cfg.n_inducing) throw InvalidInput("GP needs at least as many samples as inducing points");
  if (cfg.epochs < 0 || cfg.batch < 1) throw InvalidInput("invalid GP optimizer settings");
  if (!X.allFinite() || !y.allFinite()) throw InvalidInput("non-finite GP training data");

  Rng rng(cfg.seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto shuffle = [&](std::vector<Eigen::Index>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(v[i - 1], v[j]);
    }
  };
  shuffle(order);

  // Distinct training inputs as inducing points.
  std::vector<Eigen::Index> chosen;
  std::set<std::vector<double>> seen;
  for (Eigen::Index idx : order) {
    std::vector<double> key(static_cast<std::size_t>(d));
    for (Eigen::Index l = 0; l < d; ++l) key[static_cast<std::size_t>(l)] = X(idx, l);
    if (seen.insert(key).second) chosen.push_back(idx);
    if (static_cast<int>(chosen.size()) == cfg.n_inducing) break;
  }
  const auto m = static_cast<Eigen::Index>(chosen.size());

  GPModel model;
  model.inducing.resize(m, d);
  for (Eigen::Index i = 0; i < m; ++i) model.inducing.row(i) = X.row(chosen[static_cast<std::size_t>(i)]);
  model.prior_mean = y.mean();
  const double yvar = (y.array() - model.prior_mean).square().mean();

  double l0 = cfg.init_lengthscale;
  if (!(l0 > 0.0)) {
    const Eigen::MatrixXd d2 = squared_distances(model.inducing, model.inducing);
    std::vector<double> dist;
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = i + 1; j < m; ++j) dist.push_back(std::sqrt(d2(i, j)));
    if (!dist.empty()) {
      std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2), dist.end());
      l0 = dist[dist.size() / 2];
    }
    if (!(l0 > 0.0)) l0 = 1.0;
  }
  double s0 = cfg.init_signal_variance > 0.0 ? cfg.init_signal_variance : std::max(yvar, 1e-4);
  double n0 = cfg.init_noise_variance > 0.0 ? cfg.init_noise_variance : std::max(0.1 * yvar, 1e-4);
  model.lengthscale = std::max(l0, kMinLengthscale);
  model.signal_variance = s0;
  model.noise_variance = std::max(n0, kMinNoiseVariance);

  double raw_s = softplus_inv(model.signal_variance);
  double raw_l = softplus_inv(std::max(model.lengthscale - kMinLengthscale, 1e-12));
  double raw_n = softplus_inv(std::max(model.noise_variance - kMinNoiseVariance, 1e-12));
  auto apply_raw = [&] {
    model.signal_variance = std::max(softplus(raw_s), 1e-10);
    model.lengthscale = kMinLengthscale + softplus(raw_l);
    model.noise_variance = kMinNoiseVariance + softplus(raw_n);
  };

  const Eigen::VectorXd yc = (y.array() - model.prior_mean).matrix();
  const Eigen::Index batch = std::min<Eigen::Index>(cfg.batch, n);
  const double beta_floor = std::min(1.0, static_cast<double>(batch) / static_cast<double>(n));
  const Eigen::Index batches_per_epoch = (n + batch - 1) / batch;
  const double total_steps = static_cast<double>(std::max<Eigen::Index>(1, cfg.epochs * batches_per_epoch));

  auto kzz_now = [&] {
    const Eigen::MatrixXd kraw =
        kernel_from_distances(squared_distances(model.inducing, model.inducing), model.signal_variance,
                              model.lengthscale);
    double used = model.jitter;
    factor_kzz(kraw, model.signal_variance, model.jitter, &used);
    model.jitter = used;
    return Eigen::MatrixXd(kraw + used * model.signal_variance * Eigen::MatrixXd::Identity(m, m));
  };

  Eigen::MatrixXd phi_mat = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd phi_vec = Eigen::VectorXd::Zero(m);
  model.mean = Eigen::VectorXd::Zero(m);
  model.cov_chol = factor_spd(kzz_now(), "prior covariance").matrixL();

  double adam_m[3] = {0, 0, 0}, adam_v[3] = {0, 0, 0};
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  long step = 0;
  Eigen::MatrixXd xb(batch, d);
  Eigen::VectorXd yb(batch);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    shuffle(perm);
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index bsz = std::min(batch, n - start);
      xb.resize(bsz, d);
      yb.resize(bsz);
      for (Eigen::Index i = 0; i < bsz; ++i) {
        xb.row(i) = X.row(perm[static_cast<std::size_t>(start + i)]);
        yb(i) = yc(perm[static_cast<std::size_t>(start + i)]);
      }
      const double bscale = static_cast<double>(n) / static_cast<double>(bsz);

      // Natural-gradient step on q(f_Z): blend the minibatch's data
      // precision into running statistics and re-derive (mu, Sigma).
      const Eigen::MatrixXd kzz = kzz_now();
      const Eigen::MatrixXd kb =
          kernel_from_distances(squared_distances(xb, model.inducing), model.signal_variance, model.lengthscale);
      const double beta = std::max(beta_floor, 1.0 / static_cast<double>(step + 1));
      const double w = bscale / model.noise_variance;
      const Eigen::MatrixXd kb_gram = gram(kb);
      phi_mat = (1.0 - beta) * phi_mat + beta * w * kb_gram;
      phi_vec = (1.0 - beta) * phi_vec + beta * w * (kb.transpose() * yb);
      set_variational(model, kzz, phi_mat, phi_vec);

      if (cfg.learn_hyperparameters || cfg.learn_noise) {
        GPModel centred = model;
        centred.prior_mean = 0.0;
        ElboGradient g;
        hyper_gradient(centred, xb, yb, static_cast<double>(n), &kb, &kb_gram, g);
        const double lr =
            cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
        double grads[3] = {g.signal_variance * sigmoid(raw_s), g.lengthscale * sigmoid(raw_l),
                           g.noise_variance * sigmoid(raw_n)};
        double* raws[3] = {&raw_s, &raw_l, &raw_n};
        const bool active[3] = {cfg.learn_hyperparameters, cfg.learn_hyperparameters, cfg.learn_noise};
        const double t1 = static_cast<double>(step + 1);
        for (int p = 0; p < 3; ++p) {
          if (!active[p] || !std::isfinite(grads[p])) continue;
          adam_m[p] = kBeta1 * adam_m[p] + (1.0 - kBeta1) * grads[p];
          adam_v[p] = kBeta2 * adam_v[p] + (1.0 - kBeta2) * grads[p] * grads[p];
          const double mhat = adam_m[p] / (1.0 - std::pow(kBeta1, t1));
          const double vhat = adam_v[p] / (1.0 - std::pow(kBeta2, t1));
          *raws[p] += lr * mhat / (std::sqrt(vhat) + kEps);
        }
        apply_raw();
      }
      ++step;
    }
  }

  // Final full-data pass at the learned hyperparameters.
  const Eigen::MatrixXd kzz = kzz_now();
  phi_mat.setZero();
  phi_vec.setZero();
  for (Eigen::Index start = 0; start < n; start += batch) {
    const Eigen::Index bsz = std::min(batch, n - start);
    const Eigen::MatrixXd kb = kernel_from_distances(squared_distances(X.middleRows(start, bsz), model.inducing),
                                                     model.signal_variance, model.lengthscale);
    phi_mat += gram(kb);
    phi_vec.noalias() += kb.transpose() * yc.segment(start, bsz);
  }
  phi_mat /= model.noise_variance;
  phi_vec /= model.noise_variance;
  model.weights = set_variational(model, kzz, phi_mat, phi_vec);
  if (!model.weights.allFinite()) throw NumericFailure("GP fit produced non-finite weights");
  return model;
}

}  // namespace firmbound
