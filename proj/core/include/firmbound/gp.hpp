#pragma once

#include <cstdint>
#include <span>

#include <Eigen/Dense>

namespace firmbound {

/// sigma2 * exp(-|s - s'|^2 / (2 l^2)).
double rbf_kernel(std::span<const double> s, std::span<const double> s_prime, double sigma2, double lengthscale);

/// Sparse variational GP with an RBF kernel and a Gaussian q(f_Z) = N(mu, Sigma).
///
/// `weights` caches K_ZZ^{-1} mu so prediction is a single kernel row times a
/// vector. `prior_mean` is a constant mean function (zero unless fitted).
struct GPModel {
  Eigen::MatrixXd inducing;  // I x d
  Eigen::VectorXd mean;      // mu
  Eigen::MatrixXd cov_chol;  // lower-triangular, Sigma = L L^T
  double signal_variance = 1.0;
  double lengthscale = 1.0;
  double noise_variance = 1e-2;
  double prior_mean = 0.0;
  double jitter = 1e-8;  // relative to signal_variance
  Eigen::VectorXd weights;

  int num_inducing() const noexcept { return static_cast<int>(inducing.rows()); }
  int dim() const noexcept { return static_cast<int>(inducing.cols()); }

  /// Recomputes `weights` from `mean` with a Cholesky solve of K_ZZ.
  void refresh_cache();
  /// prior_mean + K_xZ K_ZZ^{-1} mu.
  double predict_mean(std::span<const double> x) const;
};

inline constexpr double kMinLengthscale = 1e-3;
inline constexpr double kMinNoiseVariance = 1e-6;

struct GpConfig {
  int n_inducing = 200;
  int epochs = 30;
  int batch = 2000;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
  bool learn_hyperparameters = true;
  bool learn_noise = true;
  /// Initial values; non-positive selects a data-driven default.
  double init_lengthscale = 0.0;
  double init_signal_variance = 0.0;
  double init_noise_variance = 0.0;
};

/// Fits the sparse GP by stochastic maximization of the minibatch ELBO.
/// Inducing points are distinct training inputs chosen with `cfg.seed`.
GPModel fit_gp(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const GpConfig& cfg);

/// (M_total / B) sum_b E_q[log N(y_b | f_b, eta^2)] - KL[q(f_Z) || p(f_Z)],
/// with y measured relative to the model's prior mean.
double elbo(const GPModel& model, const Eigen::MatrixXd& Xb, const Eigen::VectorXd& yb, double m_total);

/// KL[q(f_Z) || p(f_Z)] alone.
double gp_kl(const GPModel& model);

struct ElboGradient {
  double signal_variance = 0.0;
  double lengthscale = 0.0;
  double noise_variance = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov_chol;  // lower triangle
};

/// Analytic gradient of `elbo` with respect to the kernel hyperparameters,
/// the noise variance and the variational parameters.
ElboGradient elbo_gradient(const GPModel& model, const Eigen::MatrixXd& Xb, const Eigen::VectorXd& yb,
                           double m_total);

}  // namespace firmbound
