#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace firmbound {

enum class Curvature { convex, concave };

/// Max-affine function f(x) = max_i <a_i, x - x_i> + yhat_i, optionally
/// negated (concave). Anchors, slopes and offsets live in input/target units;
/// the normalization used during fitting is kept so the training objective
/// can be evaluated in the units the solver saw.
struct PiecewiseLinearModel {
  Eigen::MatrixXd anchors;  // n x d
  Eigen::MatrixXd slopes;   // n x d
  Eigen::VectorXd offsets;  // n
  Curvature curvature = Curvature::convex;

  // Fitting normalization: x_scaled = (x - x_center) / x_scale, y_scaled = (y - y_center) / y_scale.
  Eigen::VectorXd x_center;
  Eigen::VectorXd x_scale;
  double y_center = 0.0;
  double y_scale = 1.0;

  int dim() const noexcept { return static_cast<int>(anchors.cols()); }
  int pieces() const noexcept { return static_cast<int>(anchors.rows()); }
  double predict(std::span<const double> x) const;
};

struct AdmmConfig {
  double reg = 0.1;   ///< regularization weight on sum_l max_i |a_il|
  double rho = 0.0;   ///< augmented-Lagrangian penalty; 0 selects the default coupling
  int iters = 0;      ///< iteration count; 0 selects ceil(n sqrt(d))
  std::uint64_t seed = 0;
  bool average_iterates = true;
};

/// Default penalty for n samples in d dimensions at regularization `reg`.
double default_rho(double reg, int n, int d);
int default_iters(int n, int d);
/// Smallest regularization for which the convergence guarantee applies: 3 / sqrt(2 n d).
double reg_lower_bound(int n, int d);

/// Fits a convex max-affine function to (X, y) with 2-block ADMM.
/// Throws InvalidInput for n < 2, n < d or non-finite data; NumericFailure
/// when a per-sample system cannot be factorized even with jitter.
PiecewiseLinearModel fit_convex(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const AdmmConfig& cfg);

/// Fits a concave function by fitting -y as convex and negating the result.
PiecewiseLinearModel fit_concave(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const AdmmConfig& cfg);

/// Exact minimizer over L >= 0 of (reg/rho) L + 1/2 sum_i phi(L - gamma_i; c_i)
/// by a sorted-knot line search; `ratio` is reg/rho.
double l_update(std::span<const double> gammas, std::span<const double> cs, double ratio);

/// Regularized training objective in the solver's normalized units:
/// mean squared error of the standardized targets plus reg * sum_l max_i |a_il|.
double admm_objective(const PiecewiseLinearModel& model, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                      double reg);

struct RegGrid {
  double lo = 1e-3;
  double hi = 1e1;
  int points = 30;
  int folds = 5;
  int max_samples = 1000;
  int iters = 300;  ///< ADMM iterations per cross-validation fit
};

/// Cross-validated choice of the regularization weight over a log grid,
/// never below reg_lower_bound for the fold size.
double tune_reg(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const RegGrid& grid, std::uint64_t seed);

namespace detail {

/// Exact joint minimizer over (yhat, a) of the first ADMM block for scaled,
/// centered inputs. `q` holds p+ - p- - eta per sample and `b` the pairwise
/// slack-plus-dual matrix. Exposed for testing.
struct Block1Result {
  Eigen::VectorXd yhat;
  Eigen::MatrixXd a;
};
Block1Result solve_block1(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double rho, const Eigen::MatrixXd& q,
                          const Eigen::MatrixXd& b);

}  // namespace detail

}  // namespace firmbound
