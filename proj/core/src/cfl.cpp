#include "firmbound/cfl.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <string>

#include "firmbound/error.hpp"
#include "firmbound/rng.hpp"

namespace firmbound {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_data(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  if (X.rows() != y.size()) throw InvalidInput("X and y have different sample counts");
  if (X.rows() < 2) throw InvalidInput("convex regression needs at least two samples");
  if (X.cols() < 1) throw InvalidInput("convex regression needs at least one feature");
  if (X.rows() < X.cols()) throw InvalidInput("convex regression needs n >= d");
  if (!X.allFinite() || !y.allFinite()) throw InvalidInput("non-finite regression data");
}

// Per-sample inverses and the Woodbury factorization of the yhat system.
// Everything here depends only on the scaled inputs and rho, so it is built
// once per fit.
class Block1Solver {
 public:
  Block1Solver(const Eigen::MatrixXd& X, double rho) : x_(X), rho_(rho) {
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    const double nd = static_cast<double>(n);
    const Eigen::MatrixXd S = (X.transpose() * X) / nd;

    lambda_.resize(n);
    w_.resize(n, d);
    h_.resize(n);
    sum_lambda_ = Eigen::MatrixXd::Zero(d, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd xi = X.row(i).transpose();
      Eigen::MatrixXd m = xi * xi.transpose() + S + Eigen::MatrixXd::Identity(d, d);
      lambda_[i] = invert_spd(m, i);
      w_.row(i) = (lambda_[i] * xi).transpose();
      h_(i) = xi.dot(w_.row(i).transpose());
      sum_lambda_ += lambda_[i];
    }
    const Eigen::VectorXd W = w_.colwise().sum().transpose();
    const double H = h_.sum();

    diag_ = (2.0 + rho * nd * (2.0 - h_.array())).matrix();
    const Eigen::Index r = 2 * d + 2;
    U_.resize(n, r);
    V_.resize(n, r);
    for (Eigen::Index k = 0; k < n; ++k) {
      const Eigen::VectorXd xk = X.row(k).transpose();
      U_(k, 0) = rho * (-2.0 * nd + nd * h_(k) - H + xk.dot(W));
      U_.block(k, 1, 1, d) = (rho * (-nd * w_.row(k).transpose() + W - sum_lambda_ * xk)).transpose();
      U_.block(k, 1 + d, 1, d) = -rho * xk.transpose();
      U_(k, 1 + 2 * d) = rho;

      V_(k, 0) = 1.0 / nd;
      V_.block(k, 1, 1, d) = xk.transpose() / nd;
      V_.block(k, 1 + d, 1, d) = w_.row(k);
      V_(k, 1 + 2 * d) = h_(k);
    }
    dinv_u_ = diag_.cwiseInverse().asDiagonal() * U_;
    const Eigen::MatrixXd small = Eigen::MatrixXd::Identity(r, r) + V_.transpose() * dinv_u_;
    small_lu_ = small.fullPivLu();
    if (!small_lu_.isInvertible()) throw NumericFailure("ADMM yhat system is singular");
  }

  // rowB(i) = sum_j b_ij, rowBX(i,:) = sum_j b_ij x_j, colB(j) = sum_i b_ij.
  void solve(const Eigen::VectorXd& y, const Eigen::MatrixXd& q, const Eigen::VectorXd& rowB,
             const Eigen::MatrixXd& rowBX, const Eigen::VectorXd& colB, Eigen::VectorXd& yhat,
             Eigen::MatrixXd& a) const {
    const Eigen::Index n = x_.rows();
    const Eigen::Index d = x_.cols();
    const double nd = static_cast<double>(n);

    Eigen::MatrixXd theta = q + (x_.array().colwise() * rowB.array()).matrix() / nd - rowBX / nd;
    Eigen::MatrixXd lam_theta(n, d);
    for (Eigen::Index i = 0; i < n; ++i) lam_theta.row(i) = (lambda_[i] * theta.row(i).transpose()).transpose();
    const Eigen::VectorXd a_theta = lam_theta.colwise().sum().transpose();
    const Eigen::VectorXd x_lam_theta = (x_.array() * lam_theta.array()).rowwise().sum();
    const double c_theta = x_lam_theta.sum();

    const Eigen::VectorXd beta = rowB - colB;
    const Eigen::VectorXd constant =
        rho_ * ((-nd) * x_lam_theta.array() + c_theta - (x_ * a_theta).array()).matrix();
    const Eigen::VectorXd rhs = 2.0 * y - rho_ * beta - constant;

    const Eigen::VectorXd dinv_rhs = rhs.cwiseQuotient(diag_);
    const Eigen::VectorXd z = small_lu_.solve(V_.transpose() * dinv_rhs);
    yhat = dinv_rhs - dinv_u_ * z;

    const double m = yhat.mean();
    const Eigen::VectorXd g = x_.transpose() * yhat / nd;
    a.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd rhs_i = theta.row(i).transpose() + (yhat(i) - m) * x_.row(i).transpose() + g;
      a.row(i) = (lambda_[i] * rhs_i).transpose();
    }
  }

 private:
  static Eigen::MatrixXd invert_spd(Eigen::MatrixXd m, Eigen::Index sample) {
    const Eigen::Index d = m.rows();
    double jitter = 0.0;
    for (int attempt = 0; attempt < 6; ++attempt) {
      Eigen::LLT<Eigen::MatrixXd> llt(m + jitter * Eigen::MatrixXd::Identity(d, d));
      if (llt.info() == Eigen::Success) return llt.solve(Eigen::MatrixXd::Identity(d, d));
      jitter = jitter == 0.0 ? 1e-10 : jitter * 100.0;
    }
    throw NumericFailure("per-sample ADMM system is singular at sample " + std::to_string(sample));
  }

  const Eigen::MatrixXd& x_;
  double rho_;
  std::vector<Eigen::MatrixXd> lambda_;
  Eigen::MatrixXd w_;
  Eigen::VectorXd h_;
  Eigen::MatrixXd sum_lambda_;
  Eigen::VectorXd diag_;
  Eigen::MatrixXd U_, V_, dinv_u_;
  Eigen::FullPivLU<Eigen::MatrixXd> small_lu_;
};

struct Normalization {
  Eigen::VectorXd x_center, x_scale;
  double y_center = 0.0, y_scale = 1.0;
};

Normalization normalize(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  Normalization nz;
  nz.x_center = X.colwise().mean().transpose();
  nz.x_scale.resize(X.cols());
  for (Eigen::Index l = 0; l < X.cols(); ++l) {
    const double s = (X.col(l).array() - nz.x_center(l)).abs().maxCoeff();
    nz.x_scale(l) = s > 0.0 ? s : 1.0;
  }
  nz.y_center = y.mean();
  const double var = (y.array() - nz.y_center).square().mean();
  nz.y_scale = var > 0.0 ? std::sqrt(var) : 1.0;
  return nz;
}

double max_affine(const Eigen::MatrixXd& anchors, const Eigen::MatrixXd& slopes, const Eigen::VectorXd& offsets,
                  std::span<const double> x) {
  double best = -std::numeric_limits<double>::infinity();
  const Eigen::Index d = anchors.cols();
  for (Eigen::Index i = 0; i < anchors.rows(); ++i) {
    double v = offsets(i);
    for (Eigen::Index l = 0; l < d; ++l) v += slopes(i, l) * (x[static_cast<std::size_t>(l)] - anchors(i, l));
    best = std::max(best, v);
  }
  return best;
}

bool g_iters_warned = false;

}  // namespace

double PiecewiseLinearModel::predict(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != dim()) throw InvalidInput("query dimension does not match model");
  const double v = max_affine(anchors, slopes, offsets, x);
  return curvature == Curvature::concave ? -v : v;
}

double default_rho(double reg, int n, int d) {
  (void)reg;
  (void)d;
  return 1.0 / static_cast<double>(n);
}

int default_iters(int n, int d) {
  return static_cast<int>(std::ceil(static_cast<double>(n) * std::sqrt(static_cast<double>(d))));
}

double reg_lower_bound(int n, int d) { return 3.0 / std::sqrt(2.0 * static_cast<double>(n) * d); }

double l_update(std::span<const double> gammas, std::span<const double> cs, double ratio) {
  if (gammas.empty() || gammas.size() != cs.size()) throw InvalidInput("l_update needs matching nonempty inputs");
  const std::size_t n = gammas.size();
  std::vector<double> knots;
  knots.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    knots.push_back(gammas[i] + cs[i]);
    knots.push_back(gammas[i] - cs[i]);
  }
  std::sort(knots.begin(), knots.end(), std::greater<>());
  double f = ratio;
  double slope = 0.0;
  for (std::size_t j = 1; j < knots.size(); ++j) {
    slope += 0.5;
    f += slope * (knots[j] - knots[j - 1]);
    if (f <= 0.0) return std::max(0.0, knots[j] - f / slope);
  }
  return std::max(0.0, knots.back() - f / static_cast<double>(n));
}

namespace detail {

Block1Result solve_block1(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double rho, const Eigen::MatrixXd& q,
                          const Eigen::MatrixXd& b) {
  Block1Solver solver(X, rho);
  const Eigen::VectorXd rowB = b.rowwise().sum();
  const Eigen::VectorXd colB = b.colwise().sum().transpose();
  const Eigen::MatrixXd rowBX = b * X;
  Block1Result out;
  solver.solve(y, q, rowB, rowBX, colB, out.yhat, out.a);
  return out;
}

}  // namespace detail

PiecewiseLinearModel fit_convex(const Eigen::MatrixXd& X_in, const Eigen::VectorXd& y_in, const AdmmConfig& cfg) {
  check_data(X_in, y_in);
  if (!(cfg.reg > 0.0)) throw InvalidInput("ADMM regularization must be > 0");
  if (cfg.rho < 0.0) throw InvalidInput("ADMM rho must be > 0");
  if (cfg.iters < 0) throw InvalidInput("ADMM iteration count must be >= 1");

  const Eigen::Index n = X_in.rows();
  const Eigen::Index d = X_in.cols();
  const int ni = static_cast<int>(n);
  const int di = static_cast<int>(d);
  const double rho = cfg.rho > 0.0 ? cfg.rho : default_rho(cfg.reg, ni, di);
  const int iters = cfg.iters > 0 ? cfg.iters : default_iters(ni, di);
  if (iters < default_iters(ni, di) && !g_iters_warned) {
    g_iters_warned = true;
    std::clog << "warning: ADMM iteration count " << iters << " is below ceil(n sqrt(d)) = " << default_iters(ni, di)
              << "; convergence guarantee does not apply\n";
  }

  const Normalization nz = normalize(X_in, y_in);
  const Eigen::MatrixXd X =
      ((X_in.rowwise() - nz.x_center.transpose()).array().rowwise() / nz.x_scale.transpose().array()).matrix();
  const Eigen::VectorXd y = ((y_in.array() - nz.y_center) / nz.y_scale).matrix();

  const Block1Solver block1(X, rho);
  const double ratio = cfg.reg / rho;

  Eigen::VectorXd yhat = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, d);
  Eigen::MatrixXd eta = Eigen::MatrixXd::Zero(n, d);
  Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(n, d);
  Eigen::MatrixXd p_plus = Eigen::MatrixXd::Zero(n, d);
  Eigen::MatrixXd p_minus = Eigen::MatrixXd::Zero(n, d);
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(n, d);
  Eigen::VectorXd L = Eigen::VectorXd::Zero(d);
  RowMatrix alpha = RowMatrix::Zero(n, n);

  Eigen::VectorXd rowB = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd colB = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd rowBX = Eigen::MatrixXd::Zero(n, d);

  Eigen::VectorXd yhat_sum = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd a_sum = Eigen::MatrixXd::Zero(n, d);

  Eigen::VectorXd ax(n), brow(n);
  std::vector<double> gam(static_cast<std::size_t>(n)), cabs(static_cast<std::size_t>(n));

  for (int it = 0; it < iters; ++it) {
    // Block 1: joint (yhat, a).
    block1.solve(y, p_plus - p_minus - eta, rowB, rowBX, colB, yhat, a);
    if (!yhat.allFinite() || !a.allFinite())
      throw NumericFailure("ADMM diverged at iteration " + std::to_string(it + 1));

    // Block 2 and dual ascent on the pairwise constraints, fused: with
    // v = alpha + r the slack is (-v)^+, the new dual (v)^+, and the next
    // block-1 input alpha + s = |v|.
    const Eigen::VectorXd c = (a.array() * X.array()).rowwise().sum();
    colB.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      ax.noalias() = X * a.row(i).transpose();
      auto arow = alpha.row(i);
      const double base = yhat(i) - c(i);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double v = arow(j) + base - yhat(j) + ax(j);
        arow(j) = v > 0.0 ? v : 0.0;
        brow(j) = std::abs(v);
      }
      arow(i) = 0.0;
      brow(i) = 0.0;
      rowB(i) = brow.sum();
      rowBX.row(i).noalias() = (X.transpose() * brow).transpose();
      colB += brow;
    }

    // Block 2 on (L, u, p+, p-), then duals gamma and eta.
    for (Eigen::Index l = 0; l < d; ++l) {
      for (Eigen::Index i = 0; i < n; ++i) {
        gam[static_cast<std::size_t>(i)] = gamma(i, l);
        cabs[static_cast<std::size_t>(i)] = std::abs(eta(i, l) + a(i, l));
      }
      L(l) = l_update(gam, cabs, ratio);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double e = eta(i, l) + a(i, l);
        const double m = L(l) - gamma(i, l);
        u(i, l) = std::max(0.0, m - std::abs(e));
        p_plus(i, l) = 0.5 * std::max(0.0, m - u(i, l) + e);
        p_minus(i, l) = 0.5 * std::max(0.0, m - u(i, l) - e);
        gamma(i, l) += u(i, l) + p_plus(i, l) + p_minus(i, l) - L(l);
        eta(i, l) += a(i, l) - p_plus(i, l) + p_minus(i, l);
      }
    }

    yhat_sum += yhat;
    a_sum += a;
  }

  if (cfg.average_iterates) {
    yhat = yhat_sum / static_cast<double>(iters);
    a = a_sum / static_cast<double>(iters);
  }

  PiecewiseLinearModel model;
  model.anchors = X_in;
  model.slopes = (a.array().rowwise() * (nz.y_scale / nz.x_scale.array()).transpose()).matrix();
  model.offsets = (nz.y_center + nz.y_scale * yhat.array()).matrix();
  model.curvature = Curvature::convex;
  model.x_center = nz.x_center;
  model.x_scale = nz.x_scale;
  model.y_center = nz.y_center;
  model.y_scale = nz.y_scale;
  return model;
}

PiecewiseLinearModel fit_concave(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const AdmmConfig& cfg) {
  PiecewiseLinearModel m = fit_convex(X, -y, cfg);
  m.curvature = Curvature::concave;
  return m;
}

double admm_objective(const PiecewiseLinearModel& model, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                      double reg) {
  check_data(X, y);
  const double sign = model.curvature == Curvature::concave ? -1.0 : 1.0;
  double sse = 0.0;
  std::vector<double> row(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index l = 0; l < X.cols(); ++l) row[static_cast<std::size_t>(l)] = X(i, l);
    const double f = max_affine(model.anchors, model.slopes, model.offsets, row);
    const double r = (sign * y(i) - f) / model.y_scale;
    sse += r * r;
  }
  double penalty = 0.0;
  for (Eigen::Index l = 0; l < model.slopes.cols(); ++l) {
    penalty += model.slopes.col(l).cwiseAbs().maxCoeff() * model.x_scale(l) / model.y_scale;
  }
  return sse / static_cast<double>(X.rows()) + reg * penalty;
}

double tune_reg(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const RegGrid& grid, std::uint64_t seed) {
  check_data(X, y);
  if (X.rows() < 10) throw InvalidInput("tune_reg needs at least 10 samples");
  if (grid.points < 1 || grid.folds < 2 || !(grid.lo > 0.0) || !(grid.hi >= grid.lo))
    throw InvalidInput("invalid regularization grid");

  Rng rng(seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(X.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  const auto n = std::min<std::size_t>(order.size(), static_cast<std::size_t>(grid.max_samples));
  order.resize(n);
  const int folds = std::min<int>(grid.folds, static_cast<int>(n));
  const int d = static_cast<int>(X.cols());
  const int train_n = static_cast<int>(n - (n + folds - 1) / folds);
  const double floor = reg_lower_bound(train_n, d);

  std::vector<double> candidates;
  for (int g = 0; g < grid.points; ++g) {
    const double frac = grid.points == 1 ? 0.0 : static_cast<double>(g) / (grid.points - 1);
    const double reg = std::max(floor, grid.lo * std::pow(grid.hi / grid.lo, frac));
    if (candidates.empty() || reg > candidates.back()) candidates.push_back(reg);
  }

  double best_reg = candidates.front();
  double best_mse = std::numeric_limits<double>::infinity();
  for (double reg : candidates) {
    double sse = 0.0;
    for (int f = 0; f < folds; ++f) {
      std::vector<Eigen::Index> tr, te;
      for (std::size_t i = 0; i < n; ++i) (static_cast<int>(i % folds) == f ? te : tr).push_back(order[i]);
      Eigen::MatrixXd Xtr(static_cast<Eigen::Index>(tr.size()), X.cols());
      Eigen::VectorXd ytr(static_cast<Eigen::Index>(tr.size()));
      for (std::size_t i = 0; i < tr.size(); ++i) {
        Xtr.row(static_cast<Eigen::Index>(i)) = X.row(tr[i]);
        ytr(static_cast<Eigen::Index>(i)) = y(tr[i]);
      }
      AdmmConfig cfg;
      cfg.reg = reg;
      cfg.iters = grid.iters;
      const PiecewiseLinearModel m = fit_convex(Xtr, ytr, cfg);
      std::vector<double> row(static_cast<std::size_t>(X.cols()));
      for (Eigen::Index idx : te) {
        for (Eigen::Index l = 0; l < X.cols(); ++l) row[static_cast<std::size_t>(l)] = X(idx, l);
        const double r = y(idx) - m.predict(row);
        sse += r * r;
      }
    }
    const double mse = sse / static_cast<double>(n);
    if (mse < best_mse) {
      best_mse = mse;
      best_reg = reg;
    }
  }
  return best_reg;
}

}  // namespace firmbound
