#include <doctest.h>

#include <cmath>

#include "firmbound/cfl.hpp"
#include "firmbound/error.hpp"
#include "firmbound/rng.hpp"

using namespace firmbound;

namespace {

struct Sample {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

Sample parabola(int n, double noise, std::uint64_t seed) {
  Rng rng(seed);
  Sample s{Eigen::MatrixXd(n, 1), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    s.X(i, 0) = rng.uniform(-1.0, 1.0);
    s.y(i) = s.X(i, 0) * s.X(i, 0) + noise * rng.normal();
  }
  return s;
}

double heldout_mse(const PiecewiseLinearModel& m, double (*f)(double), int n = 500) {
  double sse = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = -1.0 + 2.0 * (i + 0.5) / n;
    const double r = m.predict(std::vector<double>{x}) - f(x);
    sse += r * r;
  }
  return sse / n;
}

double square(double x) { return x * x; }
double affine(double x) { return 2.0 * x + 1.0; }

// Block-1 objective written out directly.
double block1_objective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double rho, const Eigen::MatrixXd& q,
                        const Eigen::MatrixXd& b, const Eigen::VectorXd& yhat, const Eigen::MatrixXd& a) {
  const auto n = X.rows();
  double f = (yhat - y).squaredNorm() / static_cast<double>(n);
  double pair = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double r = yhat(i) - yhat(j) - a.row(i).dot(X.row(i) - X.row(j)) + b(i, j);
      pair += r * r;
    }
  f += rho / (2.0 * static_cast<double>(n)) * pair;
  f += rho / 2.0 * (a - q).squaredNorm();
  return f;
}

}  // namespace

TEST_CASE("predict on hand-built models") {
  PiecewiseLinearModel one;
  one.anchors = Eigen::MatrixXd::Zero(1, 1);
  one.slopes = Eigen::MatrixXd::Constant(1, 1, 2.0);
  one.offsets = Eigen::VectorXd::Constant(1, 1.0);
  CHECK(one.predict(std::vector<double>{3.0}) == doctest::Approx(7.0));

  PiecewiseLinearModel abs;
  abs.anchors = Eigen::MatrixXd::Zero(2, 1);
  abs.slopes.resize(2, 1);
  abs.slopes << -1.0, 1.0;
  abs.offsets = Eigen::VectorXd::Zero(2);
  CHECK(abs.predict(std::vector<double>{0.5}) == doctest::Approx(0.5));
  abs.curvature = Curvature::concave;
  CHECK(abs.predict(std::vector<double>{0.5}) == doctest::Approx(-0.5));
  CHECK_THROWS_AS(abs.predict(std::vector<double>{0.5, 1.0}), InvalidInput);
}

TEST_CASE("l_update hand-solved cases") {
  // One sample: knots at gamma +- c; slope 1/2 between them, 1 below.
  CHECK(l_update(std::vector<double>{2.0}, std::vector<double>{0.5}, 0.1) == doctest::Approx(2.3).epsilon(1e-12));
  CHECK(l_update(std::vector<double>{2.0}, std::vector<double>{0.5}, 0.2) == doctest::Approx(2.1).epsilon(1e-12));
  CHECK(l_update(std::vector<double>{2.0}, std::vector<double>{0.5}, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(l_update(std::vector<double>{-1.0, -2.0}, std::vector<double>{0.5, 0.3}, 0.1) == 0.0);
  // Two samples, knots {3, 1, 2.5, 1.5}: derivative reaches zero between 2.5 and 1.5.
  // f(L) = 0.4 - 0.5 (3 - 2.5) - 1.0 (2.5 - L) = 0 -> L = 2.35.
  CHECK(l_update(std::vector<double>{2.0, 2.0}, std::vector<double>{1.0, 0.5}, 0.4) ==
        doctest::Approx(2.35).epsilon(1e-12));
  CHECK_THROWS_AS(l_update(std::vector<double>{}, std::vector<double>{}, 0.1), InvalidInput);
}

TEST_CASE("block-1 solve matches a dense quadratic minimization") {
  Rng rng(4);
  const int n = 6, d = 2;
  Eigen::MatrixXd X(n, d), q(n, d), b(n, n);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int l = 0; l < d; ++l) {
      X(i, l) = rng.uniform(-1.0, 1.0);
      q(i, l) = rng.normal();
    }
    y(i) = rng.normal();
    for (int j = 0; j < n; ++j) b(i, j) = i == j ? 0.0 : std::abs(rng.normal());
  }
  // The solver expects centred inputs.
  X.rowwise() -= X.colwise().mean();
  const double rho = 0.7;
  const int nv = n + n * d;
  auto unpack = [&](const Eigen::VectorXd& z, Eigen::VectorXd& yh, Eigen::MatrixXd& a) {
    yh = z.head(n);
    a.resize(n, d);
    for (int i = 0; i < n; ++i)
      for (int l = 0; l < d; ++l) a(i, l) = z(n + i * d + l);
  };
  auto F = [&](const Eigen::VectorXd& z) {
    Eigen::VectorXd yh;
    Eigen::MatrixXd a;
    unpack(z, yh, a);
    return block1_objective(X, y, rho, q, b, yh, a);
  };
  // F is quadratic, so second differences recover the Hessian exactly.
  const Eigen::VectorXd z0 = Eigen::VectorXd::Zero(nv);
  const double f0 = F(z0);
  Eigen::MatrixXd H(nv, nv);
  Eigen::VectorXd g(nv), fe(nv);
  for (int i = 0; i < nv; ++i) fe(i) = F(Eigen::VectorXd::Unit(nv, i));
  for (int i = 0; i < nv; ++i)
    for (int j = 0; j < nv; ++j)
      H(i, j) = F(Eigen::VectorXd::Unit(nv, i) + Eigen::VectorXd::Unit(nv, j)) - fe(i) - fe(j) + f0;
  for (int i = 0; i < nv; ++i) g(i) = fe(i) - f0 - 0.5 * H(i, i);
  const Eigen::VectorXd z = H.ldlt().solve(-g);
  Eigen::VectorXd yh;
  Eigen::MatrixXd a;
  unpack(z, yh, a);

  const auto got = detail::solve_block1(X, y, rho, q, b);
  CHECK((got.yhat - yh).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((got.a - a).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("exactly affine data is recovered") {
  Rng rng(1);
  Eigen::MatrixXd X(50, 1);
  Eigen::VectorXd y(50);
  for (int i = 0; i < 50; ++i) {
    X(i, 0) = rng.uniform(-1.0, 1.0);
    y(i) = affine(X(i, 0));
  }
  AdmmConfig cfg;
  cfg.reg = 1e-3;
  cfg.iters = 4000;
  CHECK(heldout_mse(fit_convex(X, y, cfg), affine) < 1e-4);
}

TEST_CASE("noisy parabola") {
  const auto s = parabola(200, 0.01, 2);
  AdmmConfig cfg;
  cfg.reg = reg_lower_bound(200, 1);
  const auto m = fit_convex(s.X, s.y, cfg);
  CHECK(heldout_mse(m, square) < 0.05);

  // Jensen on random triples: exact for a max of affine pieces.
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(-1.5, 1.5), v = rng.uniform(-1.5, 1.5);
    const double mid = m.predict(std::vector<double>{0.5 * (u + v)});
    CHECK(mid <= 0.5 * (m.predict(std::vector<double>{u}) + m.predict(std::vector<double>{v})) + 1e-12);
  }
}

TEST_CASE("constant targets give flat slopes") {
  Rng rng(5);
  Eigen::MatrixXd X(40, 2);
  for (int i = 0; i < 40; ++i) X.row(i) << rng.uniform(-1, 1), rng.uniform(-1, 1);
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(40, 3.0);
  const auto m = fit_convex(X, y, AdmmConfig{});
  CHECK(m.slopes.cwiseAbs().maxCoeff() < 1e-3);
  for (int i = 0; i < 20; ++i)
    CHECK(std::abs(m.predict(std::vector<double>{rng.uniform(-1, 1), rng.uniform(-1, 1)}) - 3.0) < 1e-3);
}

TEST_CASE("concave fit negates a convex fit") {
  const auto s = parabola(60, 0.0, 6);
  AdmmConfig cfg;
  cfg.reg = reg_lower_bound(60, 1);
  const auto convex = fit_convex(s.X, -s.y, cfg);
  const auto concave = fit_concave(s.X, s.y, cfg);
  CHECK(concave.curvature == Curvature::concave);
  for (double x : {-0.7, 0.0, 0.4}) CHECK(concave.predict(std::vector<double>{x}) == -convex.predict(std::vector<double>{x}));
}

TEST_CASE("held-out error shrinks with more samples") {
  double prev = 1e9;
  for (int n : {50, 200, 800}) {
    const auto s = parabola(n, 0.1, 100 + static_cast<std::uint64_t>(n));
    AdmmConfig cfg;
    cfg.reg = reg_lower_bound(n, 1);
    const double mse = heldout_mse(fit_convex(s.X, s.y, cfg), square);
    CHECK(mse <= prev * 1.2);
    prev = mse;
  }
}

TEST_CASE("more iterations do not increase the objective") {
  const auto s = parabola(100, 0.05, 7);
  AdmmConfig shortcfg;
  shortcfg.reg = 0.05;
  shortcfg.iters = 200;
  AdmmConfig longcfg = shortcfg;
  longcfg.iters = 2000;
  const double a = admm_objective(fit_convex(s.X, s.y, shortcfg), s.X, s.y, 0.05);
  const double b = admm_objective(fit_convex(s.X, s.y, longcfg), s.X, s.y, 0.05);
  CHECK(b <= a + 1e-3);
}

TEST_CASE("regularization tuning") {
  RegGrid grid;
  grid.points = 8;
  grid.iters = 150;
  Rng rng(8);
  Eigen::MatrixXd X(80, 1);
  Eigen::VectorXd noise(80), clean(80);
  for (int i = 0; i < 80; ++i) {
    X(i, 0) = rng.uniform(-1, 1);
    noise(i) = rng.normal();
    clean(i) = X(i, 0) * X(i, 0);
  }
  const double floor = reg_lower_bound(64, 1);
  const double pick_noise = tune_reg(X, noise, grid, 1);
  const double pick_clean = tune_reg(X, clean, grid, 1);
  CHECK(pick_noise >= 0.5);
  CHECK(pick_noise > 2.0 * pick_clean);
  CHECK(pick_clean <= 4.0 * floor);
  CHECK(pick_clean >= floor);
  CHECK(tune_reg(X, clean, grid, 1) == pick_clean);
  CHECK_THROWS_AS(tune_reg(X.topRows(5), clean.head(5), grid, 1), InvalidInput);
}

TEST_CASE("input validation") {
  Eigen::MatrixXd X(1, 1);
  X << 0.0;
  CHECK_THROWS_AS(fit_convex(X, Eigen::VectorXd::Zero(1), AdmmConfig{}), InvalidInput);
  Eigen::MatrixXd X2(3, 1);
  X2 << 0.0, 1.0, 2.0;
  Eigen::VectorXd y2(3);
  y2 << 0.0, NAN, 1.0;
  CHECK_THROWS_AS(fit_convex(X2, y2, AdmmConfig{}), InvalidInput);
  AdmmConfig bad;
  bad.reg = 0.0;
  CHECK_THROWS_AS(fit_convex(X2, Eigen::VectorXd::Zero(3), bad), InvalidInput);
}
