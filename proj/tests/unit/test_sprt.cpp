#include <doctest.h>

#include <cmath>
#include <limits>

#include "firmbound/error.hpp"
#include "firmbound/rng.hpp"
#include "firmbound/sprt.hpp"

using namespace firmbound;

namespace {

Trajectory binary_path(int label, std::vector<double> llrs) {
  Trajectory t;
  t.label = label;
  for (double v : llrs) t.stats.push_back(LLRMatrix::binary(v));
  return t;
}

Trajectory random_trajectory(Rng& rng, int k, int horizon) {
  Trajectory t;
  t.label = static_cast<int>(rng.uniform_int(0, k - 1));
  std::vector<double> s(static_cast<std::size_t>(k), 0.0);
  for (int i = 0; i < horizon; ++i) {
    for (auto& v : s) v += rng.normal(0.0, 1.0);
    t.stats.push_back(LLRMatrix::from_scores(s));
  }
  return t;
}

// Exhaustive evaluation of the stopping rule over all (t, k, l).
Decision brute_force(const Trajectory& tr, const ThresholdSchedule& s) {
  const int k = tr.num_classes();
  for (int t = 1; t <= tr.horizon(); ++t) {
    std::vector<double> stat(static_cast<std::size_t>(k));
    for (int a = 0; a < k; ++a) {
      double m = std::numeric_limits<double>::infinity();
      for (int b = 0; b < k; ++b)
        if (b != a) m = std::min(m, tr.stats[static_cast<std::size_t>(t - 1)](a, b));
      stat[static_cast<std::size_t>(a)] = m - s.at(t, a);
    }
    int best = 0;
    for (int a = 1; a < k; ++a)
      if (stat[static_cast<std::size_t>(a)] > stat[static_cast<std::size_t>(best)]) best = a;
    if (stat[static_cast<std::size_t>(best)] >= 0.0) return {best, t, false};
    if (t == tr.horizon()) return {best, t, true};
  }
  return {};
}

}  // namespace

TEST_CASE("first crossing of a static threshold") {
  const auto d = sprt_decide(binary_path(0, {0.3, 0.7, 1.2, 0.4}), ThresholdSchedule::constant(4, 2, 1.0));
  CHECK(d == Decision{0, 3, false});
}

TEST_CASE("immediate stop with three classes") {
  const auto llr = LLRMatrix::from_scores(std::vector<double>{1.5, 0.0, -0.2});
  Trajectory t{0, {llr, llr}};
  const auto d = sprt_decide(t, ThresholdSchedule::constant(2, 3, 1.0));
  CHECK(d == Decision{0, 1, false});
}

TEST_CASE("horizon forces a stop in the direction of the last llr") {
  const auto up = sprt_decide(binary_path(0, {0.1, -0.2, 0.3}), ThresholdSchedule::constant(3, 2, 5.0));
  CHECK(up == Decision{0, 3, true});
  const auto down = sprt_decide(binary_path(1, {0.1, 0.2, -0.3}), ThresholdSchedule::constant(3, 2, 5.0));
  CHECK(down == Decision{1, 3, true});
}

TEST_CASE("schedule shorter than the trajectory is rejected") {
  CHECK_THROWS_AS(sprt_decide(binary_path(0, {0.1, 0.2, 0.3}), ThresholdSchedule::constant(2, 2, 1.0)),
                  InvalidInput);
}

TEST_CASE("zero thresholds stop at t=1 when a class dominates") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto tr = random_trajectory(rng, 2 + static_cast<int>(rng.uniform_int(0, 2)), 8);
    CHECK(sprt_decide(tr, ThresholdSchedule::constant(8, tr.num_classes(), 0.0)).tau == 1);
  }
}

TEST_CASE("raising thresholds never shortens the stopping time") {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const int k = 2 + static_cast<int>(rng.uniform_int(0, 2));
    const auto tr = random_trajectory(rng, k, 10);
    const double a = rng.uniform(0.0, 4.0);
    const double delta = rng.uniform(0.01, 2.0);
    CHECK(sprt_decide(tr, ThresholdSchedule::constant(10, k, a)).tau <=
          sprt_decide(tr, ThresholdSchedule::constant(10, k, a + delta)).tau);
  }
}

TEST_CASE("matches exhaustive evaluation for small K and T") {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const int k = 2 + static_cast<int>(rng.uniform_int(0, 2));
    const int horizon = 1 + static_cast<int>(rng.uniform_int(0, 9));
    const auto tr = random_trajectory(rng, k, horizon);
    std::vector<double> v(static_cast<std::size_t>(horizon * k));
    for (auto& x : v) x = rng.uniform(-0.5, 3.0);
    const ThresholdSchedule s(horizon, k, v);
    CHECK(sprt_decide(tr, s) == brute_force(tr, s));
  }
}

TEST_CASE("terminal decision examples") {
  const auto p = RiskParams::uniform(2, 10.0, 0.0);
  CHECK(terminal_decision(PosteriorVector({0.9, 0.1}), p) == 0);
  CHECK(terminal_decision(PosteriorVector({0.5, 0.5}), p) == 0);
  RiskParams skew{{1.0, 100.0}, 0.0, {0.5, 0.5}};
  // Risks: class 1 -> 1 * 0.6 = 0.6, class 2 -> 100 * 0.4 = 40.
  CHECK(terminal_decision(PosteriorVector({0.4, 0.6}), skew) == 0);
}

TEST_CASE("tapering schedule shapes") {
  CHECK(tapering_schedule(2.0, 4, 0.0).at(2, 0) == doctest::Approx(1.0));
  for (double kappa : {-1.5, 0.0, 1.5}) CHECK(tapering_schedule(3.0, 10, kappa).at(10, 0) == 0.0);
  // exp(kappa) < 1 keeps the curve above the line (concave), > 1 below it (convex).
  const double concave = tapering_schedule(1.0, 10, -1.5).at(5, 0);
  const double linear = tapering_schedule(1.0, 10, 0.0).at(5, 0);
  const double convex = tapering_schedule(1.0, 10, 1.5).at(5, 0);
  CHECK(concave > linear);
  CHECK(linear > convex);
  CHECK_THROWS_AS(tapering_schedule(-1.0, 10, 0.0), InvalidInput);
}

TEST_CASE("random stops") {
  for (int v : random_stops(100, 1, 4)) CHECK(v == 1);
  CHECK(random_stops(1000, 50, 9) == random_stops(1000, 50, 9));
  const auto s = random_stops(100000, 50, 21);
  double mean = 0.0;
  int lo = 100, hi = 0;
  for (int v : s) {
    mean += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  mean /= static_cast<double>(s.size());
  CHECK(std::abs(mean - 25.5) < 0.5);
  CHECK(lo == 1);
  CHECK(hi == 50);
}
