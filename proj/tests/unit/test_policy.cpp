#include <doctest.h>

#include <cmath>
#include <limits>
#include <string>

#include "firmbound/datasets.hpp"
#include "firmbound/error.hpp"
#include "firmbound/eval.hpp"
#include "firmbound/policy.hpp"

using namespace firmbound;

namespace {

const std::vector<double> kUniform2{0.5, 0.5};

Trajectory posterior_path(int label, const std::vector<double>& first_class_posteriors) {
  Trajectory t;
  t.label = label;
  for (double p : first_class_posteriors) t.stats.push_back(posterior_to_llr(PosteriorVector({p, 1 - p}), kUniform2));
  return t;
}

Dataset small_gaussian(int count, std::uint64_t seed, int horizon = 10) {
  GaussianSpec g;
  g.dim = 2;
  g.horizon = horizon;
  g.count = count;
  g.seed = seed;
  g.keep_features = false;
  return gen_gaussian(g);
}

PolicyConfig fast_cfl() {
  PolicyConfig c;
  c.regressor = RegressorKind::cfl;
  c.cfl_max_samples = 150;
  c.admm.iters = 300;
  return c;
}

PolicyConfig fast_gp() {
  PolicyConfig c;
  c.regressor = RegressorKind::gp;
  c.gp.n_inducing = 40;
  c.gp.epochs = 10;
  c.gp.batch = 500;
  return c;
}

}  // namespace

TEST_CASE("stopping risk examples") {
  const auto p2 = RiskParams::uniform(2, 10.0, 0.0);
  CHECK(stopping_risk(PosteriorVector({0.5, 0.5}), p2) == doctest::Approx(5.0));
  CHECK(stopping_risk(PosteriorVector({1.0, 0.0}), p2) == 0.0);
  CHECK(stopping_risk(PosteriorVector({0.0, 1.0}), p2) == 0.0);
  const auto p3 = RiskParams::uniform(3, 10.0, 0.0);
  CHECK(stopping_risk(PosteriorVector({0.2, 0.3, 0.5}), p3) == doctest::Approx(5.0));
}

TEST_CASE("labels at the last step are the terminal stopping risk") {
  const auto data = small_gaussian(50, 3, 6);
  const auto params = RiskParams::uniform(2, 10.0, 0.1);
  const auto labels = build_labels(data.trajectories, {}, params, 5, StatisticKind::posterior);
  REQUIRE(labels.targets.size() == 50);
  for (std::size_t m = 0; m < data.size(); ++m) {
    const auto pi = llr_to_posterior(data.trajectories[m].stats[5], params.priors);
    CHECK(labels.targets(static_cast<Eigen::Index>(m)) == stopping_risk(pi, params));
    const auto pi_t = llr_to_posterior(data.trajectories[m].stats[4], params.priors);
    CHECK(labels.features(static_cast<Eigen::Index>(m), 0) == pi_t[0]);
  }
}

TEST_CASE("an infinite continuation model collapses the labels to the stopping risk") {
  const auto data = small_gaussian(20, 4, 6);
  const auto params = RiskParams::uniform(2, 10.0, 0.0);
  const ContinuationFn inf = [](std::span<const double>) { return std::numeric_limits<double>::infinity(); };
  const auto labels = build_labels(data.trajectories, inf, params, 2, StatisticKind::posterior);
  for (std::size_t m = 0; m < data.size(); ++m) {
    const auto pi = llr_to_posterior(data.trajectories[m].stats[2], params.priors);
    CHECK(labels.targets(static_cast<Eigen::Index>(m)) == stopping_risk(pi, params));
  }
}

TEST_CASE("hand-computed labels on two trajectories") {
  // T = 3, labels for t = 1 use min(G_st(S_2), next(S_2)).
  const std::vector<Trajectory> data{posterior_path(0, {0.6, 0.8, 0.9}), posterior_path(1, {0.5, 0.3, 0.1})};
  const auto params = RiskParams::uniform(2, 10.0, 0.5);
  const ContinuationFn next = [](std::span<const double> x) { return 3.0 * x[0]; };
  const auto labels = build_labels(data, next, params, 1, StatisticKind::posterior);
  // Trajectory 1: G_st(0.8) = 2, next = 2.4 -> 2. Trajectory 2: G_st(0.3) = 3, next = 0.9 -> 0.9.
  CHECK(labels.targets(0) == doctest::Approx(2.0));
  CHECK(labels.targets(1) == doctest::Approx(0.9));
  CHECK(labels.features(0, 0) == doctest::Approx(0.6));
  CHECK(labels.features(1, 0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(build_labels(std::vector<Trajectory>{data[0]}, next, params, 1, StatisticKind::posterior),
                  InvalidInput);
}

TEST_CASE("constant targets give a constant continuation risk") {
  std::vector<Trajectory> data;
  for (int i = 0; i < 60; ++i) data.push_back(posterior_path(i % 2, std::vector<double>(5, 0.5)));
  const auto params = RiskParams::uniform(2, 10.0, 0.3);
  for (const auto& cfg : {fast_cfl(), fast_gp()}) {
    auto c = cfg;
    c.gp.n_inducing = 1;
    const auto policy = fit_policy(data, params, c);
    REQUIRE(policy.steps.size() == 4);
    for (int t = 1; t <= 4; ++t) CHECK(policy.continuation_risk(t, LLRMatrix::zeros(2)) == doctest::Approx(5.3).epsilon(1e-3));
  }
}

TEST_CASE("a prohibitive sampling cost stops everything at t=1") {
  const auto train = small_gaussian(200, 5);
  const auto test = small_gaussian(100, 6);
  const auto params = RiskParams::uniform(2, 10.0, 50.0);
  const auto policy = fit_policy(train.trajectories, params, fast_gp());
  for (const auto& tr : test.trajectories) CHECK(deploy(policy, tr).tau == 1);
}

TEST_CASE("a certain posterior stops at t=1") {
  const auto train = small_gaussian(200, 5);
  const auto params = RiskParams::uniform(2, 10.0, 0.05);
  const auto policy = fit_policy(train.trajectories, params, fast_gp());
  Trajectory sure;
  sure.label = 0;
  for (int t = 0; t < 10; ++t) sure.stats.push_back(LLRMatrix::binary(800.0));
  const auto d = deploy(policy, sure);
  CHECK(d.tau == 1);
  CHECK(d.decision == 0);
}

TEST_CASE("an uninformative path runs to the horizon under a cheap cost") {
  const auto train = small_gaussian(400, 7);
  const auto params = RiskParams::uniform(2, 10.0, 0.02);
  const auto policy = fit_policy(train.trajectories, params, fast_gp());
  Trajectory flat;
  flat.label = 0;
  for (int t = 0; t < 10; ++t) flat.stats.push_back(LLRMatrix::zeros(2));
  // Along the path G_st = 5 while the fitted continuation risk is lower.
  for (int t = 1; t < 10; ++t) CHECK(policy.continuation_risk(t, LLRMatrix::zeros(2)) < 5.0);
  const auto d = deploy(policy, flat);
  CHECK(d.tau == 10);
  CHECK(d.forced);
}

TEST_CASE("decisions are invariant under joint scaling of penalty and cost") {
  const auto train = small_gaussian(300, 8);
  const auto test = small_gaussian(300, 9);
  const auto params = RiskParams::uniform(2, 10.0, 0.2);
  for (const auto& cfg : {fast_cfl(), fast_gp()}) {
    const auto base = decide_all(fit_policy(train.trajectories, params, cfg), test.trajectories);
    for (double alpha : {0.5, 3.0, 10.0}) {
      const auto scaled = decide_all(fit_policy(train.trajectories, params.scaled(alpha), cfg), test.trajectories);
      CHECK(scaled == base);
    }
  }
}

TEST_CASE("minimum risk labels stay between zero and the stopping risk") {
  const auto train = small_gaussian(300, 10);
  const auto params = RiskParams::uniform(2, 10.0, 0.2);
  const auto policy = fit_policy(train.trajectories, params, fast_cfl());
  for (const auto& tr : train.trajectories) {
    for (int t = 1; t < 10; ++t) {
      const auto& llr = tr.stats[static_cast<std::size_t>(t - 1)];
      const double g_st = stopping_risk(llr_to_posterior(llr, params.priors), params);
      const double g_min = std::min(g_st, policy.continuation_risk(t, llr));
      CHECK(g_min <= g_st);
      CHECK(g_min >= -1e-6);
    }
  }
}

TEST_CASE("policies agree with the exact oracle on the Bernoulli toy") {
  BernoulliSpec b;
  b.count = 3000;
  b.seed = 12;
  const auto train = gen_bernoulli_toy(b);
  const auto params = RiskParams::uniform(2, 10.0, 0.2);
  const auto oracle = dp_oracle(0.4, 0.6, 10, params);
  PolicyConfig cfl;
  PolicyConfig gp;
  gp.regressor = RegressorKind::gp;
  gp.gp.epochs = 10;
  for (const auto& cfg : {cfl, gp}) {
    const auto policy = fit_policy(train.trajectories, params, cfg);
    CHECK(oracle_agreement(oracle, policy) >= 0.95);
    if (cfg.regressor != RegressorKind::cfl) continue;
    // The piecewise-linear fit is concave along the posterior coordinate.
    for (int t = 1; t < 10; ++t) {
      auto g = [&](double p) {
        return policy.continuation_risk(t, posterior_to_llr(PosteriorVector({p, 1 - p}), params.priors));
      };
      for (double p = 0.1; p <= 0.9; p += 0.05) CHECK(g(p - 0.05) + g(p + 0.05) - 2 * g(p) <= 1e-9);
    }
  }
}

TEST_CASE("raising the cost does not lengthen the mean hitting time") {
  const auto train = small_gaussian(500, 13, 20);
  const auto test = small_gaussian(500, 14, 20);
  double previous = std::numeric_limits<double>::infinity();
  for (double c : {0.05, 0.5, 1.0}) {
    const auto params = RiskParams::uniform(2, 10.0, c);
    const auto r = evaluate(fit_policy(train.trajectories, params, fast_gp()), test.trajectories, params);
    CHECK(r.mean_hitting_time <= previous + 0.05);
    previous = r.mean_hitting_time;
  }
}

TEST_CASE("policy JSON round trip preserves decisions") {
  const auto train = small_gaussian(200, 15);
  const auto test = small_gaussian(200, 16);
  const auto params = RiskParams::uniform(2, 10.0, 0.2);
  for (const auto& cfg : {fast_cfl(), fast_gp()}) {
    const auto policy = fit_policy(train.trajectories, params, cfg);
    const auto text = policy_to_json(policy);
    const auto back = policy_from_json(text);
    CHECK(back.steps.size() == 9);
    CHECK(decide_all(back, test.trajectories) == decide_all(policy, test.trajectories));
    CHECK(policy_to_json(back) == text);
  }
  CHECK_THROWS_AS(policy_from_json("{\"format\":\"other\"}"), InvalidInput);
  CHECK_THROWS_AS(policy_from_json("not json"), InvalidInput);
}

TEST_CASE("configuration errors") {
  const auto train = small_gaussian(50, 17);
  const auto params = RiskParams::uniform(2, 10.0, 0.2);
  auto cfl_llr = fast_cfl();
  cfl_llr.statistic = StatisticKind::llr;
  CHECK_THROWS_AS(fit_policy(train.trajectories, params, cfl_llr), InvalidInput);
  auto gp_llr = fast_gp();
  gp_llr.statistic = StatisticKind::llr;
  CHECK(fit_policy(train.trajectories, params, gp_llr).steps.size() == 9);

  auto broken = fast_cfl();
  broken.admm.reg = -1.0;
  try {
    fit_policy(train.trajectories, params, broken);
    FAIL("expected a failure");
  } catch (const InvalidInput& e) {
    CHECK(std::string(e.what()).find("step t=9") != std::string::npos);
  }

  const auto policy = fit_policy(train.trajectories, params, fast_gp());
  const auto short_data = small_gaussian(2, 18, 5);
  CHECK_THROWS_AS(deploy(policy, short_data.trajectories[0]), InvalidInput);
}
