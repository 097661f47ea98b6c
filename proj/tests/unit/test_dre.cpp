#include <doctest.h>

#include <cmath>
#include <vector>

#include "firmbound/datasets.hpp"
#include "firmbound/dre.hpp"
#include "firmbound/error.hpp"
#include "firmbound/rng.hpp"

using namespace firmbound;

namespace {

PosteriorVector pv(std::vector<double> p) { return PosteriorVector(std::move(p)); }

DREModel random_model(int k, int d, int order, std::uint64_t seed) {
  std::vector<double> priors(static_cast<std::size_t>(k), 0.0);
  double s = 0.0;
  for (int c = 0; c < k; ++c) s += priors[static_cast<std::size_t>(c)] = 1.0 + c;
  for (double& p : priors) p /= s;
  DREModel m = DREModel::zeros(k, d, order, priors);
  Rng rng(seed);
  for (auto& w : m.weights)
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.5 * rng.normal();
  return m;
}

std::vector<FeatureSequence> random_sequences(int count, int k, int horizon, int d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FeatureSequence> out;
  for (int i = 0; i < count; ++i) {
    FeatureSequence s{i % k, Eigen::MatrixXd(horizon, d)};
    for (Eigen::Index j = 0; j < s.x.size(); ++j) s.x.data()[j] = rng.normal() + 0.3 * s.label;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<FeatureSequence> gaussian_sequences(int count, int horizon, std::uint64_t seed, Dataset* full = nullptr) {
  GaussianSpec gs;
  gs.dim = 2;
  gs.horizon = horizon;
  gs.count = count;
  gs.seed = seed;
  Dataset d = gen_gaussian(gs);
  auto f = d.features;
  if (full) *full = std::move(d);
  return f;
}

// Held-out mean absolute LLR error at the final step.
double final_llr_error(const DREModel& m, const Dataset& test) {
  double err = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto est = estimate_llr_trajectory(m, test.features[i]);
    err += std::abs(est.stats.back()(0, 1) - test.trajectories[i].stats.back()(0, 1));
  }
  return err / static_cast<double>(test.size());
}

}  // namespace

TEST_CASE("order-0 decomposition is a sum of per-frame log ratios") {
  const std::vector<PosteriorVector> frames{pv({0.7, 0.3}), pv({0.4, 0.6}), pv({0.9, 0.1})};
  const std::vector<double> priors{0.25, 0.75};
  const auto llr = tandem_llr(frames, {}, priors, 0);
  double expect = 0.0;
  for (const auto& f : frames) expect += std::log(f[0] / f[1]) - std::log(0.25 / 0.75);
  CHECK(llr(0, 1) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(llr(1, 0) == doctest::Approx(-expect).epsilon(1e-12));
  CHECK(llr(0, 0) == 0.0);
}

TEST_CASE("uniform posteriors give a zero matrix") {
  const std::vector<PosteriorVector> longs(4, PosteriorVector::uniform(3));
  const std::vector<PosteriorVector> shorts(3, PosteriorVector::uniform(3));
  const std::vector<double> priors(3, 1.0 / 3.0);
  const auto llr = tandem_llr(longs, shorts, priors, 1);
  for (double e : llr.entries()) CHECK(e == doctest::Approx(0.0));
}

TEST_CASE("order-1 decomposition by hand") {
  // T = 3: long windows (x1,x2), (x2,x3); one short window (x2).
  const std::vector<PosteriorVector> longs{pv({0.8, 0.2}), pv({0.6, 0.4})};
  const std::vector<PosteriorVector> shorts{pv({0.5, 0.5})};
  const std::vector<double> priors{0.5, 0.5};
  const auto llr = tandem_llr(longs, shorts, priors, 1);
  CHECK(llr(0, 1) == doctest::Approx(std::log(4.0) + std::log(1.5)).epsilon(1e-12));

  const std::vector<PosteriorVector> shorts2{pv({0.75, 0.25})};
  const auto llr2 = tandem_llr(longs, shorts2, std::vector<double>{0.2, 0.8}, 1);
  CHECK(llr2(0, 1) == doctest::Approx(std::log(4.0) + std::log(1.5) - std::log(3.0) - std::log(0.25)).epsilon(1e-12));
}

TEST_CASE("online update reproduces the batch decomposition") {
  Rng rng(1);
  auto draw = [&] {
    const double a = rng.uniform(0.05, 1), b = rng.uniform(0.05, 1), c = rng.uniform(0.05, 1);
    return pv({a / (a + b + c), b / (a + b + c), c / (a + b + c)});
  };
  const std::vector<double> priors{0.2, 0.3, 0.5};
  std::vector<PosteriorVector> longs, shorts;
  for (int s = 0; s < 6; ++s) longs.push_back(draw());
  for (int s = 0; s < 5; ++s) shorts.push_back(draw());
  LLRMatrix online = tandem_llr(std::span(longs).first(1), {}, priors, 1);
  for (std::size_t s = 1; s < longs.size(); ++s) {
    online = tandem_update(online, longs[s], shorts[s - 1]);
    const auto batch = tandem_llr(std::span(longs).first(s + 1), std::span(shorts).first(s), priors, 1);
    for (std::size_t e = 0; e < 9; ++e) CHECK(online.entries()[e] == doctest::Approx(batch.entries()[e]).epsilon(1e-12));
  }
  // N = 0 takes the prior as the short window.
  const auto i0 = tandem_llr(std::span(longs).first(2), {}, priors, 0);
  const auto u0 = tandem_update(tandem_llr(std::span(longs).first(1), {}, priors, 0), longs[1], pv(priors));
  CHECK(u0(0, 2) == doctest::Approx(i0(0, 2)).epsilon(1e-12));
}

TEST_CASE("decomposition input errors") {
  const std::vector<double> priors{0.5, 0.5};
  const std::vector<PosteriorVector> longs{pv({0.5, 0.5})};
  CHECK_THROWS_AS(tandem_llr({}, {}, priors, 1), InvalidInput);
  CHECK_THROWS_AS(tandem_llr(longs, longs, priors, 0), InvalidInput);
  CHECK_THROWS_AS(tandem_llr(longs, {}, std::vector<double>{1.0}, 0), InvalidInput);
  CHECK_THROWS_AS(tandem_llr(std::vector<PosteriorVector>{pv({1.0, 0.0})}, {}, priors, 0), DegeneratePosterior);
}

TEST_CASE("uniform model losses") {
  for (int order : {0, 1, 2}) {
    for (int k : {2, 3}) {
      const auto data = random_sequences(6 * k, k, 6, 2, 2);
      const DREModel m = DREModel::zeros(k, 2, order, std::vector<double>(static_cast<std::size_t>(k), 1.0 / k));
      CHECK(mce_loss(m, data) == doctest::Approx((order + 1) * std::log(k)).epsilon(1e-12));
      CHECK(lsel_loss(m, data) == doctest::Approx(std::log(k)).epsilon(1e-12));
    }
  }
}

TEST_CASE("LSEL matches direct summation over estimated trajectories") {
  for (int order : {0, 1, 2}) {
    const int k = 3, horizon = 6;
    const auto data = random_sequences(10, k, horizon, 2, 3);
    const DREModel m = random_model(k, 2, order, 4 + static_cast<std::uint64_t>(order));
    std::vector<int> counts(k, 0);
    for (const auto& s : data) ++counts[static_cast<std::size_t>(s.label)];
    double total = 0.0;
    for (const auto& s : data) {
      const auto tr = estimate_llr_trajectory(m, s);
      for (int t = 0; t < horizon; ++t) {
        double acc = 0.0;
        for (int l = 0; l < k; ++l)
          if (l != s.label) acc += std::exp(-tr.stats[static_cast<std::size_t>(t)](s.label, l));
        total += std::log1p(acc) / counts[static_cast<std::size_t>(s.label)];
      }
    }
    CHECK(lsel_loss(m, data) == doctest::Approx(total / (k * horizon)).epsilon(1e-10));
  }
}

TEST_CASE("estimated trajectory agrees with window posteriors") {
  const auto data = random_sequences(2, 2, 5, 2, 5);
  const DREModel m = random_model(2, 2, 1, 6);
  const auto& x = data[0].x;
  const auto tr = estimate_llr_trajectory(m, data[0]);
  // t = 1 uses the single-frame posterior directly.
  const auto p1 = m.window_posterior(1, x, 0);
  CHECK(tr.stats[0](0, 1) == doctest::Approx(std::log(p1[0] / p1[1]) - std::log(m.priors[0] / m.priors[1])));
  std::vector<PosteriorVector> longs, shorts;
  for (int e = 1; e < 5; ++e) longs.push_back(m.window_posterior(2, x, e));
  for (int e = 1; e < 4; ++e) shorts.push_back(m.window_posterior(1, x, e));
  const auto direct = tandem_llr(longs, shorts, m.priors, 1);
  CHECK(tr.stats[4](0, 1) == doctest::Approx(direct(0, 1)).epsilon(1e-10));
}

TEST_CASE("analytic gradient matches finite differences") {
  for (int order : {0, 1}) {
    const auto data = random_sequences(6, 3, 5, 2, 7);
    const DREModel m = random_model(3, 2, order, 8);
    const auto g = dre_loss_gradient(m, data, 0.7, 1.3);
    CHECK(g.loss == doctest::Approx(0.7 * mce_loss(m, data) + 1.3 * lsel_loss(m, data)).epsilon(1e-12));
    const double h = 1e-6;
    for (std::size_t w = 0; w < m.weights.size(); ++w)
      for (Eigen::Index i = 0; i < m.weights[w].size(); ++i) {
        DREModel up = m, dn = m;
        up.weights[w].data()[i] += h;
        dn.weights[w].data()[i] -= h;
        const double fd = (dre_loss_gradient(up, data, 0.7, 1.3).loss - dre_loss_gradient(dn, data, 0.7, 1.3).loss) /
                          (2.0 * h);
        CHECK(std::abs(fd - g.weights[w].data()[i]) < 1e-5);
      }
  }
}

TEST_CASE("training recovers the Gaussian log-likelihood ratio") {
  const auto train = gaussian_sequences(400, 20, 11);
  Dataset test;
  gaussian_sequences(300, 20, 12, &test);
  DreConfig cfg;
  cfg.epochs = 150;
  std::vector<double> history;
  const DREModel m = train_dre(train, cfg, &history);
  REQUIRE(history.size() == 151);
  CHECK(history.back() < history.front());

  // Least-squares slope of estimated on true final LLR.
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double truth = test.trajectories[i].stats.back()(0, 1);
    const double est = estimate_llr_trajectory(m, test.features[i]).stats.back()(0, 1);
    sxy += truth * est;
    sxx += truth * truth;
  }
  CHECK(std::abs(sxy / sxx - 1.0) < 0.15);
}

TEST_CASE("more training data reduces held-out LLR error") {
  Dataset test;
  gaussian_sequences(300, 10, 21, &test);
  DreConfig cfg;
  cfg.epochs = 100;
  const double small = final_llr_error(train_dre(gaussian_sequences(20, 10, 22), cfg), test);
  const double large = final_llr_error(train_dre(gaussian_sequences(800, 10, 23), cfg), test);
  CHECK(large < small);
}

TEST_CASE("training edge cases") {
  const auto data = gaussian_sequences(20, 5, 31);
  DreConfig cfg;
  cfg.epochs = 0;
  std::vector<double> history;
  const DREModel m = train_dre(data, cfg, &history);
  CHECK(history.size() == 1);
  for (const auto& w : m.weights) CHECK(w.isZero());
  CHECK(m.priors == std::vector<double>{0.5, 0.5});

  cfg.epochs = 5;
  cfg.batch = 4;
  cfg.order = 1;
  const DREModel a = train_dre(data, cfg);
  const DREModel b = train_dre(data, cfg);
  CHECK(a.weights[1] == b.weights[1]);

  std::vector<FeatureSequence> one_class;
  for (const auto& s : data)
    if (s.label == 0) one_class.push_back(s);
  auto padded = one_class;
  padded[0].label = 2;
  CHECK_THROWS_AS(train_dre(padded, cfg), InvalidInput);

  cfg.order = 5;
  CHECK_THROWS_AS(train_dre(data, cfg), InvalidInput);

  std::vector<FeatureSequence> wide{FeatureSequence{0, Eigen::MatrixXd::Zero(3, 9)},
                                    FeatureSequence{1, Eigen::MatrixXd::Zero(3, 9)}};
  CHECK_THROWS_AS(train_dre(wide, DreConfig{}), InvalidInput);
}

TEST_CASE("model JSON round trip") {
  const DREModel m = random_model(3, 2, 1, 40);
  const DREModel back = dre_from_json(dre_to_json(m));
  CHECK(back.order == 1);
  CHECK(back.priors == m.priors);
  for (std::size_t w = 0; w < m.weights.size(); ++w) CHECK(back.weights[w] == m.weights[w]);
  CHECK_THROWS_AS(dre_from_json("{}"), InvalidInput);
  CHECK_THROWS_AS(dre_from_json("not json"), InvalidInput);
}
