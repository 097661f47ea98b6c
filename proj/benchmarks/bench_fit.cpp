#include <benchmark/benchmark.h>

#include <Eigen/Dense>

#include "firmbound/cfl.hpp"
#include "firmbound/datasets.hpp"
#include "firmbound/eval.hpp"
#include "firmbound/gp.hpp"
#include "firmbound/policy.hpp"
#include "firmbound/rng.hpp"
#include "firmbound/stats.hpp"

namespace fb = firmbound;

namespace {

// Noisy convex bowl in d dimensions.
void regression_data(int n, int d, Eigen::MatrixXd& X, Eigen::VectorXd& y) {
  fb::Rng rng(17);
  X.resize(n, d);
  y.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) X(i, j) = rng.uniform(-1.0, 1.0);
    y(i) = X.row(i).squaredNorm() + 0.01 * rng.normal();
  }
}

void BM_CflFit(benchmark::State& state) {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  regression_data(static_cast<int>(state.range(0)), 2, X, y);
  fb::AdmmConfig cfg;
  cfg.reg = 0.02;
  for (auto _ : state) benchmark::DoNotOptimize(fb::fit_convex(X, y, cfg));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_CflFit)->Arg(250)->Arg(500)->Arg(1000)->Unit(benchmark::kMillisecond)->Complexity();

void BM_GpFit(benchmark::State& state) {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  regression_data(static_cast<int>(state.range(0)), 2, X, y);
  fb::GpConfig cfg;
  cfg.epochs = 10;
  for (auto _ : state) benchmark::DoNotOptimize(fb::fit_gp(X, y, cfg));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_GpFit)->Arg(1000)->Arg(2500)->Arg(5000)->Unit(benchmark::kMillisecond)->Complexity();

void BM_GpPredict(benchmark::State& state) {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  regression_data(2000, 2, X, y);
  fb::GpConfig cfg;
  cfg.epochs = 2;
  cfg.n_inducing = static_cast<int>(state.range(0));
  const fb::GPModel model = fb::fit_gp(X, y, cfg);
  const double x[2] = {0.1, -0.3};
  for (auto _ : state) benchmark::DoNotOptimize(model.predict_mean(x));
}
BENCHMARK(BM_GpPredict)->Arg(50)->Arg(200);

void BM_LlrToPosterior(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  fb::Rng rng(3);
  std::vector<double> logits(static_cast<std::size_t>(k));
  for (auto& v : logits) v = rng.normal();
  const std::vector<double> priors(static_cast<std::size_t>(k), 1.0 / k);
  const fb::LLRMatrix llr = fb::LLRMatrix::from_scores(logits);
  for (auto _ : state) benchmark::DoNotOptimize(fb::llr_to_posterior(llr, priors));
}
BENCHMARK(BM_LlrToPosterior)->Arg(2)->Arg(3)->Arg(10);

// Deploying a fitted policy over a test set, per trajectory.
void BM_Deploy(benchmark::State& state) {
  fb::BernoulliSpec spec;
  spec.count = 2000;
  const fb::Dataset data = fb::gen_bernoulli_toy(spec);
  fb::PolicyConfig cfg;
  cfg.regressor = state.range(0) == 0 ? fb::RegressorKind::cfl : fb::RegressorKind::gp;
  cfg.cfl_max_samples = 300;
  cfg.gp.epochs = 3;
  const auto params = fb::RiskParams::uniform(2, 10.0, 0.2);
  const fb::StoppingPolicy policy = fb::fit_policy(data.trajectories, params, cfg);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(fb::deploy(policy, data.trajectories[i]));
    i = (i + 1) % data.size();
  }
  state.SetLabel(state.range(0) == 0 ? "cfl" : "gp");
}
BENCHMARK(BM_Deploy)->Arg(0)->Arg(1);

}  // namespace

BENCHMARK_MAIN();
