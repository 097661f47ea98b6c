#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "firmbound/cfl.hpp"
#include "firmbound/gp.hpp"
#include "firmbound/sprt.hpp"
#include "firmbound/stats.hpp"

namespace firmbound {

enum class StatisticKind { posterior, llr };
enum class RegressorKind { cfl, gp };

std::string to_string(StatisticKind kind);
std::string to_string(RegressorKind kind);
StatisticKind statistic_kind_from_string(std::string_view name);
RegressorKind regressor_kind_from_string(std::string_view name);

/// min_k L_k (1 - pi_k).
double stopping_risk(const PosteriorVector& pi, const RiskParams& params);

/// Regression features of a state: the posterior vector (K values) or the
/// upper triangle of the LLR matrix (K(K-1)/2 values).
std::vector<double> state_features(const LLRMatrix& llr, std::span<const double> priors, StatisticKind kind);

struct LabelSet {
  Eigen::MatrixXd features;  // M x d, states at step t
  Eigen::VectorXd targets;   // M, minimum risk at step t + 1
};

/// Continuation-risk estimate at step t + 1 as a function of the state's
/// features. Empty for t = T - 1.
using ContinuationFn = std::function<double(std::span<const double> features)>;

/// Regression pairs for step t (1-based, 1 <= t <= T - 1): targets are
/// G_st(S_T) when t = T - 1 and min(G_st(S_{t+1}), next(S_{t+1})) otherwise.
LabelSet build_labels(std::span<const Trajectory> data, const ContinuationFn& next, const RiskParams& params, int t,
                      StatisticKind kind);

struct PolicyConfig {
  RegressorKind regressor = RegressorKind::cfl;
  StatisticKind statistic = StatisticKind::posterior;
  AdmmConfig admm = [] {
    AdmmConfig a;
    a.reg = 0.02;
    return a;
  }();
  /// Cross-validate the ADMM regularization per step instead of using admm.reg.
  bool tune_reg = false;
  RegGrid reg_grid;
  /// Training pairs per step for CFL (random subsample when M is larger).
  int cfl_max_samples = 1000;
  GpConfig gp;
  std::uint64_t seed = 0;
};

using StepModel = std::variant<PiecewiseLinearModel, GPModel>;

/// Per-step continuation-risk regressors plus the risk parameters.
///
/// Models are fitted on risks divided by the largest penalty, so the
/// stored regressors do not depend on the overall scale of (L, c).
struct StoppingPolicy {
  RiskParams params;
  StatisticKind statistic = StatisticKind::posterior;
  RegressorKind regressor = RegressorKind::cfl;
  int horizon = 0;
  double risk_scale = 1.0;            // largest penalty at fit time
  std::vector<StepModel> steps;       // steps[t - 1] for t = 1..T-1
  std::vector<double> step_train_mse; // in normalized risk units

  int num_classes() const noexcept { return params.num_classes(); }
  /// Estimated continuation risk at step t (1 <= t <= T-1), in the
  /// caller's risk units.
  double continuation_risk(int t, const LLRMatrix& llr) const;
};

/// Backward induction from t = T - 1 down to 1. Regressor failures are
/// rethrown with the step index in the message.
StoppingPolicy fit_policy(std::span<const Trajectory> data, const RiskParams& params, const PolicyConfig& cfg);

/// Stops at the first t with G_st(S_t) <= continuation risk, else at T.
Decision deploy(const StoppingPolicy& policy, const Trajectory& traj);

std::string policy_to_json(const StoppingPolicy& policy, int indent = -1);
StoppingPolicy policy_from_json(std::string_view text);

}  // namespace firmbound
