#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "firmbound/policy.hpp"
#include "firmbound/sprt.hpp"
#include "firmbound/stats.hpp"

namespace firmbound {

struct EvalReport {
  std::string policy_id;
  double cost = 0.0;
  std::optional<double> threshold;  // static-threshold baselines only
  double mean_hitting_time = 0.0;
  double hitting_time_variance = 0.0;  // population variance
  double aapr = 0.0;
  std::vector<double> per_class_error;
  double macro_error = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> oracle_agreement;
};

std::vector<Decision> decide_all(const StoppingPolicy& policy, std::span<const Trajectory> data);
std::vector<Decision> decide_all(const ThresholdSchedule& schedule, std::span<const Trajectory> data);
/// Stops at uniformly random times and decides by the posterior at that time.
std::vector<Decision> decide_random(std::span<const Trajectory> data, const RiskParams& params, std::uint64_t seed);

/// Hitting-time statistics, AAPR and per-class errors of given decisions.
/// Throws InvalidInput when a class has no trajectories.
EvalReport summarize(std::span<const Trajectory> data, std::span<const Decision> decisions, const RiskParams& params);

EvalReport evaluate(const StoppingPolicy& policy, std::span<const Trajectory> data, const RiskParams& params);
EvalReport evaluate(const ThresholdSchedule& schedule, std::span<const Trajectory> data, const RiskParams& params);

struct RandomStopping {
  std::uint64_t seed = 0;
};

/// One entry of a sweep: what decides, under which risk parameters.
struct Candidate {
  std::string id;
  std::variant<const StoppingPolicy*, ThresholdSchedule, RandomStopping> decider;
  RiskParams params;
  std::optional<double> threshold;
  std::uint64_t seed = 0;
};

EvalReport evaluate(const Candidate& c, std::span<const Trajectory> data);

/// Speed-accuracy table: one report per candidate, in input order.
std::vector<EvalReport> sat_sweep(std::span<const Trajectory> data, std::span<const Candidate> candidates);
/// AAPR table: every candidate evaluated under every cost in `costs`.
std::vector<EvalReport> aapr_sweep(std::span<const Trajectory> data, std::span<const Candidate> candidates,
                                   std::span<const double> costs);

/// `points` evenly spaced values in [lo, hi].
std::vector<double> linear_grid(double lo, double hi, int points);
/// Static SPRT baselines: one candidate per threshold.
std::vector<Candidate> static_candidates(int horizon, const RiskParams& params, std::span<const double> thresholds,
                                         std::uint64_t seed = 0);

struct VarianceReport {
  double policy_mean = 0.0;
  double policy_variance = 0.0;
  double static_mean = 0.0;
  double static_variance = 0.0;
  double static_threshold = 0.0;
};

/// Calibrates a constant threshold by bisection (at most 40 iterations) so
/// that its mean hitting time is within `tolerance` of the policy's, then
/// compares hitting-time variances on the same trajectories. Throws
/// NumericFailure if the means cannot be matched.
VarianceReport variance_report(std::span<const Decision> policy_decisions, std::span<const Trajectory> data,
                               double tolerance = 0.5);

/// One-sided sign test: P(X >= successes) for X ~ Binomial(trials, 1/2).
double sign_test_pvalue(int successes, int trials);

/// Exact backward induction on the Bernoulli lattice. Index [t-1][h] for
/// t = 1..T, h = 0..t.
struct OracleState {
  double posterior_first = 0.0;  // posterior of class 1
  double stopping_risk = 0.0;
  double continuation_risk = 0.0;  // +inf at t = T
  double minimum_risk = 0.0;
  bool stop = true;
  bool tie = false;  // stopping and continuation risks equal up to rounding
  double probability = 0.0;  // marginal probability of reaching h heads at t
};

struct OracleTable {
  double p0 = 0.0, p1 = 0.0;
  int horizon = 0;
  RiskParams params;
  std::vector<std::vector<OracleState>> states;
  double aapr = 0.0;  // exact Bayes risk of the optimal rule

  const OracleState& at(int t, int heads) const {
    return states[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(heads)];
  }
  /// Decision of the optimal rule on a Bernoulli trajectory.
  Decision decide(const Trajectory& traj) const;
};

OracleTable dp_oracle(double p0, double p1, int horizon, const RiskParams& params);

/// Share of lattice states at t = 1..T-1 where the policy's stop/continue
/// choice matches the oracle's, weighting each state by its probability.
/// With `ties_agree`, states where both choices are optimal count as agreeing.
double oracle_agreement(const OracleTable& oracle, const StoppingPolicy& policy, bool ties_agree = true);

/// Exact AAPR of any decision rule on the Bernoulli toy by enumerating all
/// 2^T flip sequences.
double exact_toy_aapr(double p0, double p1, int horizon, const RiskParams& params,
                      const std::function<Decision(const Trajectory&)>& rule);

void write_csv(std::ostream& out, std::span<const EvalReport> reports);
/// Appends an oracle_agreement column when any report carries one.
/// Parses the CSV written by write_csv; throws InvalidInput on schema errors.
std::vector<EvalReport> read_csv(std::istream& in);
std::string reports_to_json(std::span<const EvalReport> reports, int indent = 2);

inline constexpr const char* kCsvHeader = "policy_id,cost,threshold_or_NA,mean_ht,var_ht,aapr,macro_error,seed";

}  // namespace firmbound
