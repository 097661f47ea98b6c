#pragma once

#include <cstdint>
#include <vector>

#include "firmbound/stats.hpp"

namespace firmbound {

/// T x K matrix of LLR thresholds a_k^(t) in nats.
class ThresholdSchedule {
 public:
  ThresholdSchedule() = default;
  ThresholdSchedule(int horizon, int num_classes, std::vector<double> values);
  /// Same threshold for every class and time step.
  static ThresholdSchedule constant(int horizon, int num_classes, double value);

  int horizon() const noexcept { return t_; }
  int num_classes() const noexcept { return k_; }
  /// t is 1-based, k 0-based.
  double at(int t, int k) const noexcept { return v_[static_cast<std::size_t>((t - 1) * k_ + k)]; }
  ThresholdSchedule scaled(double factor) const;

 private:
  int t_ = 0;
  int k_ = 0;
  std::vector<double> v_;
};

struct Decision {
  int decision = 0;     // 0-based class
  int tau = 1;          // 1-based stopping time
  bool forced = false;  // the horizon forced the stop

  bool operator==(const Decision&) const = default;
};

/// Multiclass SPRT: stop at the first t where
/// max_k [min_{l != k} lambda_kl(t) - a_k(t)] >= 0 and pick the argmax class.
/// If no crossing happens the stop is forced at the trajectory's horizon.
/// Ties go to the lowest class index.
Decision sprt_decide(const Trajectory& traj, const ThresholdSchedule& sched);

/// argmin_k L_k (1 - pi_k), lowest index on ties.
int terminal_decision(const PosteriorVector& pi, const RiskParams& params);

/// Tapering threshold f(t) = A (1 - t/T)^{exp(kappa)} for t = 1..T, same
/// value for all classes.
ThresholdSchedule tapering_schedule(double magnitude, int horizon, double kappa, int num_classes = 2);

/// `count` stopping times drawn uniformly from [1, horizon].
std::vector<int> random_stops(std::size_t count, int horizon, std::uint64_t seed);

}  // namespace firmbound
