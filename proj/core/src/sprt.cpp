#include "firmbound/sprt.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "firmbound/error.hpp"
#include "firmbound/rng.hpp"

namespace firmbound {

ThresholdSchedule::ThresholdSchedule(int horizon, int num_classes, std::vector<double> values)
    : t_(horizon), k_(num_classes), v_(std::move(values)) {
  if (horizon < 1 || num_classes < 2) throw InvalidInput("schedule needs T >= 1 and K >= 2");
  if (v_.size() != static_cast<std::size_t>(horizon * num_classes))
    throw InvalidInput("schedule size does not match T*K");
  for (double v : v_) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite threshold");
  }
}

ThresholdSchedule ThresholdSchedule::constant(int horizon, int num_classes, double value) {
  return ThresholdSchedule(horizon, num_classes,
                           std::vector<double>(static_cast<std::size_t>(horizon * num_classes), value));
}

ThresholdSchedule ThresholdSchedule::scaled(double factor) const {
  ThresholdSchedule s = *this;
  for (double& v : s.v_) v *= factor;
  return s;
}

Decision sprt_decide(const Trajectory& traj, const ThresholdSchedule& sched) {
  const int horizon = traj.horizon();
  if (horizon < 1) throw InvalidInput("empty trajectory");
  if (sched.horizon() < horizon)
    throw InvalidInput("schedule horizon " + std::to_string(sched.horizon()) +
                       " shorter than trajectory horizon " + std::to_string(horizon));
  const int k = traj.num_classes();
  if (sched.num_classes() != k) throw InvalidInput("schedule class count mismatch");

  for (int t = 1; t <= horizon; ++t) {
    const LLRMatrix& llr = traj.stats[static_cast<std::size_t>(t - 1)];
    int best = 0;
    double best_gap = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      const double gap = llr.min_row_excluding_diagonal(c) - sched.at(t, c);
      if (gap > best_gap) {
        best_gap = gap;
        best = c;
      }
    }
    if (best_gap >= 0.0) return {best, t, false};
    if (t == horizon) return {best, t, true};
  }
  return {};
}

int terminal_decision(const PosteriorVector& pi, const RiskParams& params) {
  if (params.num_classes() != pi.num_classes()) throw InvalidInput("class count mismatch");
  int best = 0;
  double best_risk = std::numeric_limits<double>::infinity();
  for (int c = 0; c < pi.num_classes(); ++c) {
    const double risk = params.penalty[static_cast<std::size_t>(c)] * (1.0 - pi[c]);
    if (risk < best_risk) {
      best_risk = risk;
      best = c;
    }
  }
  return best;
}

ThresholdSchedule tapering_schedule(double magnitude, int horizon, double kappa, int num_classes) {
  if (!(magnitude >= 0.0)) throw InvalidInput("tapering magnitude must be >= 0");
  if (horizon < 1) throw InvalidInput("horizon must be >= 1");
  const double power = std::exp(kappa);
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(horizon * num_classes));
  for (int t = 1; t <= horizon; ++t) {
    const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(horizon);
    const double f = magnitude * std::pow(frac, power);
    for (int c = 0; c < num_classes; ++c) v.push_back(f);
  }
  return ThresholdSchedule(horizon, num_classes, std::move(v));
}

std::vector<int> random_stops(std::size_t count, int horizon, std::uint64_t seed) {
  if (count < 1) throw InvalidInput("random_stops needs count >= 1");
  if (horizon < 1) throw InvalidInput("horizon must be >= 1");
  Rng rng(seed);
  std::vector<int> out(count);
  for (auto& v : out) v = static_cast<int>(rng.uniform_int(1, horizon));
  return out;
}

}  // namespace firmbound
