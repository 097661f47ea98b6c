#include "firmbound/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "firmbound/error.hpp"
#include "firmbound/datasets.hpp"
#include "firmbound/parallel.hpp"

namespace firmbound {

namespace {

double mean_of(std::span<const Decision> d) {
  double s = 0.0;
  for (const auto& x : d) s += x.tau;
  return s / static_cast<double>(d.size());
}

double variance_of(std::span<const Decision> d, double mean) {
  double s = 0.0;
  for (const auto& x : d) s += (x.tau - mean) * (x.tau - mean);
  return s / static_cast<double>(d.size());
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace

std::vector<Decision> decide_all(const StoppingPolicy& policy, std::span<const Trajectory> data) {
  std::vector<Decision> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) { out[i] = deploy(policy, data[i]); });
  return out;
}

std::vector<Decision> decide_all(const ThresholdSchedule& schedule, std::span<const Trajectory> data) {
  std::vector<Decision> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) { out[i] = sprt_decide(data[i], schedule); });
  return out;
}

std::vector<Decision> decide_random(std::span<const Trajectory> data, const RiskParams& params, std::uint64_t seed) {
  if (data.empty()) return {};
  const auto stops = random_stops(data.size(), data.front().horizon(), seed);
  std::vector<Decision> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const int tau = std::min(stops[i], data[i].horizon());
    const auto pi = llr_to_posterior(data[i].stats[static_cast<std::size_t>(tau - 1)], params.priors);
    out[i] = {terminal_decision(pi, params), tau, tau == data[i].horizon()};
  });
  return out;
}

EvalReport summarize(std::span<const Trajectory> data, std::span<const Decision> decisions, const RiskParams& params) {
  if (data.empty()) throw InvalidInput("cannot evaluate an empty dataset");
  if (data.size() != decisions.size()) throw InvalidInput("one decision per trajectory is required");
  params.validate();
  const int k = params.num_classes();
  std::vector<double> risk(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& d = decisions[i];
    const auto pi = llr_to_posterior(data[i].stats[static_cast<std::size_t>(d.tau - 1)], params.priors);
    risk[i] = apr(pi, d.decision, params, d.tau);
  });
  std::vector<double> wrong(static_cast<std::size_t>(k), 0.0), total(static_cast<std::size_t>(k), 0.0);
  EvalReport r;
  r.cost = params.cost;
  double risk_sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto y = static_cast<std::size_t>(data[i].label);
    if (data[i].label < 0 || data[i].label >= k) throw InvalidInput("trajectory label out of range");
    total[y] += 1.0;
    if (decisions[i].decision != data[i].label) wrong[y] += 1.0;
    risk_sum += risk[i];
  }
  r.per_class_error.resize(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    const auto cc = static_cast<std::size_t>(c);
    if (total[cc] == 0.0)
      throw InvalidInput("class " + std::to_string(c + 1) + " is absent; its error rate is undefined");
    r.per_class_error[cc] = wrong[cc] / total[cc];
    r.macro_error += r.per_class_error[cc];
  }
  r.macro_error /= k;
  r.aapr = risk_sum / static_cast<double>(data.size());
  r.mean_hitting_time = mean_of(decisions);
  r.hitting_time_variance = variance_of(decisions, r.mean_hitting_time);
  return r;
}

EvalReport evaluate(const StoppingPolicy& policy, std::span<const Trajectory> data, const RiskParams& params) {
  return summarize(data, decide_all(policy, data), params);
}

EvalReport evaluate(const ThresholdSchedule& schedule, std::span<const Trajectory> data, const RiskParams& params) {
  return summarize(data, decide_all(schedule, data), params);
}

EvalReport evaluate(const Candidate& c, std::span<const Trajectory> data) {
  std::vector<Decision> dec;
  if (const auto* p = std::get_if<const StoppingPolicy*>(&c.decider)) {
    dec = decide_all(**p, data);
  } else if (const auto* s = std::get_if<ThresholdSchedule>(&c.decider)) {
    dec = decide_all(*s, data);
  } else {
    dec = decide_random(data, c.params, std::get<RandomStopping>(c.decider).seed);
  }
  EvalReport r = summarize(data, dec, c.params);
  r.policy_id = c.id;
  r.threshold = c.threshold;
  r.seed = c.seed;
  return r;
}

std::vector<EvalReport> sat_sweep(std::span<const Trajectory> data, std::span<const Candidate> candidates) {
  std::vector<EvalReport> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(evaluate(c, data));
  return out;
}

std::vector<EvalReport> aapr_sweep(std::span<const Trajectory> data, std::span<const Candidate> candidates,
                                   std::span<const double> costs) {
  std::vector<EvalReport> out;
  for (double cost : costs) {
    for (Candidate c : candidates) {
      c.params.cost = cost;
      out.push_back(evaluate(c, data));
    }
  }
  return out;
}

std::vector<double> linear_grid(double lo, double hi, int points) {
  if (points < 1) throw InvalidInput("grid needs at least one point");
  if (points == 1) return {lo};
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1);
  return g;
}

std::vector<Candidate> static_candidates(int horizon, const RiskParams& params, std::span<const double> thresholds,
                                         std::uint64_t seed) {
  std::vector<Candidate> out;
  for (double a : thresholds) {
    Candidate c;
    c.id = "static";
    c.decider = ThresholdSchedule::constant(horizon, params.num_classes(), a);
    c.params = params;
    c.threshold = a;
    c.seed = seed;
    out.push_back(std::move(c));
  }
  return out;
}

VarianceReport variance_report(std::span<const Decision> policy_decisions, std::span<const Trajectory> data,
                               double tolerance) {
  if (data.empty() || data.size() != policy_decisions.size())
    throw InvalidInput("variance report needs one policy decision per trajectory");
  VarianceReport r;
  r.policy_mean = mean_of(policy_decisions);
  r.policy_variance = variance_of(policy_decisions, r.policy_mean);
  const int horizon = data.front().horizon();
  const int k = data.front().num_classes();
  auto mean_at = [&](double a, std::vector<Decision>& dec) {
    dec = decide_all(ThresholdSchedule::constant(horizon, k, a), data);
    return mean_of(dec);
  };
  std::vector<Decision> dec;
  double lo = 0.0, hi = 1.0;
  // Thresholds below zero all behave alike for the first crossing; start at 0.
  for (int grow = 0; grow < 60 && mean_at(hi, dec) < r.policy_mean; ++grow) hi *= 2.0;
  double best_gap = std::numeric_limits<double>::infinity();
  std::vector<Decision> best;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double m = mean_at(mid, dec);
    const double gap = std::abs(m - r.policy_mean);
    if (gap < best_gap) {
      best_gap = gap;
      best = dec;
      r.static_threshold = mid;
    }
    if (gap < 1e-9) break;
    (m < r.policy_mean ? lo : hi) = mid;
  }
  if (!(best_gap < tolerance))
    throw NumericFailure("could not match mean hitting time within " + format_number(tolerance) + " (best gap " +
                         format_number(best_gap) + ")");
  r.static_mean = mean_of(best);
  r.static_variance = variance_of(best, r.static_mean);
  return r;
}

double sign_test_pvalue(int successes, int trials) {
  if (trials < 1 || successes < 0 || successes > trials) throw InvalidInput("invalid sign-test counts");
  double p = 0.0;
  for (int s = successes; s <= trials; ++s) {
    p += std::exp(std::lgamma(trials + 1.0) - std::lgamma(s + 1.0) - std::lgamma(trials - s + 1.0) -
                  trials * std::log(2.0));
  }
  return std::min(1.0, p);
}

namespace {

double binomial_log_pmf(int n, int h, double p) {
  return std::lgamma(n + 1.0) - std::lgamma(h + 1.0) - std::lgamma(n - h + 1.0) + h * std::log(p) +
         (n - h) * std::log1p(-p);
}

int heads_from_llr(double p0, double p1, int t, double llr) {
  const double a = std::log(p0 / p1);
  const double b = std::log((1.0 - p0) / (1.0 - p1));
  if (a == b) return 0;
  const double h = (llr - t * b) / (a - b);
  return std::clamp(static_cast<int>(std::lround(h)), 0, t);
}

}  // namespace

OracleTable dp_oracle(double p0, double p1, int horizon, const RiskParams& params) {
  if (!(p0 > 0.0 && p0 <= p1 && p1 < 1.0)) throw InvalidInput("oracle needs 0 < p0 <= p1 < 1");
  if (horizon < 1 || horizon > 12) throw InvalidInput("oracle needs 1 <= T <= 12");
  params.validate();
  if (params.num_classes() != 2) throw InvalidInput("the Bernoulli oracle is binary");
  OracleTable o;
  o.p0 = p0;
  o.p1 = p1;
  o.horizon = horizon;
  o.params = params;
  o.states.resize(static_cast<std::size_t>(horizon));
  const double tie_tol = 1e-9 * *std::max_element(params.penalty.begin(), params.penalty.end());
  for (int t = horizon; t >= 1; --t) {
    auto& row = o.states[static_cast<std::size_t>(t - 1)];
    row.resize(static_cast<std::size_t>(t + 1));
    for (int h = 0; h <= t; ++h) {
      OracleState& s = row[static_cast<std::size_t>(h)];
      const auto pi = bernoulli_posterior(p0, p1, t, h, params.priors);
      s.posterior_first = pi[0];
      s.stopping_risk = stopping_risk(pi, params);
      s.probability = params.priors[0] * std::exp(binomial_log_pmf(t, h, p0)) +
                      params.priors[1] * std::exp(binomial_log_pmf(t, h, p1));
      if (t == horizon) {
        s.continuation_risk = std::numeric_limits<double>::infinity();
        s.minimum_risk = s.stopping_risk;
        s.stop = true;
        continue;
      }
      const double p_head = pi[0] * p0 + pi[1] * p1;
      const auto& next = o.states[static_cast<std::size_t>(t)];
      s.continuation_risk = p_head * next[static_cast<std::size_t>(h + 1)].minimum_risk +
                            (1.0 - p_head) * next[static_cast<std::size_t>(h)].minimum_risk + params.cost;
      s.stop = s.stopping_risk <= s.continuation_risk + tie_tol;
      s.tie = std::abs(s.stopping_risk - s.continuation_risk) <= tie_tol;
      s.minimum_risk = std::min(s.stopping_risk, s.continuation_risk);
    }
  }
  const auto& first = o.states[0];
  o.aapr = first[0].probability * first[0].minimum_risk + first[1].probability * first[1].minimum_risk + params.cost;
  return o;
}

Decision OracleTable::decide(const Trajectory& traj) const {
  if (traj.horizon() != horizon || traj.num_classes() != 2) throw InvalidInput("trajectory does not fit the oracle");
  for (int t = 1; t <= horizon; ++t) {
    const double llr = traj.stats[static_cast<std::size_t>(t - 1)](0, 1);
    const int h = heads_from_llr(p0, p1, t, llr);
    if (at(t, h).stop) {
      const auto pi = bernoulli_posterior(p0, p1, t, h, params.priors);
      return {terminal_decision(pi, params), t, t == horizon};
    }
  }
  throw NumericFailure("unreachable: oracle never stopped");
}

double oracle_agreement(const OracleTable& oracle, const StoppingPolicy& policy, bool ties_agree) {
  if (policy.horizon != oracle.horizon) throw InvalidInput("policy and oracle horizons differ");
  double agree = 0.0, total = 0.0;
  for (int t = 1; t < oracle.horizon; ++t) {
    for (int h = 0; h <= t; ++h) {
      const OracleState& s = oracle.at(t, h);
      const auto llr = LLRMatrix::binary(bernoulli_llr(oracle.p0, oracle.p1, t, h));
      const auto pi = llr_to_posterior(llr, policy.params.priors);
      const bool stop = stopping_risk(pi, policy.params) <= policy.continuation_risk(t, llr);
      total += s.probability;
      if (stop == s.stop || (ties_agree && s.tie)) agree += s.probability;
    }
  }
  return agree / total;
}

double exact_toy_aapr(double p0, double p1, int horizon, const RiskParams& params,
                      const std::function<Decision(const Trajectory&)>& rule) {
  if (horizon < 1 || horizon > 12) throw InvalidInput("exact enumeration needs 1 <= T <= 12");
  params.validate();
  double total = 0.0;
  for (unsigned mask = 0; mask < (1u << horizon); ++mask) {
    Trajectory tr;
    int heads = 0;
    for (int t = 1; t <= horizon; ++t) {
      heads += (mask >> (t - 1)) & 1u;
      tr.stats.push_back(LLRMatrix::binary(bernoulli_llr(p0, p1, t, heads)));
    }
    const double prob = params.priors[0] * std::pow(p0, heads) * std::pow(1.0 - p0, horizon - heads) +
                        params.priors[1] * std::pow(p1, heads) * std::pow(1.0 - p1, horizon - heads);
    const Decision d = rule(tr);
    const auto pi = llr_to_posterior(tr.stats[static_cast<std::size_t>(d.tau - 1)], params.priors);
    total += prob * apr(pi, d.decision, params, d.tau);
  }
  return total;
}

void write_csv(std::ostream& out, std::span<const EvalReport> reports) {
  const bool with_oracle =
      std::any_of(reports.begin(), reports.end(), [](const EvalReport& r) { return r.oracle_agreement.has_value(); });
  out << kCsvHeader << (with_oracle ? ",oracle_agreement" : "") << '\n';
  for (const auto& r : reports) {
    if (r.policy_id.find_first_of(",\n\"") != std::string::npos)
      throw InvalidInput("policy id '" + r.policy_id + "' cannot be written unquoted");
    out << r.policy_id << ',' << format_number(r.cost) << ','
        << (r.threshold ? format_number(*r.threshold) : std::string("NA")) << ',' << format_number(r.mean_hitting_time)
        << ',' << format_number(r.hitting_time_variance) << ',' << format_number(r.aapr) << ','
        << format_number(r.macro_error) << ',' << r.seed;
    if (with_oracle) out << ',' << (r.oracle_agreement ? format_number(*r.oracle_agreement) : std::string("NA"));
    out << '\n';
  }
}

std::vector<EvalReport> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("CSV is empty");
  const bool with_oracle = line == std::string(kCsvHeader) + ",oracle_agreement";
  if (line != kCsvHeader && !with_oracle) throw InvalidInput("CSV header does not match the schema");
  const std::size_t fields = with_oracle ? 9 : 8;
  std::vector<EvalReport> out;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != fields) throw InvalidInput("CSV row " + std::to_string(row) + " has " + std::to_string(f.size()) + " fields");
    auto number = [&](const std::string& text) {
      double v = 0.0;
      const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || end != text.data() + text.size() || text.empty())
        throw InvalidInput("CSV row " + std::to_string(row) + " has a malformed number '" + text + "'");
      return v;
    };
    EvalReport r;
    r.policy_id = f[0];
    r.cost = number(f[1]);
    if (f[2] != "NA") r.threshold = number(f[2]);
    r.mean_hitting_time = number(f[3]);
    r.hitting_time_variance = number(f[4]);
    r.aapr = number(f[5]);
    r.macro_error = number(f[6]);
    const auto [end, ec] = std::from_chars(f[7].data(), f[7].data() + f[7].size(), r.seed);
    if (ec != std::errc() || end != f[7].data() + f[7].size() || f[7].empty())
      throw InvalidInput("CSV row " + std::to_string(row) + " has a malformed seed '" + f[7] + "'");
    if (with_oracle && f[8] != "NA") r.oracle_agreement = number(f[8]);
    out.push_back(std::move(r));
  }
  return out;
}

std::string reports_to_json(std::span<const EvalReport> reports, int indent) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json j;
    j["policy_id"] = r.policy_id;
    j["cost"] = r.cost;
    j["threshold"] = r.threshold ? nlohmann::json(*r.threshold) : nlohmann::json(nullptr);
    j["mean_hitting_time"] = r.mean_hitting_time;
    j["hitting_time_variance"] = r.hitting_time_variance;
    j["aapr"] = r.aapr;
    j["per_class_error"] = r.per_class_error;
    j["macro_error"] = r.macro_error;
    j["seed"] = r.seed;
    if (r.oracle_agreement) j["oracle_agreement"] = *r.oracle_agreement;
    arr.push_back(std::move(j));
  }
  return nlohmann::json{{"reports", arr}}.dump(indent);
}

}  // namespace firmbound
