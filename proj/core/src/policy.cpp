#include "firmbound/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <json.hpp>

#include "firmbound/error.hpp"
#include "firmbound/parallel.hpp"
#include "firmbound/rng.hpp"

namespace firmbound {

using nlohmann::json;

namespace {

constexpr int kPolicyFormatVersion = 1;

// Rounds to 40 mantissa bits so that (L, c) and (aL, ac) normalize to the
// same numbers even when the divisions differ in the last ulp.
double quantize(double v) {
  if (v == 0.0 || !std::isfinite(v)) return v;
  int e = 0;
  const double m = std::frexp(v, &e);
  return std::ldexp(std::nearbyint(std::ldexp(m, 40)), e - 40);
}

RiskParams normalized_params(const RiskParams& p, double scale) {
  RiskParams out = p;
  for (double& l : out.penalty) l = quantize(l / scale);
  out.cost = quantize(p.cost / scale);
  return out;
}

double model_predict(const StepModel& m, std::span<const double> x) {
  return std::visit([&](const auto& model) {
    if constexpr (std::is_same_v<std::decay_t<decltype(model)>, GPModel>) {
      return model.predict_mean(x);
    } else {
      return model.predict(x);
    }
  }, m);
}

void check_dataset(std::span<const Trajectory> data, int num_classes) {
  if (data.size() < 2) throw InvalidInput("backward induction needs at least two trajectories");
  const int horizon = data.front().horizon();
  for (const auto& tr : data) {
    tr.validate();
    if (tr.horizon() != horizon) throw InvalidInput("trajectories have different horizons");
    if (tr.num_classes() != num_classes) throw InvalidInput("trajectory class count does not match risk params");
  }
  if (horizon < 2) throw InvalidInput("backward induction needs a horizon of at least 2");
}

// Posterior and features for every (trajectory, step), computed once.
struct StateCache {
  std::vector<std::vector<PosteriorVector>> posterior;      // [m][t-1]
  std::vector<std::vector<std::vector<double>>> features;   // [m][t-1]
};

StateCache cache_states(std::span<const Trajectory> data, std::span<const double> priors, StatisticKind kind) {
  StateCache c;
  c.posterior.resize(data.size());
  c.features.resize(data.size());
  parallel_for(data.size(), [&](std::size_t m) {
    const auto& tr = data[m];
    c.posterior[m].reserve(static_cast<std::size_t>(tr.horizon()));
    c.features[m].reserve(static_cast<std::size_t>(tr.horizon()));
    for (const auto& llr : tr.stats) {
      c.posterior[m].push_back(llr_to_posterior(llr, priors));
      c.features[m].push_back(state_features(llr, priors, kind));
    }
  });
  return c;
}

LabelSet labels_from_cache(const StateCache& c, std::span<const std::size_t> rows, const ContinuationFn& next,
                           const RiskParams& params, int t) {
  const std::size_t n = rows.size();
  const auto d = static_cast<Eigen::Index>(c.features[rows[0]][0].size());
  LabelSet out;
  out.features.resize(static_cast<Eigen::Index>(n), d);
  out.targets.resize(static_cast<Eigen::Index>(n));
  const auto ti = static_cast<std::size_t>(t - 1);
  parallel_for(n, [&](std::size_t i) {
    const std::size_t m = rows[i];
    const auto& f = c.features[m][ti];
    for (Eigen::Index l = 0; l < d; ++l) out.features(static_cast<Eigen::Index>(i), l) = f[static_cast<std::size_t>(l)];
    double target = stopping_risk(c.posterior[m][ti + 1], params);
    if (next) target = std::min(target, next(c.features[m][ti + 1]));
    out.targets(static_cast<Eigen::Index>(i)) = target;
  });
  return out;
}

template <typename E>
[[noreturn]] void rethrow_with_step(const E& e, int t) {
  throw E("backward induction step t=" + std::to_string(t) + ": " + e.what());
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(std::move(r));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows == 0 ? 0 : static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != cols)
      throw InvalidInput("ragged matrix in policy document");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  return m;
}

json vector_to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

std::string to_string(StatisticKind kind) { return kind == StatisticKind::posterior ? "posterior" : "llr"; }
std::string to_string(RegressorKind kind) { return kind == RegressorKind::cfl ? "cfl" : "gp"; }

StatisticKind statistic_kind_from_string(std::string_view name) {
  if (name == "posterior") return StatisticKind::posterior;
  if (name == "llr") return StatisticKind::llr;
  throw InvalidInput("unknown statistic kind '" + std::string(name) + "'");
}

RegressorKind regressor_kind_from_string(std::string_view name) {
  if (name == "cfl") return RegressorKind::cfl;
  if (name == "gp") return RegressorKind::gp;
  throw InvalidInput("unknown regressor '" + std::string(name) + "'");
}

double stopping_risk(const PosteriorVector& pi, const RiskParams& params) {
  if (pi.num_classes() != params.num_classes()) throw InvalidInput("posterior and risk params disagree on K");
  double best = params.penalty[0] * (1.0 - pi[0]);
  for (int k = 1; k < pi.num_classes(); ++k)
    best = std::min(best, params.penalty[static_cast<std::size_t>(k)] * (1.0 - pi[k]));
  return best;
}

std::vector<double> state_features(const LLRMatrix& llr, std::span<const double> priors, StatisticKind kind) {
  if (kind == StatisticKind::posterior) {
    const auto pi = llr_to_posterior(llr, priors);
    return {pi.probs().begin(), pi.probs().end()};
  }
  const int k = llr.num_classes();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(k * (k - 1) / 2));
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b) out.push_back(llr(a, b));
  return out;
}

LabelSet build_labels(std::span<const Trajectory> data, const ContinuationFn& next, const RiskParams& params, int t,
                      StatisticKind kind) {
  params.validate();
  check_dataset(data, params.num_classes());
  const int horizon = data.front().horizon();
  if (t < 1 || t > horizon - 1) throw InvalidInput("label step must lie in [1, T-1]");
  if (t == horizon - 1 && next) throw InvalidInput("no continuation model exists beyond the horizon");
  const StateCache cache = cache_states(data, params.priors, kind);
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return labels_from_cache(cache, rows, next, params, t);
}

double StoppingPolicy::continuation_risk(int t, const LLRMatrix& llr) const {
  if (t < 1 || t > horizon - 1) throw InvalidInput("continuation risk is defined for t in [1, T-1]");
  const RiskParams np = normalized_params(params, risk_scale);
  const auto f = state_features(llr, params.priors, statistic);
  return (model_predict(steps[static_cast<std::size_t>(t - 1)], f) + np.cost) * risk_scale;
}

StoppingPolicy fit_policy(std::span<const Trajectory> data, const RiskParams& params, const PolicyConfig& cfg) {
  params.validate();
  check_dataset(data, params.num_classes());
  if (cfg.regressor == RegressorKind::cfl && cfg.statistic == StatisticKind::llr)
    throw InvalidInput("CFL requires posterior features; the continuation risk is concave only in posterior space");
  const double scale = *std::max_element(params.penalty.begin(), params.penalty.end());
  if (!(scale > 0.0)) throw InvalidInput("at least one penalty must be positive");

  StoppingPolicy policy;
  policy.params = params;
  policy.statistic = cfg.statistic;
  policy.regressor = cfg.regressor;
  policy.horizon = data.front().horizon();
  policy.risk_scale = scale;
  policy.steps.resize(static_cast<std::size_t>(policy.horizon - 1));
  policy.step_train_mse.assign(static_cast<std::size_t>(policy.horizon - 1), 0.0);
  const RiskParams np = normalized_params(params, scale);

  const StateCache cache = cache_states(data, params.priors, cfg.statistic);
  const std::size_t m_total = data.size();

  for (int t = policy.horizon - 1; t >= 1; --t) {
    std::vector<std::size_t> rows(m_total);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    if (cfg.regressor == RegressorKind::cfl && static_cast<int>(m_total) > cfg.cfl_max_samples) {
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t)));
      for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.cfl_max_samples); ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                                static_cast<std::int64_t>(m_total - 1)));
        std::swap(rows[i], rows[j]);
      }
      rows.resize(static_cast<std::size_t>(cfg.cfl_max_samples));
    }

    ContinuationFn next;
    if (t < policy.horizon - 1) {
      const StepModel& model = policy.steps[static_cast<std::size_t>(t)];
      next = [&model, &np](std::span<const double> x) { return model_predict(model, x) + np.cost; };
    }
    const LabelSet labels = labels_from_cache(cache, rows, next, np, t);

    try {
      if (cfg.regressor == RegressorKind::cfl) {
        AdmmConfig admm = cfg.admm;
        admm.seed = derive_seed(cfg.seed ^ 0xC0FFEEULL, static_cast<std::uint64_t>(t));
        if (cfg.tune_reg) admm.reg = tune_reg(labels.features, labels.targets, cfg.reg_grid, admm.seed);
        policy.steps[static_cast<std::size_t>(t - 1)] = fit_concave(labels.features, labels.targets, admm);
      } else {
        GpConfig gp = cfg.gp;
        gp.seed = derive_seed(cfg.seed ^ 0x6A09E667ULL, static_cast<std::uint64_t>(t));
        gp.n_inducing = std::min<int>(gp.n_inducing, static_cast<int>(labels.targets.size()));
        policy.steps[static_cast<std::size_t>(t - 1)] = fit_gp(labels.features, labels.targets, gp);
      }
    } catch (const NumericFailure& e) {
      rethrow_with_step(e, t);
    } catch (const InvalidInput& e) {
      rethrow_with_step(e, t);
    }

    const StepModel& fitted = policy.steps[static_cast<std::size_t>(t - 1)];
    std::vector<double> sq(rows.size());
    parallel_for(rows.size(), [&](std::size_t i) {
      const auto ii = static_cast<Eigen::Index>(i);
      std::vector<double> x(static_cast<std::size_t>(labels.features.cols()));
      for (Eigen::Index l = 0; l < labels.features.cols(); ++l) x[static_cast<std::size_t>(l)] = labels.features(ii, l);
      const double r = model_predict(fitted, x) - labels.targets(ii);
      sq[i] = r * r;
    });
    policy.step_train_mse[static_cast<std::size_t>(t - 1)] =
        std::accumulate(sq.begin(), sq.end(), 0.0) / static_cast<double>(sq.size());
  }
  return policy;
}

Decision deploy(const StoppingPolicy& policy, const Trajectory& traj) {
  if (traj.horizon() != policy.horizon)
    throw InvalidInput("trajectory horizon " + std::to_string(traj.horizon()) + " does not match policy horizon " +
                       std::to_string(policy.horizon));
  if (traj.num_classes() != policy.num_classes()) throw InvalidInput("trajectory class count does not match policy");
  const RiskParams np = normalized_params(policy.params, policy.risk_scale);
  for (int t = 1; t <= policy.horizon; ++t) {
    const LLRMatrix& llr = traj.stats[static_cast<std::size_t>(t - 1)];
    const auto pi = llr_to_posterior(llr, policy.params.priors);
    if (t == policy.horizon) return {terminal_decision(pi, np), t, true};
    const double g_stop = stopping_risk(pi, np);
    const auto f = state_features(llr, policy.params.priors, policy.statistic);
    const double g_cont = model_predict(policy.steps[static_cast<std::size_t>(t - 1)], f) + np.cost;
    if (g_stop <= g_cont) return {terminal_decision(pi, np), t, false};
  }
  throw NumericFailure("unreachable: deploy loop ended without a decision");
}

std::string policy_to_json(const StoppingPolicy& policy, int indent) {
  json doc;
  doc["format"] = "firmbound-policy";
  doc["version"] = kPolicyFormatVersion;
  doc["params"] = {{"penalty", policy.params.penalty}, {"cost", policy.params.cost}, {"priors", policy.params.priors}};
  doc["statistic"] = to_string(policy.statistic);
  doc["regressor"] = to_string(policy.regressor);
  doc["horizon"] = policy.horizon;
  doc["risk_scale"] = policy.risk_scale;
  doc["step_train_mse"] = policy.step_train_mse;
  json steps = json::array();
  for (std::size_t i = 0; i < policy.steps.size(); ++i) {
    json s;
    s["t"] = i + 1;
    if (const auto* pl = std::get_if<PiecewiseLinearModel>(&policy.steps[i])) {
      s["type"] = "cfl";
      s["curvature"] = pl->curvature == Curvature::convex ? "convex" : "concave";
      s["anchors"] = matrix_to_json(pl->anchors);
      s["slopes"] = matrix_to_json(pl->slopes);
      s["offsets"] = vector_to_json(pl->offsets);
      s["x_center"] = vector_to_json(pl->x_center);
      s["x_scale"] = vector_to_json(pl->x_scale);
      s["y_center"] = pl->y_center;
      s["y_scale"] = pl->y_scale;
    } else {
      const auto& gp = std::get<GPModel>(policy.steps[i]);
      s["type"] = "gp";
      s["inducing"] = matrix_to_json(gp.inducing);
      s["mean"] = vector_to_json(gp.mean);
      s["weights"] = vector_to_json(gp.weights);
      s["signal_variance"] = gp.signal_variance;
      s["lengthscale"] = gp.lengthscale;
      s["noise_variance"] = gp.noise_variance;
      s["prior_mean"] = gp.prior_mean;
      s["jitter"] = gp.jitter;
    }
    steps.push_back(std::move(s));
  }
  doc["steps"] = std::move(steps);
  return doc.dump(indent);
}

StoppingPolicy policy_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("policy document is not valid JSON: ") + e.what());
  }
  try {
    if (doc.at("format") != "firmbound-policy") throw InvalidInput("not a policy document");
    if (doc.at("version").get<int>() != kPolicyFormatVersion)
      throw InvalidInput("unsupported policy format version " + doc.at("version").dump());
    StoppingPolicy p;
    p.params.penalty = doc.at("params").at("penalty").get<std::vector<double>>();
    p.params.cost = doc.at("params").at("cost").get<double>();
    p.params.priors = doc.at("params").at("priors").get<std::vector<double>>();
    p.params.validate();
    p.statistic = statistic_kind_from_string(doc.at("statistic").get<std::string>());
    p.regressor = regressor_kind_from_string(doc.at("regressor").get<std::string>());
    p.horizon = doc.at("horizon").get<int>();
    p.risk_scale = doc.at("risk_scale").get<double>();
    p.step_train_mse = doc.at("step_train_mse").get<std::vector<double>>();
    for (const auto& s : doc.at("steps")) {
      if (s.at("type") == "cfl") {
        PiecewiseLinearModel m;
        m.curvature = s.at("curvature") == "convex" ? Curvature::convex : Curvature::concave;
        m.anchors = matrix_from_json(s.at("anchors"));
        m.slopes = matrix_from_json(s.at("slopes"));
        m.offsets = vector_from_json(s.at("offsets"));
        m.x_center = vector_from_json(s.at("x_center"));
        m.x_scale = vector_from_json(s.at("x_scale"));
        m.y_center = s.at("y_center").get<double>();
        m.y_scale = s.at("y_scale").get<double>();
        p.steps.emplace_back(std::move(m));
      } else if (s.at("type") == "gp") {
        GPModel m;
        m.inducing = matrix_from_json(s.at("inducing"));
        m.mean = vector_from_json(s.at("mean"));
        m.weights = vector_from_json(s.at("weights"));
        m.signal_variance = s.at("signal_variance").get<double>();
        m.lengthscale = s.at("lengthscale").get<double>();
        m.noise_variance = s.at("noise_variance").get<double>();
        m.prior_mean = s.at("prior_mean").get<double>();
        m.jitter = s.at("jitter").get<double>();
        p.steps.emplace_back(std::move(m));
      } else {
        throw InvalidInput("unknown step model type " + s.at("type").dump());
      }
    }
    if (p.horizon < 2 || static_cast<int>(p.steps.size()) != p.horizon - 1)
      throw InvalidInput("policy must hold exactly T-1 step models");
    return p;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed policy document: ") + e.what());
  }
}

}  // namespace firmbound
