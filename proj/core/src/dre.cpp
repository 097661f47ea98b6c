#include "firmbound/dre.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <json.hpp>

#include "firmbound/error.hpp"
#include "firmbound/parallel.hpp"
#include "firmbound/rng.hpp"

namespace firmbound {

namespace {

Eigen::VectorXd log_softmax(const Eigen::VectorXd& z) {
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return (z.array() - lse).matrix();
}

Eigen::VectorXd window_input(const Eigen::MatrixXd& x, int w, int end) {
  const auto d = x.cols();
  Eigen::VectorXd v(w * d + 1);
  for (int r = 0; r < w; ++r) v.segment(r * d, d) = x.row(end - w + 1 + r).transpose();
  v(w * d) = 1.0;
  return v;
}

Eigen::VectorXd log_priors(const DREModel& m) {
  Eigen::VectorXd lp(m.num_classes);
  for (int k = 0; k < m.num_classes; ++k) lp(k) = std::log(m.priors[static_cast<std::size_t>(k)]);
  return lp;
}

void check_data(const DREModel& model, std::span<const FeatureSequence> data) {
  if (data.empty()) throw InvalidInput("DRE dataset is empty");
  const int horizon = data.front().horizon();
  if (horizon < model.order + 1) throw InvalidInput("sequences are shorter than the window length N+1");
  std::vector<int> counts(static_cast<std::size_t>(model.num_classes), 0);
  for (const auto& s : data) {
    if (s.horizon() != horizon) throw InvalidInput("DRE sequences have different lengths");
    if (s.dim() != model.dim) throw InvalidInput("DRE feature dimension does not match the model");
    if (s.label < 0 || s.label >= model.num_classes) throw InvalidInput("DRE label out of range");
    if (!s.x.allFinite()) throw InvalidInput("non-finite DRE features");
    ++counts[static_cast<std::size_t>(s.label)];
  }
  for (int k = 0; k < model.num_classes; ++k)
    if (counts[static_cast<std::size_t>(k)] == 0)
      throw InvalidInput("class " + std::to_string(k + 1) + " is absent from the DRE dataset");
}

// Per-step score vectors S(t) with lambda_kl(t) = S_k(t) - S_l(t).
std::vector<Eigen::VectorXd> step_scores(const DREModel& m, const Eigen::MatrixXd& x) {
  const int n = m.order;
  const int horizon = static_cast<int>(x.rows());
  const Eigen::VectorXd lp = log_priors(m);
  std::vector<Eigen::VectorXd> out(static_cast<std::size_t>(horizon));
  Eigen::VectorXd acc = -lp;
  for (int t = 1; t <= horizon; ++t) {
    if (t <= n) {
      out[static_cast<std::size_t>(t - 1)] = log_softmax(m.logits(t, x, t - 1)) - lp;
      continue;
    }
    acc += log_softmax(m.logits(n + 1, x, t - 1));
    if (t >= n + 2) acc -= n == 0 ? lp : log_softmax(m.logits(n, x, t - 2));
    out[static_cast<std::size_t>(t - 1)] = acc;
  }
  return out;
}

struct SequenceTerms {
  double loss = 0.0;
  std::vector<Eigen::MatrixXd> grad;
};

SequenceTerms sequence_terms(const DREModel& m, const FeatureSequence& seq, double mce_scale, double lsel_scale,
                             bool want_grad) {
  const int n = m.order;
  const int horizon = seq.horizon();
  const int y = seq.label;
  SequenceTerms out;
  if (want_grad) {
    out.grad.resize(m.weights.size());
    for (std::size_t w = 0; w < m.weights.size(); ++w) out.grad[w] = Eigen::MatrixXd::Zero(m.weights[w].rows(), m.weights[w].cols());
  }
  auto add_grad = [&](int w, int end, const Eigen::VectorXd& coef) {
    out.grad[static_cast<std::size_t>(w - 1)].noalias() += coef * window_input(seq.x, w, end).transpose();
  };

  if (mce_scale != 0.0) {
    for (int w = 1; w <= n + 1; ++w) {
      for (int e = w - 1; e <= horizon - 1 - (n + 1 - w); ++e) {
        const Eigen::VectorXd ls = log_softmax(m.logits(w, seq.x, e));
        out.loss -= mce_scale * ls(y);
        if (want_grad) {
          Eigen::VectorXd g = ls.array().exp().matrix();
          g(y) -= 1.0;
          add_grad(w, e, mce_scale * g);
        }
      }
    }
  }

  if (lsel_scale != 0.0) {
    const auto scores = step_scores(m, seq.x);
    std::vector<Eigen::VectorXd> g(static_cast<std::size_t>(horizon));
    for (int t = 1; t <= horizon; ++t) {
      const Eigen::VectorXd ls = log_softmax(scores[static_cast<std::size_t>(t - 1)]);
      out.loss -= lsel_scale * ls(y);
      Eigen::VectorXd gt = ls.array().exp().matrix();
      gt(y) -= 1.0;
      g[static_cast<std::size_t>(t - 1)] = lsel_scale * gt;
    }
    if (want_grad) {
      // Each window's logits enter S(t) through a log-softmax with
      // coefficient +-1, and the LSEL gradient in S sums to zero, so the
      // logit gradient of a window is +-(sum of dS over the steps using it).
      Eigen::VectorXd suffix = Eigen::VectorXd::Zero(m.num_classes);
      for (int s = horizon; s >= 1; --s) {
        if (s <= n) {
          add_grad(s, s - 1, g[static_cast<std::size_t>(s - 1)]);
          continue;
        }
        suffix += g[static_cast<std::size_t>(s - 1)];
        add_grad(n + 1, s - 1, suffix);
        if (s >= n + 2 && n >= 1) add_grad(n, s - 2, -suffix);
      }
    }
  }
  return out;
}

DreLossGradient evaluate(const DREModel& m, std::span<const FeatureSequence> data, double mce_w, double lsel_w,
                         bool want_grad) {
  check_data(m, data);
  const int horizon = data.front().horizon();
  std::vector<int> counts(static_cast<std::size_t>(m.num_classes), 0);
  for (const auto& s : data) ++counts[static_cast<std::size_t>(s.label)];
  const double mce_base = mce_w / (static_cast<double>(data.size()) * static_cast<double>(horizon - m.order));
  std::vector<SequenceTerms> terms(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const double lsel_scale = lsel_w / (static_cast<double>(m.num_classes) * static_cast<double>(horizon) *
                                        static_cast<double>(counts[static_cast<std::size_t>(data[i].label)]));
    terms[i] = sequence_terms(m, data[i], mce_base, lsel_scale, want_grad);
  });
  DreLossGradient out;
  if (want_grad) {
    out.weights.resize(m.weights.size());
    for (std::size_t w = 0; w < m.weights.size(); ++w) out.weights[w] = Eigen::MatrixXd::Zero(m.weights[w].rows(), m.weights[w].cols());
  }
  for (const auto& t : terms) {
    out.loss += t.loss;
    if (want_grad)
      for (std::size_t w = 0; w < m.weights.size(); ++w) out.weights[w] += t.grad[w];
  }
  return out;
}

}  // namespace

DREModel DREModel::zeros(int num_classes, int dim, int order, std::vector<double> priors) {
  if (num_classes < 2) throw InvalidInput("DRE needs at least two classes");
  if (dim < 1 || order < 0) throw InvalidInput("invalid DRE dimensions");
  if (static_cast<int>(priors.size()) != num_classes) throw InvalidInput("DRE priors have the wrong length");
  for (double p : priors)
    if (!(p > 0.0)) throw InvalidInput("DRE priors must be strictly positive");
  DREModel m;
  m.order = order;
  m.dim = dim;
  m.num_classes = num_classes;
  m.priors = std::move(priors);
  for (int w = 1; w <= order + 1; ++w) m.weights.push_back(Eigen::MatrixXd::Zero(num_classes, w * dim + 1));
  return m;
}

Eigen::VectorXd DREModel::logits(int w, const Eigen::MatrixXd& x, int end) const {
  if (w < 1 || w > order + 1) throw InvalidInput("window length out of range");
  if (end - w + 1 < 0 || end >= x.rows()) throw InvalidInput("window exceeds the sequence");
  return weights[static_cast<std::size_t>(w - 1)] * window_input(x, w, end);
}

PosteriorVector DREModel::window_posterior(int w, const Eigen::MatrixXd& x, int end) const {
  const Eigen::VectorXd p = log_softmax(logits(w, x, end)).array().exp().matrix();
  std::vector<double> v(p.data(), p.data() + p.size());
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (double& e : v) e /= s;
  return PosteriorVector(std::move(v));
}

LLRMatrix tandem_llr(std::span<const PosteriorVector> long_windows, std::span<const PosteriorVector> short_windows,
                     std::span<const double> priors, int order) {
  if (order < 0) throw InvalidInput("Markov order must be >= 0");
  if (long_windows.empty()) throw InvalidInput("the decomposition needs t >= N+1");
  const std::size_t expected_short = order == 0 ? 0 : long_windows.size() - 1;
  if (short_windows.size() != expected_short)
    throw InvalidInput("expected " + std::to_string(expected_short) + " short-window posteriors");
  const int k = long_windows.front().num_classes();
  if (static_cast<int>(priors.size()) != k) throw InvalidInput("priors have the wrong length");
  std::vector<double> scores(static_cast<std::size_t>(k), 0.0);
  auto add_log = [&](const PosteriorVector& p, double sign) {
    if (p.num_classes() != k) throw InvalidInput("window posteriors disagree on K");
    for (int c = 0; c < k; ++c) {
      if (!(p[c] > 0.0)) throw DegeneratePosterior("window posterior has a zero entry");
      scores[static_cast<std::size_t>(c)] += sign * std::log(p[c]);
    }
  };
  for (const auto& p : long_windows) add_log(p, 1.0);
  for (const auto& p : short_windows) add_log(p, -1.0);
  const double n_prior = order == 0 ? static_cast<double>(long_windows.size()) : 1.0;
  for (int c = 0; c < k; ++c) {
    const double p = priors[static_cast<std::size_t>(c)];
    if (!(p > 0.0)) throw InvalidInput("priors must be strictly positive");
    scores[static_cast<std::size_t>(c)] -= n_prior * std::log(p);
  }
  return LLRMatrix::from_scores(scores);
}

LLRMatrix tandem_update(const LLRMatrix& previous, const PosteriorVector& newest_long,
                        const PosteriorVector& newest_short) {
  const int k = previous.num_classes();
  if (newest_long.num_classes() != k || newest_short.num_classes() != k)
    throw InvalidInput("window posteriors disagree on K");
  std::vector<double> scores(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    if (!(newest_long[c] > 0.0) || !(newest_short[c] > 0.0))
      throw DegeneratePosterior("window posterior has a zero entry");
    scores[static_cast<std::size_t>(c)] = std::log(newest_long[c]) - std::log(newest_short[c]);
  }
  return previous + LLRMatrix::from_scores(scores);
}

Trajectory estimate_llr_trajectory(const DREModel& model, const FeatureSequence& seq) {
  if (seq.dim() != model.dim) throw InvalidInput("DRE feature dimension does not match the model");
  if (seq.horizon() < 1) throw InvalidInput("empty feature sequence");
  Trajectory tr;
  tr.label = seq.label;
  for (const auto& s : step_scores(model, seq.x)) {
    std::vector<double> v(s.data(), s.data() + s.size());
    for (double& e : v) e = std::clamp(e, -kLlrClamp, kLlrClamp);
    tr.stats.push_back(LLRMatrix::from_scores(v));
  }
  return tr;
}

double lsel_loss(const DREModel& model, std::span<const FeatureSequence> data) {
  return evaluate(model, data, 0.0, 1.0, false).loss;
}

double mce_loss(const DREModel& model, std::span<const FeatureSequence> data) {
  return evaluate(model, data, 1.0, 0.0, false).loss;
}

DreLossGradient dre_loss_gradient(const DREModel& model, std::span<const FeatureSequence> data, double mce_weight,
                                  double lsel_weight) {
  return evaluate(model, data, mce_weight, lsel_weight, true);
}

DREModel train_dre(std::span<const FeatureSequence> data, const DreConfig& cfg, std::vector<double>* loss_history) {
  if (data.empty()) throw InvalidInput("DRE dataset is empty");
  if (cfg.epochs < 0 || !(cfg.learning_rate > 0.0) || cfg.batch < 0) throw InvalidInput("invalid DRE optimizer settings");
  const int dim = data.front().dim();
  if (dim > kMaxDreFeatureDim)
    throw InvalidInput("DRE supports feature dimension <= " + std::to_string(kMaxDreFeatureDim) + ", got " +
                       std::to_string(dim));
  int num_classes = 0;
  for (const auto& s : data) num_classes = std::max(num_classes, s.label + 1);
  num_classes = std::max(num_classes, 2);
  std::vector<double> priors(static_cast<std::size_t>(num_classes), 0.0);
  for (const auto& s : data) {
    if (s.label < 0) throw InvalidInput("DRE label out of range");
    priors[static_cast<std::size_t>(s.label)] += 1.0;
  }
  for (int k = 0; k < num_classes; ++k)
    if (priors[static_cast<std::size_t>(k)] == 0.0)
      throw InvalidInput("class " + std::to_string(k + 1) + " is absent from the DRE dataset");
  for (double& p : priors) p /= static_cast<double>(data.size());

  DREModel model = DREModel::zeros(num_classes, dim, cfg.order, priors);
  check_data(model, data);
  if (loss_history) loss_history->clear();

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<FeatureSequence> batch;

  // Adam: the LSEL gradient grows with the horizon, so per-coordinate step
  // normalization keeps one learning rate usable across sequence lengths.
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::vector<Eigen::MatrixXd> m1, m2;
  for (const auto& w : model.weights) {
    m1.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
    m2.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  }
  long updates = 0;
  auto step = [&](const DreLossGradient& g, int epoch) {
    if (!std::isfinite(g.loss)) throw NumericFailure("DRE training diverged at epoch " + std::to_string(epoch));
    ++updates;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(updates));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(updates));
    for (std::size_t w = 0; w < model.weights.size(); ++w) {
      m1[w] = kBeta1 * m1[w] + (1.0 - kBeta1) * g.weights[w];
      m2[w] = kBeta2 * m2[w] + (1.0 - kBeta2) * g.weights[w].cwiseAbs2();
      model.weights[w].array() -=
          cfg.learning_rate * (m1[w].array() / c1) / ((m2[w].array() / c2).sqrt() + kEps);
    }
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.batch == 0 || cfg.batch >= static_cast<int>(data.size())) {
      const auto g = dre_loss_gradient(model, data, cfg.mce_weight, cfg.lsel_weight);
      if (loss_history) loss_history->push_back(g.loss);
      step(g, epoch);
      continue;
    }
    if (loss_history) loss_history->push_back(evaluate(model, data, cfg.mce_weight, cfg.lsel_weight, false).loss);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch)); ++i)
        batch.push_back(data[order[i]]);
      // A minibatch may miss a class; its gradient is then taken over the
      // classes present by evaluating on the full set instead.
      try {
        step(dre_loss_gradient(model, batch, cfg.mce_weight, cfg.lsel_weight), epoch);
      } catch (const InvalidInput&) {
        step(dre_loss_gradient(model, data, cfg.mce_weight, cfg.lsel_weight), epoch);
      }
    }
  }
  if (loss_history) {
    const double final_loss = evaluate(model, data, cfg.mce_weight, cfg.lsel_weight, false).loss;
    if (!std::isfinite(final_loss)) throw NumericFailure("DRE training diverged at epoch " + std::to_string(cfg.epochs));
    loss_history->push_back(final_loss);
  }
  return model;
}

std::string dre_to_json(const DREModel& model, int indent) {
  nlohmann::json doc;
  doc["format"] = "firmbound-dre";
  doc["version"] = 1;
  doc["order"] = model.order;
  doc["dim"] = model.dim;
  doc["num_classes"] = model.num_classes;
  doc["priors"] = model.priors;
  nlohmann::json ws = nlohmann::json::array();
  for (const auto& w : model.weights) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(w.cols()));
      for (Eigen::Index c = 0; c < w.cols(); ++c) row[static_cast<std::size_t>(c)] = w(r, c);
      rows.push_back(row);
    }
    ws.push_back(rows);
  }
  doc["weights"] = ws;
  return doc.dump(indent);
}

DREModel dre_from_json(std::string_view text) {
  try {
    const auto doc = nlohmann::json::parse(text);
    if (doc.at("format") != "firmbound-dre") throw InvalidInput("not a DRE model document");
    if (doc.at("version").get<int>() != 1) throw InvalidInput("unsupported DRE model version");
    DREModel m = DREModel::zeros(doc.at("num_classes").get<int>(), doc.at("dim").get<int>(), doc.at("order").get<int>(),
                                 doc.at("priors").get<std::vector<double>>());
    const auto& ws = doc.at("weights");
    if (ws.size() != m.weights.size()) throw InvalidInput("DRE model has the wrong number of window weights");
    for (std::size_t w = 0; w < m.weights.size(); ++w) {
      auto& mat = m.weights[w];
      if (ws[w].size() != static_cast<std::size_t>(mat.rows())) throw InvalidInput("DRE weight shape mismatch");
      for (Eigen::Index r = 0; r < mat.rows(); ++r) {
        const auto row = ws[w][static_cast<std::size_t>(r)].get<std::vector<double>>();
        if (row.size() != static_cast<std::size_t>(mat.cols())) throw InvalidInput("DRE weight shape mismatch");
        for (Eigen::Index c = 0; c < mat.cols(); ++c) mat(r, c) = row[static_cast<std::size_t>(c)];
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed DRE model document: ") + e.what());
  }
}

}  // namespace firmbound
