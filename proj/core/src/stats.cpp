#include "firmbound/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "firmbound/error.hpp"

namespace firmbound {

namespace {

void check_priors(std::span<const double> priors, int k) {
  if (static_cast<int>(priors.size()) != k)
    throw InvalidInput("priors have length " + std::to_string(priors.size()) + ", expected " +
                       std::to_string(k));
  for (double p : priors) {
    if (!(p > 0.0) || !std::isfinite(p)) throw InvalidInput("priors must be strictly positive");
  }
}

}  // namespace

LLRMatrix LLRMatrix::zeros(int num_classes) {
  if (num_classes < 2) throw InvalidInput("need at least two classes");
  LLRMatrix m;
  m.k_ = num_classes;
  m.e_.assign(static_cast<std::size_t>(num_classes * num_classes), 0.0);
  return m;
}

LLRMatrix LLRMatrix::from_entries(int num_classes, std::vector<double> entries) {
  if (num_classes < 2) throw InvalidInput("need at least two classes");
  if (entries.size() != static_cast<std::size_t>(num_classes * num_classes))
    throw InvalidInput("LLR matrix entry count does not match K*K");
  for (double v : entries) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite LLR entry");
  }
  for (int k = 0; k < num_classes; ++k) {
    if (entries[static_cast<std::size_t>(k * num_classes + k)] != 0.0)
      throw InvalidInput("LLR matrix diagonal must be zero");
    for (int l = k + 1; l < num_classes; ++l) {
      const double a = entries[static_cast<std::size_t>(k * num_classes + l)];
      const double b = entries[static_cast<std::size_t>(l * num_classes + k)];
      if (a != -b) throw InvalidInput("LLR matrix must be antisymmetric");
    }
  }
  LLRMatrix m;
  m.k_ = num_classes;
  m.e_ = std::move(entries);
  return m;
}

LLRMatrix LLRMatrix::binary(double llr_12) {
  if (!std::isfinite(llr_12)) throw InvalidInput("non-finite LLR entry");
  LLRMatrix m = zeros(2);
  m.e_[1] = llr_12;
  m.e_[2] = -llr_12;
  return m;
}

LLRMatrix LLRMatrix::from_scores(std::span<const double> scores) {
  const int k = static_cast<int>(scores.size());
  LLRMatrix m = zeros(k);
  for (int a = 0; a < k; ++a) {
    if (!std::isfinite(scores[a])) throw InvalidInput("non-finite LLR score");
    for (int b = a + 1; b < k; ++b) {
      const double v = scores[a] - scores[b];
      m.e_[static_cast<std::size_t>(a * k + b)] = v;
      m.e_[static_cast<std::size_t>(b * k + a)] = -v;
    }
  }
  return m;
}

double LLRMatrix::min_row_excluding_diagonal(int k) const noexcept {
  double best = std::numeric_limits<double>::infinity();
  for (int l = 0; l < k_; ++l) {
    if (l != k) best = std::min(best, (*this)(k, l));
  }
  return best;
}

LLRMatrix LLRMatrix::operator+(const LLRMatrix& other) const {
  if (other.k_ != k_) throw InvalidInput("LLR matrix size mismatch");
  LLRMatrix m = *this;
  for (std::size_t i = 0; i < e_.size(); ++i) m.e_[i] += other.e_[i];
  return m;
}

PosteriorVector::PosteriorVector(std::vector<double> probs) : p_(std::move(probs)) {
  if (p_.size() < 2) throw InvalidInput("posterior needs at least two classes");
  double sum = 0.0;
  for (double v : p_) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("posterior entry outside [0,1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidInput("posterior does not sum to one");
}

PosteriorVector PosteriorVector::uniform(int num_classes) {
  return PosteriorVector(std::vector<double>(static_cast<std::size_t>(num_classes),
                                             1.0 / static_cast<double>(num_classes)));
}

RiskParams RiskParams::uniform(int num_classes, double penalty, double cost) {
  RiskParams p;
  p.penalty.assign(static_cast<std::size_t>(num_classes), penalty);
  p.cost = cost;
  p.priors.assign(static_cast<std::size_t>(num_classes), 1.0 / static_cast<double>(num_classes));
  return p;
}

void RiskParams::validate() const {
  if (penalty.size() < 2) throw InvalidInput("risk params need at least two classes");
  if (priors.size() != penalty.size()) throw InvalidInput("priors and penalty lengths differ");
  for (double l : penalty) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw InvalidInput("penalty entries must be >= 0");
  }
  if (!(cost >= 0.0) || !std::isfinite(cost)) throw InvalidInput("sampling cost must be >= 0");
  double sum = 0.0;
  for (double p : priors) {
    if (!(p >= 0.0)) throw InvalidInput("priors must be nonnegative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidInput("priors must sum to one");
}

RiskParams RiskParams::scaled(double alpha) const {
  RiskParams p = *this;
  for (double& l : p.penalty) l *= alpha;
  p.cost *= alpha;
  return p;
}

void Trajectory::validate() const {
  if (stats.empty()) throw InvalidInput("trajectory has no time steps");
  const int k = stats.front().num_classes();
  for (const auto& s : stats) {
    if (s.num_classes() != k) throw InvalidInput("trajectory mixes class counts");
  }
  if (label < 0 || label >= k) throw InvalidInput("trajectory label out of range");
}

PosteriorVector llr_to_posterior(const LLRMatrix& llr, std::span<const double> priors) {
  const int k = llr.num_classes();
  check_priors(priors, k);
  for (double v : llr.entries()) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite LLR entry");
  }
  std::vector<double> pi(static_cast<std::size_t>(k));
  std::vector<double> terms(static_cast<std::size_t>(k));
  double total = 0.0;
  for (int a = 0; a < k; ++a) {
    // log(1 + sum_i exp(z_i)) with z_i = lambda_ia + log chi_ia
    double zmax = 0.0;
    for (int i = 0; i < k; ++i) {
      if (i == a) {
        terms[i] = 0.0;
        continue;
      }
      const double lam = std::clamp(llr(i, a), -kLlrClamp, kLlrClamp);
      terms[i] = lam + std::log(priors[i]) - std::log(priors[a]);
      zmax = std::max(zmax, terms[i]);
    }
    double s = std::exp(-zmax);
    for (int i = 0; i < k; ++i) {
      if (i != a) s += std::exp(terms[i] - zmax);
    }
    pi[a] = std::exp(-(zmax + std::log(s)));
    total += pi[a];
  }
  for (double& v : pi) v = std::min(1.0, v / total);
  return PosteriorVector(std::move(pi));
}

LLRMatrix posterior_to_llr(const PosteriorVector& pi, std::span<const double> priors) {
  const int k = pi.num_classes();
  check_priors(priors, k);
  std::vector<double> p(pi.probs().begin(), pi.probs().end());
  bool floored = false;
  for (double& v : p) {
    if (v == 0.0) throw DegeneratePosterior("posterior entry is exactly zero; LLR is infinite");
    if (v < kPosteriorFloor) {
      v = kPosteriorFloor;
      floored = true;
    }
  }
  if (floored) {
    double s = 0.0;
    for (double v : p) s += v;
    for (double& v : p) v /= s;
  }
  std::vector<double> score(static_cast<std::size_t>(k));
  for (int a = 0; a < k; ++a) score[a] = std::log(p[a]) - std::log(priors[a]);
  return LLRMatrix::from_scores(score);
}

double apr(const PosteriorVector& pi, int decision, const RiskParams& params, int t) {
  if (decision < 0 || decision >= pi.num_classes()) throw InvalidInput("decision out of range");
  if (t < 1) throw InvalidInput("time step must be >= 1");
  return params.penalty[static_cast<std::size_t>(decision)] * (1.0 - pi[decision]) +
         params.cost * static_cast<double>(t);
}

double aapr(std::span<const StoppedDecision> decisions, const RiskParams& params) {
  if (decisions.empty()) throw InvalidInput("aapr of an empty decision list");
  double sum = 0.0;
  for (const auto& d : decisions) sum += apr(d.posterior, d.decision, params, d.tau);
  return sum / static_cast<double>(decisions.size());
}

}  // namespace firmbound
