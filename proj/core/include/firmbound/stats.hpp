#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace firmbound {

// LLR magnitudes are clamped to this many nats before exponentiation.
inline constexpr double kLlrClamp = 700.0;
// Posterior entries below this are floored before taking logs.
inline constexpr double kPosteriorFloor = 1e-12;

/// K x K matrix of pairwise log-likelihood ratios lambda_kl (nats).
///
/// Always antisymmetric with an exactly zero diagonal. Construction from raw
/// entries validates both properties and finiteness.
class LLRMatrix {
 public:
  LLRMatrix() = default;
  static LLRMatrix zeros(int num_classes);
  /// Row-major K*K entries; throws InvalidInput unless antisymmetric and finite.
  static LLRMatrix from_entries(int num_classes, std::vector<double> entries);
  /// Binary case: lambda_12 = value, lambda_21 = -value.
  static LLRMatrix binary(double llr_12);
  /// Builds lambda_kl = score_k - score_l - offset_kl style matrices from
  /// per-class scores: lambda_kl = scores[k] - scores[l].
  static LLRMatrix from_scores(std::span<const double> scores);

  int num_classes() const noexcept { return k_; }
  double operator()(int k, int l) const noexcept { return e_[static_cast<std::size_t>(k * k_ + l)]; }
  std::span<const double> entries() const noexcept { return e_; }

  /// min over l != k of lambda_kl.
  double min_row_excluding_diagonal(int k) const noexcept;

  LLRMatrix operator+(const LLRMatrix& other) const;

 private:
  int k_ = 0;
  std::vector<double> e_;
};

/// Length-K class posterior; entries in [0,1] summing to 1 within 1e-9.
class PosteriorVector {
 public:
  PosteriorVector() = default;
  explicit PosteriorVector(std::vector<double> probs);
  static PosteriorVector uniform(int num_classes);

  int num_classes() const noexcept { return static_cast<int>(p_.size()); }
  double operator[](int k) const noexcept { return p_[static_cast<std::size_t>(k)]; }
  std::span<const double> probs() const noexcept { return p_; }

 private:
  std::vector<double> p_;
};

/// Penalty vector, per-step sampling cost and class priors defining the
/// a-posteriori risk.
struct RiskParams {
  std::vector<double> penalty;
  double cost = 0.0;
  std::vector<double> priors;

  static RiskParams uniform(int num_classes, double penalty, double cost);
  int num_classes() const noexcept { return static_cast<int>(penalty.size()); }
  /// Throws InvalidInput on negative entries or non-simplex priors.
  void validate() const;
  /// Same params with penalty and cost multiplied by alpha.
  RiskParams scaled(double alpha) const;
};

/// Sequence of sufficient statistics for one labelled sample.
struct Trajectory {
  int label = 0;  // 0-based class index
  std::vector<LLRMatrix> stats;

  int horizon() const noexcept { return static_cast<int>(stats.size()); }
  int num_classes() const noexcept { return stats.empty() ? 0 : stats.front().num_classes(); }
  /// Throws InvalidInput when empty, ragged or the label is out of range.
  void validate() const;
};

/// pi_k = 1 / (1 + sum_{i != k} chi_ik exp(lambda_ik)), evaluated in log space.
PosteriorVector llr_to_posterior(const LLRMatrix& llr, std::span<const double> priors);

/// lambda_kl = log(pi_k / pi_l) - log(chi_kl). Entries below kPosteriorFloor
/// are floored and renormalized; an exact zero throws DegeneratePosterior.
LLRMatrix posterior_to_llr(const PosteriorVector& pi, std::span<const double> priors);

/// a-posteriori risk of deciding class k at time t (1-based): L_k (1 - pi_k) + c t.
double apr(const PosteriorVector& pi, int decision, const RiskParams& params, int t);

struct StoppedDecision {
  int decision = 0;  // 0-based class
  int tau = 1;       // 1-based stopping time
  PosteriorVector posterior;
};

/// Empirical mean of apr over stopped decisions (the Bayes risk estimate).
double aapr(std::span<const StoppedDecision> decisions, const RiskParams& params);

}  // namespace firmbound
