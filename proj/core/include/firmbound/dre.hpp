#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "firmbound/stats.hpp"

namespace firmbound {

/// Raw feature sequence: row t holds x_{t+1}.
struct FeatureSequence {
  int label = 0;
  Eigen::MatrixXd x;  // T x d

  int horizon() const noexcept { return static_cast<int>(x.rows()); }
  int dim() const noexcept { return static_cast<int>(x.cols()); }
};

/// Linear-logit posterior model over sliding windows of an order-N Markov
/// sequence. weights[w - 1] maps a length-w window (oldest row first,
/// flattened) plus a bias to K logits, for w = 1..N+1.
struct DREModel {
  int order = 0;
  int dim = 0;
  int num_classes = 2;
  std::vector<Eigen::MatrixXd> weights;  // K x (w * dim + 1)
  std::vector<double> priors;            // class frequencies of the training set

  /// All-zero weights (uniform posteriors) with the given priors.
  static DREModel zeros(int num_classes, int dim, int order, std::vector<double> priors);

  /// Logits of the length-w window ending at row `end` (0-based).
  Eigen::VectorXd logits(int w, const Eigen::MatrixXd& x, int end) const;
  /// Softmax of `logits`.
  PosteriorVector window_posterior(int w, const Eigen::MatrixXd& x, int end) const;
};

/// Order-N decomposition of the full-prefix LLR into window posteriors:
/// lambda_kl(t) = sum_{s=N+1..t} log(pi_k/pi_l)(long_s) - sum_{s=N+2..t} log(pi_k/pi_l)(short_s) - log chi_kl.
/// `long_windows` holds the t - N posteriors of length-(N+1) windows ending
/// at s = N+1..t, `short_windows` the t - N - 1 posteriors of length-N windows
/// ending at s - 1. For N = 0 the short windows are empty sets whose
/// posterior is the prior, so `short_windows` must be empty.
LLRMatrix tandem_llr(std::span<const PosteriorVector> long_windows, std::span<const PosteriorVector> short_windows,
                     std::span<const double> priors, int order);

/// Online form: lambda(t) from lambda(t - 1) and the newest window pair.
/// For N = 0 pass the prior as `newest_short`.
LLRMatrix tandem_update(const LLRMatrix& previous, const PosteriorVector& newest_long,
                        const PosteriorVector& newest_short);

/// Estimated LLR trajectory of a sequence. Steps t <= N + 1 use the direct
/// posterior of the length-t prefix; later steps use the order-N decomposition.
Trajectory estimate_llr_trajectory(const DREModel& model, const FeatureSequence& seq);

/// (1/KT) sum_k sum_t (1/M_k) sum_{i: y_i = k} log(1 + sum_{l != k} exp(-lambda_kl(t))).
double lsel_loss(const DREModel& model, std::span<const FeatureSequence> data);

/// 1/(M (T - N)) sum_i sum_{w=1..N+1} sum_windows -log pi_{y_i}(window).
double mce_loss(const DREModel& model, std::span<const FeatureSequence> data);

struct DreLossGradient {
  double loss = 0.0;
  std::vector<Eigen::MatrixXd> weights;  // same shapes as DREModel::weights
};

/// mce_weight * MCE + lsel_weight * LSEL and its analytic gradient.
DreLossGradient dre_loss_gradient(const DREModel& model, std::span<const FeatureSequence> data, double mce_weight,
                                  double lsel_weight);

struct DreConfig {
  int order = 0;
  double mce_weight = 1.0;
  double lsel_weight = 1.0;
  int epochs = 200;
  double learning_rate = 0.05;  ///< Adam step size
  /// 0 = full batch; otherwise sequences per minibatch.
  int batch = 0;
  std::uint64_t seed = 0;
};

inline constexpr int kMaxDreFeatureDim = 8;

/// Adam from the all-zero model. `loss_history`, when given,
/// receives the training loss before every epoch and after the last one.
DREModel train_dre(std::span<const FeatureSequence> data, const DreConfig& cfg,
                   std::vector<double>* loss_history = nullptr);

/// Versioned JSON document ("firmbound-dre", version 1).
std::string dre_to_json(const DREModel& model, int indent = -1);
/// Throws InvalidInput on malformed documents.
DREModel dre_from_json(std::string_view text);

}  // namespace firmbound
