#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "firmbound/dre.hpp"
#include "firmbound/stats.hpp"

namespace firmbound {

/// Labelled trajectories with exact LLRs and, optionally, the raw features
/// that produced them.
struct Dataset {
  int num_classes = 2;
  int horizon = 0;
  int dim = 0;  // 0 when no features are stored
  std::vector<Trajectory> trajectories;
  std::vector<FeatureSequence> features;  // empty or one per trajectory

  std::size_t size() const noexcept { return trajectories.size(); }
  /// Throws InvalidInput when shapes are inconsistent.
  void validate() const;
};

/// i.i.d. N(mu_y, I) vectors; mu_k = mean_scale * e_k.
struct GaussianSpec {
  int num_classes = 2;
  int dim = 128;
  int horizon = 50;
  double mean_scale = 0.5;
  int count = 5000;
  std::uint64_t seed = 0;
  bool keep_features = true;
};

/// Damped oscillating LLR process with one parameter draw per trajectory.
struct DolSpec {
  int horizon = 50;
  int count = 5000;
  std::uint64_t seed = 0;
  double amplitude_mean = 2.0, amplitude_sd = 2.0;
  double damping_lo = 0.02, damping_hi = 0.2;
  double frequency_lo = -2.0, frequency_hi = 3.0;
  double shape_lo = -2.5, shape_hi = 0.0;
};

struct DolParams {
  double amplitude = 0.0;
  double damping = 0.0;
  double frequency = 0.0;
  double shape = 0.0;  // kappa
  double noise = 0.0;  // |sigma|
};

/// Coin flips with head probability p0 under class 1 and p1 under class 2.
struct BernoulliSpec {
  double p0 = 0.4;
  double p1 = 0.6;
  int horizon = 10;
  int count = 5000;
  std::uint64_t seed = 0;
};

/// Cumulative Gaussian LLR contribution of one observation:
/// <mu_k - mu_l, x> - (|mu_k|^2 - |mu_l|^2) / 2 for every pair.
Dataset gen_gaussian(const GaussianSpec& spec);

/// Noise-free DOL path gamma (1 - (1 - t/T)^{exp kappa}) + A e^{-beta t} sin(omega t).
double dol_mean_path(const DolParams& p, double gamma, int t, int horizon);
DolParams sample_dol_params(const DolSpec& spec, std::uint64_t trajectory_seed);
/// Binary LLR trajectories; label 1 for gamma = +1, label 2 for gamma = -1.
/// Features are the per-step LLR increments (d = 1).
Dataset gen_dol(const DolSpec& spec);

/// Features are the flips (1 = head, d = 1).
Dataset gen_bernoulli_toy(const BernoulliSpec& spec);
/// log P(h heads in t flips | class 1) / P(... | class 2).
double bernoulli_llr(double p0, double p1, int t, int heads);
/// Exact posterior after t flips with h heads.
PosteriorVector bernoulli_posterior(double p0, double p1, int t, int heads, std::span<const double> priors);

inline constexpr std::uint32_t kFbdsVersion = 1;

/// Binary container: "FBDS", then uint32 version, K, T, d, M, then per
/// trajectory a float label (1-based), T*d features and T*K*K LLR entries.
/// All values little-endian 32-bit.
void write_fbds(const std::filesystem::path& path, const Dataset& data);
Dataset read_fbds(const std::filesystem::path& path);

}  // namespace firmbound
