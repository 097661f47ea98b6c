#include "firmbound/datasets.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "firmbound/error.hpp"
#include "firmbound/parallel.hpp"
#include "firmbound/rng.hpp"

namespace firmbound {

void Dataset::validate() const {
  if (num_classes < 2 || horizon < 1 || dim < 0) throw InvalidInput("invalid dataset shape");
  if (!features.empty() && features.size() != trajectories.size())
    throw InvalidInput("feature and trajectory counts differ");
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    tr.validate();
    if (tr.horizon() != horizon || tr.num_classes() != num_classes)
      throw InvalidInput("trajectory " + std::to_string(i) + " does not match the dataset shape");
    if (!features.empty()) {
      const auto& f = features[i];
      if (f.horizon() != horizon || f.dim() != dim || f.label != tr.label)
        throw InvalidInput("feature sequence " + std::to_string(i) + " does not match its trajectory");
    }
  }
}

Dataset gen_gaussian(const GaussianSpec& spec) {
  if (spec.num_classes < 2 || spec.dim < spec.num_classes || spec.horizon < 1 || spec.count < 1)
    throw InvalidInput("invalid Gaussian dataset spec");
  const int k = spec.num_classes;
  const double half_sq = 0.5 * spec.mean_scale * spec.mean_scale;
  Dataset out;
  out.num_classes = k;
  out.horizon = spec.horizon;
  out.dim = spec.keep_features ? spec.dim : 0;
  out.trajectories.resize(static_cast<std::size_t>(spec.count));
  if (spec.keep_features) out.features.resize(static_cast<std::size_t>(spec.count));

  parallel_for(static_cast<std::size_t>(spec.count), [&](std::size_t i) {
    Rng rng(derive_seed(spec.seed, i));
    const int label = static_cast<int>(i % static_cast<std::size_t>(k));
    Trajectory tr;
    tr.label = label;
    tr.stats.reserve(static_cast<std::size_t>(spec.horizon));
    Eigen::MatrixXd x;
    if (spec.keep_features) x.resize(spec.horizon, spec.dim);
    std::vector<double> scores(static_cast<std::size_t>(k), 0.0);
    for (int t = 0; t < spec.horizon; ++t) {
      for (int j = 0; j < spec.dim; ++j) {
        const double v = rng.normal() + (j == label ? spec.mean_scale : 0.0);
        if (spec.keep_features) x(t, j) = v;
        if (j < k) scores[static_cast<std::size_t>(j)] += spec.mean_scale * v - half_sq;
      }
      tr.stats.push_back(LLRMatrix::from_scores(scores));
    }
    out.trajectories[i] = std::move(tr);
    if (spec.keep_features) out.features[i] = FeatureSequence{label, std::move(x)};
  });
  return out;
}

double dol_mean_path(const DolParams& p, double gamma, int t, int horizon) {
  const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(horizon);
  const double drift = gamma * (1.0 - std::pow(frac, std::exp(p.shape)));
  return drift + p.amplitude * std::exp(-p.damping * t) * std::sin(p.frequency * t);
}

DolParams sample_dol_params(const DolSpec& spec, std::uint64_t trajectory_seed) {
  Rng rng(trajectory_seed);
  DolParams p;
  p.amplitude = rng.normal(spec.amplitude_mean, spec.amplitude_sd);
  p.damping = rng.uniform(spec.damping_lo, spec.damping_hi);
  p.frequency = rng.uniform(spec.frequency_lo, spec.frequency_hi);
  p.shape = rng.uniform(spec.shape_lo, spec.shape_hi);
  p.noise = std::abs(rng.normal());
  return p;
}

Dataset gen_dol(const DolSpec& spec) {
  if (spec.horizon < 1 || spec.count < 1) throw InvalidInput("invalid DOL dataset spec");
  Dataset out;
  out.num_classes = 2;
  out.horizon = spec.horizon;
  out.dim = 1;
  out.trajectories.resize(static_cast<std::size_t>(spec.count));
  out.features.resize(static_cast<std::size_t>(spec.count));
  parallel_for(static_cast<std::size_t>(spec.count), [&](std::size_t i) {
    const std::uint64_t s = derive_seed(spec.seed, i);
    const DolParams p = sample_dol_params(spec, s);
    Rng noise(derive_seed(s, 1));
    const int label = static_cast<int>(i % 2);
    const double gamma = label == 0 ? 1.0 : -1.0;
    Trajectory tr;
    tr.label = label;
    Eigen::MatrixXd x(spec.horizon, 1);
    double prev = 0.0;
    for (int t = 1; t <= spec.horizon; ++t) {
      const double v = dol_mean_path(p, gamma, t, spec.horizon) + p.noise * noise.normal();
      tr.stats.push_back(LLRMatrix::binary(v));
      x(t - 1, 0) = v - prev;
      prev = v;
    }
    out.trajectories[i] = std::move(tr);
    out.features[i] = FeatureSequence{label, std::move(x)};
  });
  return out;
}

double bernoulli_llr(double p0, double p1, int t, int heads) {
  return heads * std::log(p0 / p1) + (t - heads) * std::log((1.0 - p0) / (1.0 - p1));
}

PosteriorVector bernoulli_posterior(double p0, double p1, int t, int heads, std::span<const double> priors) {
  return llr_to_posterior(LLRMatrix::binary(bernoulli_llr(p0, p1, t, heads)), priors);
}

Dataset gen_bernoulli_toy(const BernoulliSpec& spec) {
  if (!(spec.p0 > 0.0 && spec.p0 <= spec.p1 && spec.p1 < 1.0))
    throw InvalidInput("Bernoulli toy needs 0 < p0 <= p1 < 1");
  if (spec.horizon < 1 || spec.horizon > 12 || spec.count < 1) throw InvalidInput("Bernoulli toy needs 1 <= T <= 12");
  Dataset out;
  out.num_classes = 2;
  out.horizon = spec.horizon;
  out.dim = 1;
  out.trajectories.resize(static_cast<std::size_t>(spec.count));
  out.features.resize(static_cast<std::size_t>(spec.count));
  parallel_for(static_cast<std::size_t>(spec.count), [&](std::size_t i) {
    Rng rng(derive_seed(spec.seed, i));
    const int label = static_cast<int>(i % 2);
    const double p = label == 0 ? spec.p0 : spec.p1;
    Trajectory tr;
    tr.label = label;
    Eigen::MatrixXd x(spec.horizon, 1);
    int heads = 0;
    for (int t = 1; t <= spec.horizon; ++t) {
      const bool head = rng.uniform() < p;
      heads += head ? 1 : 0;
      x(t - 1, 0) = head ? 1.0 : 0.0;
      tr.stats.push_back(LLRMatrix::binary(bernoulli_llr(spec.p0, spec.p1, t, heads)));
    }
    out.trajectories[i] = std::move(tr);
    out.features[i] = FeatureSequence{label, std::move(x)};
  });
  return out;
}

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

void put_f32(std::string& buf, double v) { put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

double get_f32(const unsigned char* p) { return static_cast<double>(std::bit_cast<float>(get_u32(p))); }

}  // namespace

void write_fbds(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  const int k = data.num_classes;
  std::string buf;
  buf.reserve(24 + data.size() * static_cast<std::size_t>(4 * (1 + data.horizon * (data.dim + k * k))));
  buf.append("FBDS");
  put_u32(buf, kFbdsVersion);
  put_u32(buf, static_cast<std::uint32_t>(k));
  put_u32(buf, static_cast<std::uint32_t>(data.horizon));
  put_u32(buf, static_cast<std::uint32_t>(data.dim));
  put_u32(buf, static_cast<std::uint32_t>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& tr = data.trajectories[i];
    put_f32(buf, tr.label + 1);
    if (data.dim > 0) {
      const auto& x = data.features[i].x;
      for (int t = 0; t < data.horizon; ++t)
        for (int j = 0; j < data.dim; ++j) put_f32(buf, x(t, j));
    }
    for (const auto& m : tr.stats)
      for (double e : m.entries()) put_f32(buf, e);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset read_fbds(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 24 || bytes.compare(0, 4, "FBDS") != 0) throw IoError(path.string() + " is not an FBDS file");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t version = get_u32(p + 4);
  if (version != kFbdsVersion)
    throw IoError(path.string() + ": unsupported FBDS version " + std::to_string(version));
  Dataset d;
  d.num_classes = static_cast<int>(get_u32(p + 8));
  d.horizon = static_cast<int>(get_u32(p + 12));
  d.dim = static_cast<int>(get_u32(p + 16));
  const std::uint32_t m = get_u32(p + 20);
  const int k = d.num_classes;
  if (k < 2 || d.horizon < 1) throw IoError(path.string() + ": invalid FBDS header");
  const std::size_t record = 4 * (1 + static_cast<std::size_t>(d.horizon) * static_cast<std::size_t>(d.dim + k * k));
  if (bytes.size() != 24 + record * m) throw IoError(path.string() + ": FBDS size does not match its header");

  d.trajectories.resize(m);
  if (d.dim > 0) d.features.resize(m);
  try {
    for (std::uint32_t i = 0; i < m; ++i) {
      const unsigned char* r = p + 24 + record * i;
      const double label = get_f32(r);
      if (label < 1 || label > k || label != std::floor(label)) throw IoError(path.string() + ": invalid label");
      r += 4;
      Trajectory tr;
      tr.label = static_cast<int>(label) - 1;
      if (d.dim > 0) {
        Eigen::MatrixXd x(d.horizon, d.dim);
        for (int t = 0; t < d.horizon; ++t)
          for (int j = 0; j < d.dim; ++j, r += 4) x(t, j) = get_f32(r);
        d.features[i] = FeatureSequence{tr.label, std::move(x)};
      }
      for (int t = 0; t < d.horizon; ++t) {
        std::vector<double> e(static_cast<std::size_t>(k * k));
        for (auto& v : e) {
          v = get_f32(r);
          r += 4;
        }
        tr.stats.push_back(LLRMatrix::from_entries(k, std::move(e)));
      }
      d.trajectories[i] = std::move(tr);
    }
  } catch (const InvalidInput& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return d;
}

}  // namespace firmbound
