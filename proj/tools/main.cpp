#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "firmbound/datasets.hpp"
#include "firmbound/dre.hpp"
#include "firmbound/error.hpp"
#include "firmbound/eval.hpp"
#include "firmbound/hash.hpp"
#include "firmbound/parallel.hpp"
#include "firmbound/policy.hpp"
#include "firmbound/rng.hpp"

namespace fs = std::filesystem;
namespace fb = firmbound;
using json = nlohmann::json;

namespace {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json default_config() {
  const fb::GpConfig gp;
  const fb::PolicyConfig policy;
  const fb::DreConfig dre;
  return {
      {"dataset", "gaussian2"},
      {"test_dataset", nullptr},
      {"scale", "desk"},
      {"statistic", "analytic"},
      {"feature", "posterior"},
      {"regressor", "gp"},
      {"penalty", 10.0},
      {"costs", json::array({0.2})},
      {"seed", 0},
      {"output_dir", "firmbound_out"},
      {"threads", 0},
      {"horizon", nullptr},
      {"dim", nullptr},
      {"train_count", nullptr},
      {"test_count", nullptr},
      {"keep_features", nullptr},
      {"repeats", 1},
      {"bernoulli", {{"p0", 0.4}, {"p1", 0.6}}},
      {"dre",
       {{"order", dre.order},
        {"epochs", dre.epochs},
        {"learning_rate", dre.learning_rate},
        {"batch", dre.batch},
        {"mce_weight", dre.mce_weight},
        {"lsel_weight", dre.lsel_weight},
        {"model", nullptr}}},
      {"gp",
       {{"inducing", gp.n_inducing}, {"epochs", gp.epochs}, {"batch", gp.batch}, {"learning_rate", gp.learning_rate}}},
      {"cfl",
       {{"reg", policy.admm.reg},
        {"max_samples", policy.cfl_max_samples},
        {"iters", policy.admm.iters},
        {"tune", policy.tune_reg}}},
      {"static_grid", {{"lo", 0.0}, {"hi", 10.0}}},
  };
}

// Rejects keys the defaults do not know, so typos fail loudly.
void check_keys(const json& given, const json& defaults, const std::string& where) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
    const auto& d = defaults.at(it.key());
    if (d.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + where + it.key() + "' must be an object");
      check_keys(it.value(), d, where + it.key() + ".");
    }
  }
}

struct Flags {
  std::string config_path;
  std::optional<std::string> dataset, regressor, statistic, feature, scale, out, dre_model;
  std::vector<double> costs;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads, horizon, train_count, test_count, repeats;
  bool force = false;
  std::vector<std::string> policies;
  std::vector<std::string> baselines;
  bool oracle = false;
};

struct Context {
  json config;
  fs::path out;
  std::string hash, data_hash, dre_hash;
  bool force = false;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw fb::IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw fb::IoError("cannot write " + p.string());
  out << text;
  if (!out) throw fb::IoError("write failed for " + p.string());
}

std::string config_hash(const json& config) {
  json c = config;
  c.erase("output_dir");
  c.erase("threads");
  return fb::hex64(fb::fnv1a64(c.dump()));
}

// Hash over the keys that shape the generated data, so refitting with
// other regressor settings does not invalidate the datasets.
std::string data_hash(const json& config) {
  json c = json::object();
  for (const char* key : {"dataset", "test_dataset", "scale", "seed", "horizon", "dim", "train_count", "test_count",
                          "keep_features", "bernoulli"})
    c[key] = config.at(key);
  return fb::hex64(fb::fnv1a64(c.dump()));
}

std::string dre_hash(const json& config) {
  json c = {{"data", data_hash(config)}, {"dre", config.at("dre")}};
  return fb::hex64(fb::fnv1a64(c.dump()));
}

bool is_builtin(const std::string& name) {
  return name == "gaussian2" || name == "gaussian3" || name == "dol" || name == "bernoulli";
}

void validate(const json& c) {
  try {
    const auto costs = c.at("costs").get<std::vector<double>>();
    if (costs.empty()) throw ConfigError("cost list is empty");
    for (double v : costs)
      if (!(v >= 0.0)) throw ConfigError("costs must be >= 0");
    if (!(c.at("penalty").get<double>() > 0.0)) throw ConfigError("penalty must be > 0");
    if (c.at("repeats").get<int>() < 1) throw ConfigError("repeats must be >= 1");
    const auto scale = c.at("scale").get<std::string>();
    if (scale != "desk" && scale != "paper") throw ConfigError("scale must be desk or paper");
    const auto stat = c.at("statistic").get<std::string>();
    if (stat != "analytic" && stat != "dre") throw ConfigError("statistic must be analytic or dre");
    fb::statistic_kind_from_string(c.at("feature").get<std::string>());
    fb::regressor_kind_from_string(c.at("regressor").get<std::string>());
    const auto ds = c.at("dataset").get<std::string>();
    if (!is_builtin(ds) && !fs::exists(ds)) throw ConfigError("dataset '" + ds + "' is neither built in nor a file");
    if (!c.at("test_dataset").is_null() && !fs::exists(c.at("test_dataset").get<std::string>()))
      throw ConfigError("test dataset file does not exist");
    if (!c.at("dre").at("model").is_null() && !fs::exists(c.at("dre").at("model").get<std::string>()))
      throw ConfigError("DRE model file does not exist");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config has a wrong type: ") + e.what());
  } catch (const fb::InvalidInput& e) {
    throw ConfigError(e.what());
  }
}

Context make_context(const Flags& f) {
  json config = default_config();
  if (!f.config_path.empty()) {
    json given;
    try {
      given = json::parse(read_text(f.config_path));
    } catch (const json::exception& e) {
      throw ConfigError("config " + f.config_path + " is not valid JSON: " + e.what());
    }
    if (!given.is_object()) throw ConfigError("config must be a JSON object");
    check_keys(given, config, "");
    config.merge_patch(given);
  }
  if (f.dataset) config["dataset"] = *f.dataset;
  if (f.regressor) config["regressor"] = *f.regressor;
  if (f.statistic) config["statistic"] = *f.statistic;
  if (f.feature) config["feature"] = *f.feature;
  if (f.scale) config["scale"] = *f.scale;
  if (f.dre_model) config["dre"]["model"] = *f.dre_model;
  if (!f.costs.empty()) config["costs"] = f.costs;
  if (f.seed) config["seed"] = *f.seed;
  if (f.horizon) config["horizon"] = *f.horizon;
  if (f.train_count) config["train_count"] = *f.train_count;
  if (f.test_count) config["test_count"] = *f.test_count;
  if (f.repeats) config["repeats"] = *f.repeats;
  if (const char* env = std::getenv("FIRMBOUND_OUT"); env && *env) config["output_dir"] = env;
  if (f.out) config["output_dir"] = *f.out;
  if (f.threads) config["threads"] = *f.threads;
  validate(config);

  Context ctx;
  ctx.config = config;
  ctx.out = config.at("output_dir").get<std::string>();
  ctx.hash = config_hash(config);
  ctx.data_hash = data_hash(config);
  ctx.dre_hash = dre_hash(config);
  ctx.force = f.force;
  const int threads = config.at("threads").get<int>();
  if (threads < 0) throw ConfigError("threads must be >= 0");
  fb::set_max_threads(static_cast<std::size_t>(threads));
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (ec) throw fb::IoError("cannot create output directory " + ctx.out.string() + ": " + ec.message());
  return ctx;
}

void check_hash(const Context& ctx, const json& doc, const std::string& expected, const std::string& what) {
  const std::string found = doc.value("config_hash", std::string());
  if (found == expected) return;
  if (ctx.force) {
    std::cerr << "warning: " << what << " was produced under config " << found << ", current is " << expected
              << " (continuing because of --force)\n";
    return;
  }
  throw ConfigError(what + " was produced under config " + (found.empty() ? "<none>" : found) +
                    " but the current config hash is " + expected + "; rerun or pass --force");
}

// Records content hashes of written artifacts.
void record(const Context& ctx, const std::vector<fs::path>& files) {
  const fs::path mpath = ctx.out / "manifest.json";
  json manifest = json::object();
  if (fs::exists(mpath)) {
    try {
      manifest = json::parse(read_text(mpath));
    } catch (const json::exception&) {
      manifest = json::object();
    }
  }
  manifest["config_hash"] = ctx.hash;
  json cfg = ctx.config;
  cfg.erase("output_dir");
  cfg.erase("threads");
  manifest["config"] = cfg;
  for (const auto& f : files)
    manifest["files"][f.filename().string()] = {{"fnv1a64", fb::hex64(fb::fnv1a64_file(f))},
                                                {"bytes", fs::file_size(f)}};
  write_text(mpath, manifest.dump(2) + "\n");
}

fb::RiskParams risk_params(const Context& ctx, int num_classes, double cost) {
  return fb::RiskParams::uniform(num_classes, ctx.config.at("penalty").get<double>(), cost);
}

std::vector<double> costs(const Context& ctx) { return ctx.config.at("costs").get<std::vector<double>>(); }

std::uint64_t seed(const Context& ctx) { return ctx.config.at("seed").get<std::uint64_t>(); }

template <typename T>
T opt(const json& c, const char* key, T fallback) {
  return c.at(key).is_null() ? fallback : c.at(key).get<T>();
}

fb::Dataset generate(const Context& ctx, bool train) {
  const json& c = ctx.config;
  const std::string name = c.at("dataset").get<std::string>();
  const bool full_scale = c.at("scale") == "paper";
  const std::uint64_t s = fb::derive_seed(seed(ctx), train ? 1 : 2);
  const char* count_key = train ? "train_count" : "test_count";
  if (name == "gaussian2" || name == "gaussian3") {
    fb::GaussianSpec g;
    g.num_classes = name == "gaussian2" ? 2 : 3;
    g.dim = opt(c, "dim", 128);
    g.horizon = opt(c, "horizon", 50);
    const int full_count = g.num_classes == 2 ? 80000 : (train ? 60000 : 120000);
    g.count = opt(c, count_key, full_scale ? full_count : 1000);
    g.seed = s;
    g.keep_features = opt(c, "keep_features", c.at("statistic") == "dre");
    return fb::gen_gaussian(g);
  }
  if (name == "dol") {
    fb::DolSpec d;
    d.horizon = opt(c, "horizon", 50);
    d.count = opt(c, count_key, full_scale ? 80000 : 5000);
    d.seed = s;
    return fb::gen_dol(d);
  }
  if (name == "bernoulli") {
    fb::BernoulliSpec b;
    b.p0 = c.at("bernoulli").at("p0").get<double>();
    b.p1 = c.at("bernoulli").at("p1").get<double>();
    b.horizon = opt(c, "horizon", 10);
    b.count = opt(c, count_key, 5000);
    b.seed = s;
    return fb::gen_bernoulli_toy(b);
  }
  throw ConfigError("dataset '" + name + "' is a file; there is nothing to generate");
}

fs::path dataset_path(const Context& ctx, bool train) {
  const json& c = ctx.config;
  const std::string name = c.at("dataset").get<std::string>();
  if (is_builtin(name)) return ctx.out / (train ? "train.fbds" : "test.fbds");
  if (!train && !c.at("test_dataset").is_null()) return c.at("test_dataset").get<std::string>();
  return name;
}

fb::Dataset load_dataset(const Context& ctx, bool train) {
  const fs::path p = dataset_path(ctx, train);
  if (!fs::exists(p)) throw fb::IoError("dataset " + p.string() + " does not exist; run `firmbound gen` first");
  if (is_builtin(ctx.config.at("dataset").get<std::string>())) {
    const fs::path side = p.string() + ".json";
    if (!fs::exists(side)) throw fb::IoError("dataset sidecar " + side.string() + " is missing");
    check_hash(ctx, json::parse(read_text(side)), ctx.data_hash, p.string());
  }
  return fb::read_fbds(p);
}

fs::path dre_path(const Context& ctx) {
  const auto& m = ctx.config.at("dre").at("model");
  return m.is_null() ? ctx.out / "dre.json" : fs::path(m.get<std::string>());
}

// Trajectories the policy sees: exact LLRs or DRE estimates from features.
std::vector<fb::Trajectory> statistics(const Context& ctx, const fb::Dataset& data) {
  if (ctx.config.at("statistic") == "analytic") return data.trajectories;
  const fs::path p = dre_path(ctx);
  if (!fs::exists(p))
    throw ConfigError("statistic=dre needs a trained DRE model; run `firmbound train-dre` or set dre.model");
  const json doc = json::parse(read_text(p));
  if (ctx.config.at("dre").at("model").is_null()) check_hash(ctx, doc, ctx.dre_hash, p.string());
  const fb::DREModel model = fb::dre_from_json(doc.at("model").dump());
  if (data.features.empty()) throw ConfigError("statistic=dre needs a dataset with stored features");
  std::vector<fb::Trajectory> out(data.size());
  fb::parallel_for(data.size(), [&](std::size_t i) {
    out[i] = fb::estimate_llr_trajectory(model, data.features[i]);
    out[i].label = data.trajectories[i].label;
  });
  return out;
}

int cmd_gen(const Context& ctx) {
  std::vector<fs::path> written;
  for (bool train : {true, false}) {
    const fb::Dataset d = generate(ctx, train);
    const fs::path p = dataset_path(ctx, train);
    fb::write_fbds(p, d);
    const json side = {{"config_hash", ctx.data_hash},
                       {"dataset", ctx.config.at("dataset")},
                       {"split", train ? "train" : "test"},
                       {"num_classes", d.num_classes},
                       {"horizon", d.horizon},
                       {"dim", d.dim},
                       {"count", d.size()},
                       {"content_fnv1a64", fb::hex64(fb::fnv1a64_file(p))}};
    write_text(p.string() + ".json", side.dump(2) + "\n");
    written.push_back(p);
    written.emplace_back(p.string() + ".json");
    std::cout << p.string() << "\n";
  }
  record(ctx, written);
  return 0;
}

int cmd_train_dre(const Context& ctx) {
  const fb::Dataset train = load_dataset(ctx, true);
  if (train.features.empty()) throw ConfigError("DRE training needs a dataset with stored features");
  const json& d = ctx.config.at("dre");
  fb::DreConfig cfg;
  cfg.order = d.at("order").get<int>();
  cfg.epochs = d.at("epochs").get<int>();
  cfg.learning_rate = d.at("learning_rate").get<double>();
  cfg.batch = d.at("batch").get<int>();
  cfg.mce_weight = d.at("mce_weight").get<double>();
  cfg.lsel_weight = d.at("lsel_weight").get<double>();
  cfg.seed = fb::derive_seed(seed(ctx), 3);
  std::vector<double> history;
  const fb::DREModel model = fb::train_dre(train.features, cfg, &history);
  std::cerr << "dre: loss " << history.front() << " -> " << history.back() << "\n";
  const fs::path p = ctx.out / "dre.json";
  const json doc = {{"config_hash", ctx.dre_hash}, {"model", json::parse(fb::dre_to_json(model))}, {"loss", history}};
  write_text(p, doc.dump(2) + "\n");
  record(ctx, {p});
  std::cout << p.string() << "\n";
  return 0;
}

fb::PolicyConfig policy_config(const Context& ctx) {
  const json& c = ctx.config;
  fb::PolicyConfig cfg;
  cfg.regressor = fb::regressor_kind_from_string(c.at("regressor").get<std::string>());
  cfg.statistic = fb::statistic_kind_from_string(c.at("feature").get<std::string>());
  cfg.gp.n_inducing = c.at("gp").at("inducing").get<int>();
  cfg.gp.epochs = c.at("gp").at("epochs").get<int>();
  cfg.gp.batch = c.at("gp").at("batch").get<int>();
  cfg.gp.learning_rate = c.at("gp").at("learning_rate").get<double>();
  cfg.admm.reg = c.at("cfl").at("reg").get<double>();
  cfg.admm.iters = c.at("cfl").at("iters").get<int>();
  cfg.cfl_max_samples = c.at("cfl").at("max_samples").get<int>();
  cfg.tune_reg = c.at("cfl").at("tune").get<bool>();
  cfg.seed = fb::derive_seed(seed(ctx), 4);
  return cfg;
}

fs::path policy_path(const Context& ctx, std::size_t index) {
  return ctx.out / ("policy_" + std::to_string(index) + ".json");
}

int cmd_fit(const Context& ctx) {
  const fb::Dataset train = load_dataset(ctx, true);
  const auto stats = statistics(ctx, train);
  const auto cfg = policy_config(ctx);
  const auto cs = costs(ctx);
  std::vector<fs::path> written;
  std::ostringstream log;
  log << "cost,step,train_mse\n";
  for (std::size_t i = 0; i < cs.size(); ++i) {
    const auto params = risk_params(ctx, train.num_classes, cs[i]);
    const fb::StoppingPolicy policy = fb::fit_policy(stats, params, cfg);
    json doc = json::parse(fb::policy_to_json(policy));
    doc["config_hash"] = ctx.hash;
    const fs::path p = policy_path(ctx, i);
    write_text(p, doc.dump() + "\n");
    written.push_back(p);
    for (std::size_t t = 0; t < policy.step_train_mse.size(); ++t) {
      char line[96];
      std::snprintf(line, sizeof line, "%.12g,%zu,%.12g\n", cs[i], t + 1, policy.step_train_mse[t]);
      log << line;
    }
    std::cerr << "fit: cost " << cs[i] << " -> " << p.string() << " (" << policy.steps.size() << " steps)\n";
    std::cout << p.string() << "\n";
  }
  const fs::path lp = ctx.out / "fit_log.csv";
  write_text(lp, log.str());
  written.push_back(lp);
  record(ctx, written);
  return 0;
}

struct Baseline {
  std::string kind;
  int grid = 0;
};

Baseline parse_baseline(const std::string& text) {
  if (text == "random") return {"random", 0};
  if (text.rfind("static", 0) == 0) {
    int grid = 50;
    if (text.size() > 6) {
      const std::string rest = text.substr(6);
      if (rest.rfind(":grid=", 0) != 0) throw ConfigError("baseline '" + text + "' should look like static:grid=N");
      try {
        grid = std::stoi(rest.substr(6));
      } catch (const std::exception&) {
        throw ConfigError("baseline '" + text + "' has a malformed grid size");
      }
    }
    if (grid < 1) throw ConfigError("static baseline grid must be >= 1");
    return {"static", grid};
  }
  throw ConfigError("unknown baseline '" + text + "' (use static[:grid=N] or random)");
}

int cmd_eval(const Context& ctx, const Flags& f) {
  const fb::Dataset test = load_dataset(ctx, false);
  const auto stats = statistics(ctx, test);
  std::vector<fs::path> paths;
  for (const auto& p : f.policies) paths.emplace_back(p);
  if (paths.empty())
    for (std::size_t i = 0; fs::exists(policy_path(ctx, i)); ++i) paths.push_back(policy_path(ctx, i));
  std::vector<Baseline> baselines;
  for (const auto& b : f.baselines) baselines.push_back(parse_baseline(b));
  if (paths.empty() && baselines.empty())
    throw fb::IoError("no policy files found in " + ctx.out.string() + "; run `firmbound fit` first");

  std::optional<std::vector<fb::OracleTable>> oracles;
  if (f.oracle) {
    if (ctx.config.at("dataset") != "bernoulli") throw ConfigError("--oracle needs the bernoulli dataset");
    if (ctx.config.at("statistic") != "analytic") throw ConfigError("--oracle needs analytic statistics");
  }
  auto oracle_for = [&](const fb::RiskParams& params) {
    return fb::dp_oracle(ctx.config.at("bernoulli").at("p0").get<double>(),
                         ctx.config.at("bernoulli").at("p1").get<double>(), test.horizon, params);
  };

  std::vector<fb::EvalReport> rows;
  const std::uint64_t eval_seed = fb::derive_seed(seed(ctx), 5);
  for (const auto& p : paths) {
    const json doc = json::parse(read_text(p));
    if (f.policies.empty()) check_hash(ctx, doc, ctx.hash, p.string());
    const fb::StoppingPolicy policy = fb::policy_from_json(doc.dump());
    if (policy.horizon != test.horizon)
      throw fb::InvalidInput("policy " + p.string() + " has horizon " + std::to_string(policy.horizon) +
                             " but the test data has " + std::to_string(test.horizon));
    auto r = fb::evaluate(policy, stats, policy.params);
    r.policy_id = fb::to_string(policy.regressor) + "_" + fb::to_string(policy.statistic);
    r.seed = seed(ctx);
    if (f.oracle) r.oracle_agreement = fb::oracle_agreement(oracle_for(policy.params), policy);
    rows.push_back(std::move(r));
  }
  const auto cs = costs(ctx);
  for (std::size_t ci = 0; ci < cs.size(); ++ci) {
    const auto params = risk_params(ctx, test.num_classes, cs[ci]);
    if (f.oracle) {
      const auto table = oracle_for(params);
      std::vector<fb::Decision> dec(stats.size());
      fb::parallel_for(stats.size(), [&](std::size_t i) { dec[i] = table.decide(stats[i]); });
      auto r = fb::summarize(stats, dec, params);
      r.policy_id = "oracle";
      r.seed = seed(ctx);
      r.oracle_agreement = 1.0;
      rows.push_back(std::move(r));
    }
    for (const auto& b : baselines) {
      std::vector<fb::Candidate> cands;
      if (b.kind == "static") {
        const auto& g = ctx.config.at("static_grid");
        cands = fb::static_candidates(test.horizon, params,
                                      fb::linear_grid(g.at("lo").get<double>(), g.at("hi").get<double>(), b.grid),
                                      seed(ctx));
      } else {
        cands.push_back(fb::Candidate{"random", fb::RandomStopping{eval_seed}, params, std::nullopt, seed(ctx)});
      }
      for (auto& r : fb::sat_sweep(stats, cands)) rows.push_back(std::move(r));
    }
  }

  const fs::path csv = ctx.out / "eval.csv";
  std::ostringstream os;
  fb::write_csv(os, rows);
  write_text(csv, os.str());
  const fs::path js = ctx.out / "eval.json";
  json doc = json::parse(fb::reports_to_json(rows));
  doc["config_hash"] = ctx.hash;
  write_text(js, doc.dump(2) + "\n");
  record(ctx, {csv, js});
  std::cout << csv.string() << "\n";
  return 0;
}

int cmd_oracle(const Context& ctx) {
  if (ctx.config.at("dataset") != "bernoulli") throw ConfigError("the exact oracle needs the bernoulli dataset");
  const double p0 = ctx.config.at("bernoulli").at("p0").get<double>();
  const double p1 = ctx.config.at("bernoulli").at("p1").get<double>();
  const int horizon = opt(ctx.config, "horizon", 10);
  std::ostringstream os;
  os << "cost,t,heads,posterior_class1,stopping_risk,continuation_risk,stop,tie,probability\n";
  json summary = {{"config_hash", ctx.hash}, {"tables", json::array()}};
  for (double c : costs(ctx)) {
    const auto table = fb::dp_oracle(p0, p1, horizon, risk_params(ctx, 2, c));
    for (int t = 1; t <= horizon; ++t)
      for (int h = 0; h <= t; ++h) {
        const auto& s = table.at(t, h);
        char line[256];
        std::snprintf(line, sizeof line, "%.12g,%d,%d,%.12g,%.12g,", c, t, h, s.posterior_first, s.stopping_risk);
        os << line;
        if (t == horizon) {
          os << "inf";
        } else {
          std::snprintf(line, sizeof line, "%.12g", s.continuation_risk);
          os << line;
        }
        std::snprintf(line, sizeof line, ",%d,%d,%.12g\n", s.stop ? 1 : 0, s.tie ? 1 : 0, s.probability);
        os << line;
      }
    summary["tables"].push_back({{"cost", c}, {"aapr", table.aapr}});
    std::cout << "cost " << c << ": oracle AAPR " << table.aapr << "\n";
  }
  const fs::path csv = ctx.out / "oracle.csv";
  const fs::path js = ctx.out / "oracle.json";
  write_text(csv, os.str());
  write_text(js, summary.dump(2) + "\n");
  record(ctx, {csv, js});
  return 0;
}

int sweep_once(const Context& ctx, Flags f) {
  const bool builtin = is_builtin(ctx.config.at("dataset").get<std::string>());
  if (builtin) cmd_gen(ctx);
  if (ctx.config.at("statistic") == "dre" && ctx.config.at("dre").at("model").is_null()) cmd_train_dre(ctx);
  cmd_fit(ctx);
  if (f.baselines.empty()) f.baselines.emplace_back("static:grid=50");
  return cmd_eval(ctx, f);
}

// Repeats use consecutive seeds, each in its own subdirectory; their eval
// tables are concatenated so every policy has one row per seed.
int cmd_sweep(const Context& ctx, const Flags& f) {
  const int repeats = ctx.config.at("repeats").get<int>();
  if (repeats == 1) return sweep_once(ctx, f);
  std::string merged;
  for (int r = 0; r < repeats; ++r) {
    Context sub = ctx;
    sub.config["seed"] = seed(ctx) + static_cast<std::uint64_t>(r);
    sub.config["repeats"] = 1;
    sub.out = ctx.out / ("repeat_" + std::to_string(r));
    sub.config["output_dir"] = sub.out.string();
    sub.hash = config_hash(sub.config);
    sub.data_hash = data_hash(sub.config);
    sub.dre_hash = dre_hash(sub.config);
    fs::create_directories(sub.out);
    sweep_once(sub, f);
    const std::string csv = read_text(sub.out / "eval.csv");
    merged += r == 0 ? csv : csv.substr(csv.find('\n') + 1);
  }
  const fs::path p = ctx.out / "eval.csv";
  write_text(p, merged);
  record(ctx, {p});
  std::cout << p.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned stopping boundaries for finite-horizon sequential classification"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", f.config_path, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--dataset", f.dataset, "gaussian2 | gaussian3 | dol | bernoulli | path to .fbds");
    sub->add_option("--scale", f.scale, "desk | paper");
    sub->add_option("--statistic", f.statistic, "analytic | dre");
    sub->add_option("--feature", f.feature, "policy input: posterior | llr");
    sub->add_option("--regressor", f.regressor, "cfl | gp");
    sub->add_option("--costs", f.costs, "sampling costs")->delimiter(',');
    sub->add_option("--seed", f.seed, "master seed");
    sub->add_option("--horizon", f.horizon, "sequence length");
    sub->add_option("--train-count", f.train_count, "training trajectories");
    sub->add_option("--test-count", f.test_count, "test trajectories");
    sub->add_option("--dre-model", f.dre_model, "trained DRE model JSON");
    sub->add_option("-o,--out", f.out, "output directory (also FIRMBOUND_OUT)");
    sub->add_option("--threads", f.threads, "worker thread cap, 0 = all cores");
    sub->add_flag("--force", f.force, "accept artifacts produced under a different config");
  };
  auto* gen = app.add_subcommand("gen", "generate train/test datasets");
  auto* train_dre = app.add_subcommand("train-dre", "train the density-ratio estimator on the training features");
  auto* fit = app.add_subcommand("fit", "fit one stopping policy per cost");
  auto* eval = app.add_subcommand("eval", "evaluate policies and baselines on the test set");
  auto* sweep = app.add_subcommand("sweep", "gen, train-dre if needed, fit and eval in one run");
  auto* oracle = app.add_subcommand("oracle", "exact backward induction on the Bernoulli lattice");
  for (auto* sub : {gen, train_dre, fit, eval, sweep, oracle}) common(sub);
  for (auto* sub : {eval, sweep}) {
    sub->add_option("--baseline", f.baselines, "static[:grid=N] | random (repeatable)");
    sub->add_flag("--oracle", f.oracle, "add exact-oracle rows and agreement (bernoulli only)");
  }
  sweep->add_option("--repeats", f.repeats, "independent seeds, merged into one eval.csv");
  eval->add_option("--policy", f.policies, "policy JSON files (default: all in the output dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const Context ctx = make_context(f);
    if (*gen) return cmd_gen(ctx);
    if (*train_dre) return cmd_train_dre(ctx);
    if (*fit) return cmd_fit(ctx);
    if (*eval) return cmd_eval(ctx, f);
    if (*sweep) return cmd_sweep(ctx, f);
    if (*oracle) return cmd_oracle(ctx);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fb::InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "malformed JSON artifact: " << e.what() << "\n";
    return 2;
  } catch (const fb::NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const fb::DegeneratePosterior& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const fb::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
