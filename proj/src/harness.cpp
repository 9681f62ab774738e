#include "salgpode/harness.hpp"

#include "salgpode/errors.hpp"
#include "salgpode/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace salgpode {

using nlohmann::json;

std::string to_string(Method m) { return m == Method::sal ? "sal" : "random"; }

Method method_from_string(const std::string& name) {
  if (name == "sal") return Method::sal;
  if (name == "random") return Method::random;
  throw ConfigError("unknown method '" + name + "'");
}

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  if (M < 1) throw ConfigError("M must be >= 1");
  if (seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (!(delta >= 0.0 && delta < 1.0)) throw ConfigError("planner.delta must be in [0, 1)");
  if (n_candidates < 1) throw ConfigError("planner.n_candidates must be >= 1");
  if (planning_K < 2) throw ConfigError("planner.K must be >= 2");
  if (planning_features < 1 || metrics.features < 1) throw ConfigError("features must be >= 1");
  if (metrics.nll_K < 1 || metrics.f1_K < 1) throw ConfigError("metric sample counts must be >= 1");
  if (metrics.f1_grid < 1 || metrics.validation_grid < 1 || metrics.validation_episodes < 1)
    throw ConfigError("metric grid sizes must be >= 1");
  if (model.num_inducing < 1) throw ConfigError("model.num_inducing must be >= 1");
  if (!(model.x0_std > 0.0)) throw ConfigError("model.x0_std must be > 0");
  try {
    train.validate();
    sampling_integrator.validate();
    metrics.integrator.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  make_system(system);
}

namespace {

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items())
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

json integrator_to_json(const IntegratorConfig& c) {
  return {{"method", c.method == IntegratorMethod::rk4_fixed ? "rk4" : "dopri45"},
          {"rtol", c.rtol},
          {"atol", c.atol},
          {"fixed_step", c.fixed_step},
          {"max_steps", c.max_steps}};
}

IntegratorConfig integrator_from_json(const json& j, IntegratorConfig c, const std::string& where) {
  check_keys(j, {"method", "rtol", "atol", "fixed_step", "max_steps"}, where);
  if (j.contains("method")) {
    const auto m = j.at("method").get<std::string>();
    if (m == "rk4") c.method = IntegratorMethod::rk4_fixed;
    else if (m == "dopri45") c.method = IntegratorMethod::dopri45_adaptive;
    else throw ConfigError("unknown integrator method '" + m + "' in " + where);
  }
  read(j, "rtol", c.rtol);
  read(j, "atol", c.atol);
  read(j, "fixed_step", c.fixed_step);
  read(j, "max_steps", c.max_steps);
  return c;
}

SearchStrategy strategy_from_string(const std::string& s) {
  if (s == "random-search") return SearchStrategy::random_search;
  if (s == "refine-local") return SearchStrategy::refine_local;
  throw ConfigError("unknown planner strategy '" + s + "'");
}

std::string to_string(SearchStrategy s) {
  return s == SearchStrategy::random_search ? "random-search" : "refine-local";
}

}  // namespace

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig c;
  try {
    check_keys(doc,
               {"system", "M", "seeds", "method", "acquisition", "output_dir", "record_wall_clock",
                "planner", "train", "model", "metrics"},
               "config");
    read(doc, "system", c.system);
    read(doc, "M", c.M);
    read(doc, "seeds", c.seeds);
    if (doc.contains("method")) c.method = method_from_string(doc.at("method").get<std::string>());
    if (doc.contains("acquisition"))
      c.acquisition = acquisition_from_string(doc.at("acquisition").get<std::string>());
    read(doc, "output_dir", c.output_dir);
    read(doc, "record_wall_clock", c.record_wall_clock);
    if (doc.contains("planner")) {
      const auto& p = doc.at("planner");
      check_keys(p,
                 {"delta", "n_candidates", "strategy", "K", "features", "include_x0_noise", "integrator",
                  "safe_random_baseline"},
                 "planner");
      read(p, "delta", c.delta);
      read(p, "n_candidates", c.n_candidates);
      if (p.contains("strategy")) c.strategy = strategy_from_string(p.at("strategy").get<std::string>());
      read(p, "K", c.planning_K);
      read(p, "features", c.planning_features);
      read(p, "include_x0_noise", c.include_x0_noise);
      read(p, "safe_random_baseline", c.safe_random_baseline);
      if (p.contains("integrator"))
        c.sampling_integrator = integrator_from_json(p.at("integrator"), c.sampling_integrator, "planner.integrator");
    }
    if (doc.contains("train")) {
      const auto& t = doc.at("train");
      check_keys(t,
                 {"iterations", "learning_rate", "final_lr_fraction", "factor_step_scale", "K_train", "features", "rk4_step", "sigma_trainable",
                  "hypers_trainable"},
                 "train");
      read(t, "iterations", c.train.iterations);
      read(t, "learning_rate", c.train.learning_rate);
      read(t, "final_lr_fraction", c.train.final_lr_fraction);
      read(t, "factor_step_scale", c.train.factor_step_scale);
      read(t, "K_train", c.train.K_train);
      read(t, "features", c.train.elbo.features);
      read(t, "rk4_step", c.train.elbo.rk4_step);
      read(t, "sigma_trainable", c.train.sigma_trainable);
      read(t, "hypers_trainable", c.train.hypers_trainable);
    }
    if (doc.contains("model")) {
      const auto& m = doc.at("model");
      check_keys(m, {"num_inducing", "lengthscale_fraction", "signal_variance", "x0_std"}, "model");
      read(m, "num_inducing", c.model.num_inducing);
      read(m, "lengthscale_fraction", c.model.lengthscale_fraction);
      read(m, "signal_variance", c.model.signal_variance);
      read(m, "x0_std", c.model.x0_std);
    }
    if (doc.contains("metrics")) {
      const auto& m = doc.at("metrics");
      check_keys(m,
                 {"validation_episodes", "validation_grid", "validation_seed", "nll_K", "f1_grid", "f1_K",
                  "features", "integrator"},
                 "metrics");
      read(m, "validation_episodes", c.metrics.validation_episodes);
      read(m, "validation_grid", c.metrics.validation_grid);
      read(m, "validation_seed", c.metrics.validation_seed);
      read(m, "nll_K", c.metrics.nll_K);
      read(m, "f1_grid", c.metrics.f1_grid);
      read(m, "f1_K", c.metrics.f1_K);
      read(m, "features", c.metrics.features);
      if (m.contains("integrator"))
        c.metrics.integrator = integrator_from_json(m.at("integrator"), c.metrics.integrator, "metrics.integrator");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  return {
      {"system", c.system},
      {"M", c.M},
      {"seeds", c.seeds},
      {"method", to_string(c.method)},
      {"acquisition", to_string(c.acquisition)},
      {"output_dir", c.output_dir},
      {"record_wall_clock", c.record_wall_clock},
      {"planner",
       {{"delta", c.delta},
        {"n_candidates", c.n_candidates},
        {"strategy", to_string(c.strategy)},
        {"K", c.planning_K},
        {"features", c.planning_features},
        {"include_x0_noise", c.include_x0_noise},
        {"safe_random_baseline", c.safe_random_baseline},
        {"integrator", integrator_to_json(c.sampling_integrator)}}},
      {"train",
       {{"iterations", c.train.iterations},
        {"learning_rate", c.train.learning_rate},
        {"final_lr_fraction", c.train.final_lr_fraction},
        {"factor_step_scale", c.train.factor_step_scale},
        {"K_train", c.train.K_train},
        {"features", c.train.elbo.features},
        {"rk4_step", c.train.elbo.rk4_step},
        {"sigma_trainable", c.train.sigma_trainable},
        {"hypers_trainable", c.train.hypers_trainable}}},
      {"model",
       {{"num_inducing", c.model.num_inducing},
        {"lengthscale_fraction", c.model.lengthscale_fraction},
        {"signal_variance", c.model.signal_variance},
        {"x0_std", c.model.x0_std}}},
      {"metrics",
       {{"validation_episodes", c.metrics.validation_episodes},
        {"validation_grid", c.metrics.validation_grid},
        {"validation_seed", c.metrics.validation_seed},
        {"nll_K", c.metrics.nll_K},
        {"f1_grid", c.metrics.f1_grid},
        {"f1_K", c.metrics.f1_K},
        {"features", c.metrics.features},
        {"integrator", integrator_to_json(c.metrics.integrator)}}},
  };
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  json doc = json::parse(is, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return config_from_json(doc);
}

PlannerConfig planner_config(const ExperimentConfig& c, const SystemSpec& system) {
  PlannerConfig p;
  p.domain = system.theta;
  p.safety = system.safety;
  p.delta = c.delta;
  p.n_candidates = c.n_candidates;
  p.strategy = c.strategy;
  p.sampling.K = c.planning_K;
  p.sampling.features = c.planning_features;
  p.sampling.include_x0_noise = c.include_x0_noise;
  p.sampling.integrator = c.sampling_integrator;
  return p;
}

// ---------------------------------------------------------------------------
// Metrics CSV

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const char* column) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw SchemaError(std::string("metrics CSV: bad value '") + s + "' in column " + column);
  }
}

}  // namespace

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
  os << kMetricsHeader << '\n';
  for (const auto& r : records) {
    os << r.seed << ',' << r.budget << ',' << to_string(r.method) << ',' << to_string(r.acquisition) << ','
       << fmt_double(r.nll) << ',' << fmt_double(r.f1) << ',';
    for (int e = 0; e < 2; ++e) {
      if (r.theta && e < r.theta->size()) os << fmt_double((*r.theta)[e]);
      os << ',';
    }
    if (r.xi_est) os << fmt_double(*r.xi_est);
    os << ',';
    if (r.truly_safe) os << (*r.truly_safe ? 1 : 0);
    os << ',' << fmt_double(r.seconds) << '\n';
  }
}

void save_metrics(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_metrics_csv(os, records);
}

std::vector<MetricsRecord> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw SchemaError("metrics CSV: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw SchemaError("metrics CSV: unexpected header '" + line + "'");
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != 11) throw SchemaError("metrics CSV: expected 11 columns in '" + line + "'");
    MetricsRecord r;
    try {
      r.seed = std::stoull(f[0]);
      r.budget = std::stoi(f[1]);
      r.method = method_from_string(f[2]);
      r.acquisition = acquisition_from_string(f[3]);
    } catch (const std::exception& e) {
      throw SchemaError(std::string("metrics CSV: bad key columns: ") + e.what());
    }
    r.nll = parse_double(f[4], "nll");
    r.f1 = parse_double(f[5], "f1");
    if (!f[6].empty() || !f[7].empty()) {
      Vec t(2);
      t[0] = parse_double(f[6], "theta_0");
      t[1] = parse_double(f[7], "theta_1");
      r.theta = t;
    }
    if (!f[8].empty()) r.xi_est = parse_double(f[8], "xi_est");
    if (!f[9].empty()) {
      if (f[9] != "0" && f[9] != "1") throw SchemaError("metrics CSV: truly_safe must be 0 or 1");
      r.truly_safe = f[9] == "1";
    }
    r.seconds = parse_double(f[10], "seconds");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<MetricsRecord> load_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw SchemaError("cannot open " + path.string());
  return read_metrics_csv(is);
}

// ---------------------------------------------------------------------------
// Metrics

std::vector<Vec> box_grid(const Box& box, int n) {
  if (n < 1) throw ContractViolation("box_grid: n must be >= 1");
  const Eigen::Index d = box.dim();
  std::size_t total = 1;
  for (Eigen::Index e = 0; e < d; ++e) total *= static_cast<std::size_t>(n);
  std::vector<Vec> out;
  out.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    Vec x(d);
    std::size_t rem = i;
    for (Eigen::Index e = 0; e < d; ++e) {
      const auto k = static_cast<double>(rem % static_cast<std::size_t>(n));
      rem /= static_cast<std::size_t>(n);
      x[e] = n == 1 ? box.center()[e] : box.lo[e] + k / (n - 1) * (box.hi[e] - box.lo[e]);
    }
    out.push_back(std::move(x));
  }
  return out;
}

Dataset make_validation_set(const SystemSpec& system, const MetricsSettings& settings) {
  // Cell centers keep the starts away from the box edges.
  const int g = settings.validation_grid;
  const Vec step = system.theta.width() / g;
  const Box inner(system.theta.lo + 0.5 * step, system.theta.hi - 0.5 * step);
  std::vector<Vec> safe;
  for (const auto& x : box_grid(inner, g))
    if (is_truly_safe(system, x)) safe.push_back(x);
  const std::size_t want = std::min<std::size_t>(safe.size(), static_cast<std::size_t>(settings.validation_episodes));
  Dataset out;
  const Rng base(settings.validation_seed);
  for (std::size_t i = 0; i < want; ++i) {
    const std::size_t idx = want == safe.size() ? i : (i * safe.size()) / want;
    Rng rng = base.split(idx);
    out.push_back(measure(system, safe[idx], rng));
  }
  return out;
}

double mixture_nll(std::span<const Trajectory> trajectories, const Mat& observations, const Vec& sigma) {
  const Eigen::Index N = observations.rows(), d = observations.cols();
  if (sigma.size() != d) throw ContractViolation("mixture_nll: sigma dimension");
  const double entries = static_cast<double>(N * d);
  const Eigen::ArrayXd inv_var = sigma.array().square().inverse();
  const double log_norm =
      -0.5 * static_cast<double>(N) * (static_cast<double>(d) * std::log(2.0 * M_PI) + 2.0 * sigma.array().log().sum());
  std::vector<double> logp;
  logp.reserve(trajectories.size());
  for (const auto& tr : trajectories) {
    if (!tr.ok()) continue;
    if (tr.states.rows() != N || tr.states.cols() != d) throw ContractViolation("mixture_nll: shape mismatch");
    const double q = ((observations - tr.states).array().square().rowwise() * inv_var.transpose()).sum();
    logp.push_back(log_norm - 0.5 * q);
  }
  if (logp.empty()) return 1e6 / entries;
  const double mx = *std::max_element(logp.begin(), logp.end());
  double s = 0.0;
  for (double v : logp) s += std::exp(v - mx);
  return -(mx + std::log(s) - std::log(static_cast<double>(logp.size()))) / entries;
}

double validation_nll(const GPODEModel& model, const Dataset& validation, int K, Rng& rng,
                      Eigen::Index features, const IntegratorConfig& integrator) {
  if (validation.empty()) throw ContractViolation("validation_nll: empty validation set");
  const auto draws = draw_posterior_functions(model, K, rng, features);
  std::vector<double> per_episode(validation.size());
  parallel_for(validation.size(), [&](std::size_t e) {
    const Episode& ep = validation[e];
    std::vector<Trajectory> trajs;
    trajs.reserve(draws.size());
    for (const auto& g : draws) trajs.push_back(rollout(g, ep.initial_choice, ep.times, integrator));
    per_episode[e] = mixture_nll(trajs, ep.observations, model.obs_noise);
  });
  double total = 0.0;
  for (double v : per_episode) total += v;
  return total / static_cast<double>(per_episode.size());
}

double f1_score(const Confusion& c) {
  const int denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * c.tp / static_cast<double>(denom);
}

F1Result f1_safe_set(const GPODEModel& model, const SystemSpec& system, const std::vector<Vec>& grid,
                     const std::vector<bool>& truth, double delta, const SamplingConfig& sampling,
                     Rng& rng) {
  if (truth.size() != grid.size()) throw ContractViolation("f1_safe_set: truth/grid size mismatch");
  const auto draws = draw_posterior_functions(model, sampling.K, rng, sampling.features);
  const auto schedule = system.schedule();
  const Rng noise = rng.split(11);
  std::vector<char> predicted(grid.size());
  parallel_for(grid.size(), [&](std::size_t i) {
    Rng local = noise.split(i);
    std::vector<Trajectory> trajs;
    trajs.reserve(draws.size());
    for (const auto& g : draws) {
      Vec start = grid[i];
      if (sampling.include_x0_noise) start += model.x0_std * local.normal_vector(start.size());
      trajs.push_back(rollout(g, start, schedule, sampling.integrator));
    }
    predicted[i] = safety_probability(trajs, system.safety) >= delta;
  });
  F1Result r;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const bool p = predicted[i] != 0, t = truth[i];
    if (p && t) ++r.confusion.tp;
    else if (p && !t) ++r.confusion.fp;
    else if (!p && t) ++r.confusion.fn;
    else ++r.confusion.tn;
  }
  r.f1 = f1_score(r.confusion);
  return r;
}

F1Result f1_safe_set(const GPODEModel& model, const SystemSpec& system, const std::vector<Vec>& grid,
                     double delta, const SamplingConfig& sampling, Rng& rng) {
  std::vector<bool> truth(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) truth[i] = is_truly_safe(system, grid[i]);
  return f1_safe_set(model, system, grid, truth, delta, sampling, rng);
}

// ---------------------------------------------------------------------------
// Run state persistence

namespace {

json record_to_json(const MetricsRecord& r) {
  json j = {{"seed", r.seed},   {"budget", r.budget}, {"method", to_string(r.method)},
            {"acquisition", to_string(r.acquisition)},
            {"nll", r.nll},     {"f1", r.f1},         {"seconds", r.seconds}};
  if (r.theta) j["theta"] = std::vector<double>(r.theta->data(), r.theta->data() + r.theta->size());
  if (r.xi_est) j["xi_est"] = *r.xi_est;
  if (r.truly_safe) j["truly_safe"] = *r.truly_safe;
  return j;
}

MetricsRecord record_from_json(const json& j) {
  MetricsRecord r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.budget = j.at("budget").get<int>();
  r.method = method_from_string(j.at("method").get<std::string>());
  r.acquisition = acquisition_from_string(j.at("acquisition").get<std::string>());
  r.nll = j.at("nll").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.seconds = j.at("seconds").get<double>();
  if (j.contains("theta")) {
    const auto v = j.at("theta").get<std::vector<double>>();
    r.theta = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (j.contains("xi_est")) r.xi_est = j.at("xi_est").get<double>();
  if (j.contains("truly_safe")) r.truly_safe = j.at("truly_safe").get<bool>();
  return r;
}

}  // namespace

json run_state_to_json(const RunState& s) {
  json episodes = json::array();
  for (const auto& e : s.episodes) episodes.push_back(episode_to_json(e));
  json records = json::array();
  for (const auto& r : s.records) records.push_back(record_to_json(r));
  return {{"schema_version", kRunStateSchemaVersion},
          {"kind", "sal_run_state"},
          {"config", config_to_json(s.config)},
          {"seed", s.seed},
          {"method", to_string(s.method)},
          {"next_round", s.next_round},
          {"skipped_rounds", s.skipped_rounds},
          {"episodes", std::move(episodes)},
          {"model", model_to_json(s.model)},
          {"records", std::move(records)}};
}

RunState run_state_from_json(const json& j) {
  if (!j.is_object() || !j.contains("schema_version")) throw SchemaError("run state: missing schema_version");
  try {
    if (j.at("schema_version").get<int>() != kRunStateSchemaVersion)
      throw SchemaError("run state: unsupported schema_version " + j.at("schema_version").dump());
    if (j.value("kind", std::string()) != "sal_run_state") throw SchemaError("run state: wrong document kind");
    RunState s;
    s.config = config_from_json(j.at("config"));
    s.seed = j.at("seed").get<std::uint64_t>();
    s.method = method_from_string(j.at("method").get<std::string>());
    s.next_round = j.at("next_round").get<int>();
    s.skipped_rounds = j.at("skipped_rounds").get<int>();
    for (const auto& e : j.at("episodes")) s.episodes.push_back(episode_from_json(e));
    s.model = model_from_json(j.at("model"));
    for (const auto& r : j.at("records")) s.records.push_back(record_from_json(r));
    if (s.next_round < 0 || s.next_round > s.config.M + 1) throw SchemaError("run state: bad next_round");
    return s;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("run state: ") + e.what());
  } catch (const ConfigError& e) {
    throw SchemaError(std::string("run state: ") + e.what());
  }
}

void save_run_state(const std::filesystem::path& path, const RunState& state) {
  // Write-then-rename so a crash never leaves a truncated state file behind.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << run_state_to_json(state).dump(1) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

RunState load_run_state(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw SchemaError("cannot open " + path.string());
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) throw SchemaError("run state: not valid JSON: " + path.string());
  return run_state_from_json(j);
}

// ---------------------------------------------------------------------------
// Loops

namespace {

Box model_region(const SystemSpec& system) {
  if (system.safety.x_min.allFinite() && system.safety.x_max.allFinite())
    return Box(system.safety.x_min, system.safety.x_max);
  return system.theta;
}

struct LoopContext {
  SystemSpec system;
  Dataset validation;
  std::vector<Vec> f1_grid;
  std::vector<bool> f1_truth;
  std::vector<double> schedule;
  PlannerConfig planner;
  SamplingConfig f1_sampling;
  Vec initial_obs_noise;
};

LoopContext make_context(const ExperimentConfig& c) {
  LoopContext ctx;
  ctx.system = make_system(c.system);
  ctx.validation = make_validation_set(ctx.system, c.metrics);
  ctx.f1_grid = box_grid(ctx.system.theta, c.metrics.f1_grid);
  for (const auto& x : ctx.f1_grid) ctx.f1_truth.push_back(is_truly_safe(ctx.system, x));
  ctx.schedule = ctx.system.schedule();
  ctx.planner = planner_config(c, ctx.system);
  ctx.f1_sampling.K = c.metrics.f1_K;
  ctx.f1_sampling.features = c.metrics.features;
  ctx.f1_sampling.integrator = c.metrics.integrator;
  ctx.f1_sampling.include_x0_noise = false;
  ctx.initial_obs_noise = Vec::Constant(ctx.system.dim(), ctx.system.obs_noise);
  return ctx;
}

void log_line(const RunOptions& o, const std::string& s) {
  if (o.log) o.log(s);
}

RunResult loop_from(RunState state, const RunOptions& options) {
  const ExperimentConfig& c = state.config;
  const LoopContext ctx = make_context(c);
  const Rng base(state.seed);

  for (int r = state.next_round; r <= c.M; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const Rng round_rng = base.split(1000 + static_cast<std::uint64_t>(r));

    auto lap = [last = t0]() mutable {
      const auto now = std::chrono::steady_clock::now();
      const double dt = std::chrono::duration<double>(now - last).count();
      last = now;
      return dt;
    };
    double t_train = 0, t_nll = 0, t_f1 = 0;

    // sigma restarts from its initial value each round; carried over, it only
    // ratchets upward as the previous fit's residuals feed the next smoothing.
    state.model.obs_noise = ctx.initial_obs_noise;
    initialize_from_data(state.model, state.episodes, r == 0);
    TrainConfig tc = c.train;
    tc.seed = round_rng.split(0).seed();
    state.model = train(state.model, state.episodes, tc).model;
    t_train = lap();

    MetricsRecord rec;
    rec.seed = state.seed;
    rec.budget = r;
    rec.method = state.method;
    rec.acquisition = c.acquisition;
    Rng nll_rng = round_rng.split(1);
    rec.nll = validation_nll(state.model, ctx.validation, c.metrics.nll_K, nll_rng, c.metrics.features,
                             c.metrics.integrator);
    t_nll = lap();
    Rng f1_rng = round_rng.split(2);
    rec.f1 = f1_safe_set(state.model, ctx.system, ctx.f1_grid, ctx.f1_truth, c.delta, ctx.f1_sampling, f1_rng).f1;
    t_f1 = lap();

    if (r < c.M) {
      std::optional<Vec> theta;
      if (state.method == Method::sal) {
        Rng plan_rng = round_rng.split(3);
        try {
          const auto plan = propose(state.model, ctx.schedule, ctx.planner, c.acquisition, plan_rng);
          theta = plan.chosen;
          rec.xi_est = plan.xi;
        } catch (const NoFeasibleCandidate& e) {
          log_line(options, "round " + std::to_string(r) + ": " + e.what() + "; retrying with 4x candidates");
          PlannerConfig wide = ctx.planner;
          wide.n_candidates *= 4;
          Rng retry_rng = round_rng.split(5);
          try {
            const auto plan = propose(state.model, ctx.schedule, wide, c.acquisition, retry_rng);
            theta = plan.chosen;
            rec.xi_est = plan.xi;
          } catch (const NoFeasibleCandidate& e2) {
            log_line(options, "round " + std::to_string(r) + ": skipped (" + e2.what() + ")");
          }
        }
      } else {
        Rng pick_rng = round_rng.split(3);
        theta = random_baseline_propose(ctx.system.theta, pick_rng);
        if (c.safe_random_baseline) {
          for (int tries = 0; tries < 1000 && !is_truly_safe(ctx.system, *theta); ++tries)
            theta = random_baseline_propose(ctx.system.theta, pick_rng);
        }
      }
      if (theta) {
        rec.theta = theta;
        rec.truly_safe = is_truly_safe(ctx.system, *theta);
        Rng measure_rng = round_rng.split(4);
        try {
          state.episodes.push_back(measure(ctx.system, *theta, measure_rng));
        } catch (const NumericalError& e) {
          log_line(options, "round " + std::to_string(r) + ": measurement failed: " + e.what());
          ++state.skipped_rounds;
        }
      } else {
        ++state.skipped_rounds;
      }
    }

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.seconds = c.record_wall_clock ? secs : 0.0;
    state.records.push_back(rec);
    {
      std::ostringstream msg;
      msg << to_string(state.method) << " seed " << state.seed << " budget " << r << ": nll " << rec.nll
          << " f1 " << rec.f1 << " (" << secs << " s: train " << t_train << ", nll " << t_nll << ", f1 " << t_f1
          << ", plan+measure " << lap() << ")";
      log_line(options, msg.str());
    }
    state.next_round = r + 1;
    if (options.on_round) options.on_round(state);
    if (options.stop_after_round && state.next_round >= *options.stop_after_round) break;
  }

  RunResult out;
  out.records = std::move(state.records);
  out.model = std::move(state.model);
  out.episodes = std::move(state.episodes);
  out.skipped_rounds = state.skipped_rounds;
  return out;
}

}  // namespace

RunResult run_loop(const ExperimentConfig& config, std::uint64_t seed, const RunOptions& options) {
  config.validate();
  const SystemSpec system = make_system(config.system);
  RunState state;
  state.config = config;
  state.seed = seed;
  state.method = config.method;
  Rng init_rng = Rng(seed).split(1);
  state.episodes.push_back(measure(system, system.initial_state, init_rng));
  state.model = make_model(model_region(system), Vec::Constant(system.dim(), system.obs_noise), config.model, seed);
  return loop_from(std::move(state), options);
}

RunResult resume_loop(const RunState& state, const RunOptions& options) {
  state.config.validate();
  return loop_from(state, options);
}

RunResult run_sal_loop(ExperimentConfig config, std::uint64_t seed, const RunOptions& options) {
  config.method = Method::sal;
  return run_loop(config, seed, options);
}

RunResult run_random_loop(ExperimentConfig config, std::uint64_t seed, const RunOptions& options) {
  config.method = Method::random;
  return run_loop(config, seed, options);
}

// ---------------------------------------------------------------------------
// Aggregation

std::vector<SummaryRow> aggregate(const std::vector<MetricsRecord>& records) {
  using Key = std::tuple<int, int, int>;
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& r : records) {
    auto& g = groups[Key{static_cast<int>(r.method), static_cast<int>(r.acquisition), r.budget}];
    g.first.push_back(r.nll);
    g.second.push_back(r.f1);
  }
  auto stats = [](std::vector<double> v, double& mean, double& sd) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    mean = s / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  std::vector<SummaryRow> out;
  for (const auto& [key, g] : groups) {
    SummaryRow row;
    row.method = static_cast<Method>(std::get<0>(key));
    row.acquisition = static_cast<AcquisitionKind>(std::get<1>(key));
    row.budget = std::get<2>(key);
    row.n_seeds = static_cast<int>(g.first.size());
    stats(g.first, row.nll_mean, row.nll_std);
    stats(g.second, row.f1_mean, row.f1_std);
    row.nll_lo = row.nll_mean - 2.0 * row.nll_std;
    row.nll_hi = row.nll_mean + 2.0 * row.nll_std;
    row.f1_lo = row.f1_mean - 2.0 * row.f1_std;
    row.f1_hi = row.f1_mean + 2.0 * row.f1_std;
    out.push_back(row);
  }
  return out;
}

void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << kSummaryHeader << '\n';
  for (const auto& r : rows) {
    os << to_string(r.method) << ',' << to_string(r.acquisition) << ',' << r.budget << ',' << r.n_seeds << ','
       << fmt_double(r.nll_mean) << ',' << fmt_double(r.nll_std) << ',' << fmt_double(r.nll_lo) << ','
       << fmt_double(r.nll_hi) << ',' << fmt_double(r.f1_mean) << ',' << fmt_double(r.f1_std) << ','
       << fmt_double(r.f1_lo) << ',' << fmt_double(r.f1_hi) << '\n';
  }
}

}  // namespace salgpode
