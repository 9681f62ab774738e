// salgpode: run, evaluate and aggregate safe active learning experiments.

#include "salgpode/errors.hpp"
#include "salgpode/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace salgpode;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, numerical_failure = 3 };

std::string run_stem(const ExperimentConfig& c, std::uint64_t seed) {
  return c.system + "_" + to_string(c.method) + "_" + to_string(c.acquisition) + "_seed" + std::to_string(seed);
}

void log_stderr(const std::string& s) { std::cerr << s << std::endl; }

int cmd_run(const std::string& config_path, const std::string& method, const std::string& acquisition,
            const std::string& output_dir, const std::vector<std::uint64_t>& seeds) {
  ExperimentConfig config = load_config(config_path);
  if (!method.empty()) config.method = method_from_string(method);
  if (!acquisition.empty()) config.acquisition = acquisition_from_string(acquisition);
  if (!output_dir.empty()) config.output_dir = output_dir;
  if (!seeds.empty()) config.seeds = seeds;
  config.validate();

  const fs::path out(config.output_dir);
  fs::create_directories(out);
  for (std::uint64_t seed : config.seeds) {
    const std::string stem = run_stem(config, seed);
    const fs::path state_path = out / (stem + ".state.json");
    RunOptions options;
    options.log = log_stderr;
    options.on_round = [&](const RunState& s) {
      save_run_state(state_path, s);
      save_metrics(out / (stem + ".csv"), s.records);
    };
    RunResult result;
    if (fs::exists(state_path)) {
      RunState state = load_run_state(state_path);
      if (config_to_json(state.config) != config_to_json(config) || state.seed != seed)
        throw ConfigError("existing run state " + state_path.string() + " was written by a different config");
      log_stderr("resuming " + stem + " at round " + std::to_string(state.next_round));
      result = resume_loop(state, options);
    } else {
      result = run_loop(config, seed, options);
    }
    save_model(result.model, out / (stem + ".model.json"));
    std::cout << (out / (stem + ".csv")).string() << '\n';
  }
  return ok;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& system_name, const std::string& config_path) {
  ExperimentConfig config = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
  std::ifstream is(checkpoint);
  if (!is) throw SchemaError("cannot open " + checkpoint);
  const auto doc = nlohmann::json::parse(is, nullptr, false);
  if (doc.is_discarded()) throw SchemaError("checkpoint is not valid JSON: " + checkpoint);
  GPODEModel model;
  if (doc.value("kind", std::string()) == "sal_run_state") {
    const RunState state = run_state_from_json(doc);
    model = state.model;
    if (config_path.empty()) config = state.config;
  } else {
    model = model_from_json(doc);
  }
  if (!system_name.empty()) config.system = system_name;
  const SystemSpec system = make_system(config.system);
  if (system.dim() != model.state_dim()) throw ConfigError("checkpoint dimension does not match system " + system.name);

  const Dataset validation = make_validation_set(system, config.metrics);
  const Rng rng(model.seed);
  Rng nll_rng = rng.split(1), f1_rng = rng.split(2);
  const double nll = validation_nll(model, validation, config.metrics.nll_K, nll_rng, config.metrics.features,
                                    config.metrics.integrator);
  SamplingConfig sampling;
  sampling.K = config.metrics.f1_K;
  sampling.features = config.metrics.features;
  sampling.integrator = config.metrics.integrator;
  const auto f1 = f1_safe_set(model, system, box_grid(system.theta, config.metrics.f1_grid), config.delta, sampling,
                              f1_rng);
  nlohmann::json report = {{"system", system.name},
                           {"nll", nll},
                           {"f1", f1.f1},
                           {"tp", f1.confusion.tp},
                           {"fp", f1.confusion.fp},
                           {"fn", f1.confusion.fn},
                           {"tn", f1.confusion.tn}};
  std::cout << report.dump(2) << '\n';
  return ok;
}

int cmd_aggregate(const std::string& input, const std::string& output) {
  if (!fs::is_directory(input)) throw ConfigError("input is not a directory: " + input);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(input))
    if (entry.is_regular_file() && entry.path().extension() == ".csv" &&
        !(fs::exists(output) && fs::equivalent(entry.path(), output)))
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<MetricsRecord> records;
  for (const auto& f : files) {
    std::ifstream is(f);
    std::string header;
    std::getline(is, header);
    if (header != kMetricsHeader) continue;  // not a metrics table
    auto part = load_metrics(f);
    records.insert(records.end(), part.begin(), part.end());
  }
  if (records.empty()) throw SchemaError("no metrics rows found in " + input);
  const auto rows = aggregate(records);
  std::ofstream os(output);
  if (!os) throw ConfigError("cannot write " + output);
  write_summary_csv(os, rows);
  std::cerr << "aggregated " << records.size() << " rows from " << files.size() << " files\n";
  return ok;
}

int cmd_list_systems() {
  for (const auto& name : system_names()) {
    const SystemSpec s = make_system(name);
    std::cout << name << "\tdim=" << s.dim() << " T=" << s.horizon << " N=" << s.n_obs
              << " sigma=" << s.obs_noise << '\n';
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Safe active learning for GP-ODE models"};
  app.require_subcommand(1);

  std::string config_path, method, acquisition, output_dir;
  std::vector<std::uint64_t> seeds;
  auto* run = app.add_subcommand("run", "Run the measure-train-plan loop for every configured seed");
  run->add_option("--config", config_path, "JSON experiment config")->required();
  run->add_option("--method", method, "sal or random")->check(CLI::IsMember({"sal", "random"}));
  run->add_option("--acquisition", acquisition, "entropy or covariance")
      ->check(CLI::IsMember({"entropy", "covariance", "covariance-logdet", "mutual-information"}));
  run->add_option("--output-dir", output_dir, "Overrides output_dir from the config");
  run->add_option("--seeds", seeds, "Overrides the seed list from the config");

  std::string checkpoint, system_name, eval_config;
  auto* evaluate = app.add_subcommand("evaluate", "Validation NLL and safe-set F1 of a checkpoint");
  evaluate->add_option("--checkpoint", checkpoint, "Model checkpoint or run state")->required();
  evaluate->add_option("--system", system_name, "System name (default: from the run state, else vdp)");
  evaluate->add_option("--config", eval_config, "Config supplying metric settings");

  std::string input, output;
  auto* agg = app.add_subcommand("aggregate", "Summarize metrics CSVs across seeds");
  agg->add_option("--input", input, "Directory of metrics CSVs")->required();
  agg->add_option("--output", output, "Summary CSV path")->required();

  auto* list = app.add_subcommand("list-systems", "Print the registered systems");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (run->parsed()) return cmd_run(config_path, method, acquisition, output_dir, seeds);
    if (evaluate->parsed()) return cmd_evaluate(checkpoint, system_name, eval_config);
    if (agg->parsed()) return cmd_aggregate(input, output);
    if (list->parsed()) return cmd_list_systems();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << '\n';
    return config_error;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical_failure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return failure;
  }
  return failure;
}
