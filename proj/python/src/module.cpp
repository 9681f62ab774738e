#include "salgpode/acquisition.hpp"
#include "salgpode/errors.hpp"
#include "salgpode/gpode_model.hpp"
#include "salgpode/harness.hpp"
#include "salgpode/kernel_gp.hpp"
#include "salgpode/ode.hpp"
#include "salgpode/planner.hpp"
#include "salgpode/simulators.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace salgpode;

namespace {

IntegratorConfig integrator(const std::string& method, double rtol, double atol, double fixed_step) {
  IntegratorConfig c;
  if (method == "rk4") c.method = IntegratorMethod::rk4_fixed;
  else if (method != "dopri45") throw ConfigError("integrator must be 'rk4' or 'dopri45'");
  c.rtol = rtol;
  c.atol = atol;
  c.fixed_step = fixed_step;
  return c;
}

// (K, N, d) array; diverged rows are NaN.
py::array_t<double> stack(const std::vector<Trajectory>& trajs) {
  const auto K = static_cast<py::ssize_t>(trajs.size());
  const py::ssize_t N = K ? trajs[0].states.rows() : 0, d = K ? trajs[0].states.cols() : 0;
  py::array_t<double> out({K, N, d});
  auto a = out.mutable_unchecked<3>();
  for (py::ssize_t k = 0; k < K; ++k)
    for (py::ssize_t n = 0; n < N; ++n)
      for (py::ssize_t j = 0; j < d; ++j) a(k, n, j) = trajs[k].states(n, j);
  return out;
}

std::vector<Trajectory> unstack(const py::array_t<double>& states, const std::vector<double>& times) {
  if (states.ndim() != 3) throw ContractViolation("trajectories must be a (K, N, d) array");
  const auto a = states.unchecked<3>();
  std::vector<Trajectory> out(a.shape(0));
  for (py::ssize_t k = 0; k < a.shape(0); ++k) {
    auto& t = out[k];
    t.times = times.empty() ? uniform_schedule(1.0, static_cast<int>(a.shape(1))) : times;
    t.states.resize(a.shape(1), a.shape(2));
    for (py::ssize_t n = 0; n < a.shape(1); ++n)
      for (py::ssize_t j = 0; j < a.shape(2); ++j) t.states(n, j) = a(k, n, j);
    t.x0 = t.states.row(0).transpose();
    if (!t.states.allFinite()) t.status = TrajectoryStatus::diverged;
  }
  return out;
}

py::dict record_dict(const MetricsRecord& r) {
  py::dict d;
  d["seed"] = r.seed;
  d["budget"] = r.budget;
  d["method"] = to_string(r.method);
  d["acquisition"] = to_string(r.acquisition);
  d["nll"] = r.nll;
  d["f1"] = r.f1;
  d["theta"] = r.theta ? py::cast(*r.theta) : py::none();
  d["xi_est"] = r.xi_est ? py::cast(*r.xi_est) : py::none();
  d["truly_safe"] = r.truly_safe ? py::cast(*r.truly_safe) : py::none();
  d["seconds"] = r.seconds;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Safe active learning of GP ODE models";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<SchemaError>(m, "SchemaError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);

  m.def("list_systems", &system_names);
  m.def(
      "system_info",
      [](const std::string& name) {
        const SystemSpec s = make_system(name);
        py::dict d;
        d["name"] = s.name;
        d["params"] = s.params;
        d["x_min"] = s.safety.x_min;
        d["x_max"] = s.safety.x_max;
        d["theta_lo"] = s.theta.lo;
        d["theta_hi"] = s.theta.hi;
        d["horizon"] = s.horizon;
        d["n_obs"] = s.n_obs;
        d["obs_noise"] = s.obs_noise;
        d["initial_state"] = s.initial_state;
        return d;
      },
      py::arg("name"));
  m.def(
      "measure",
      [](const std::string& name, const Vec& x0, std::uint64_t seed) {
        Rng rng(seed);
        const Episode e = measure(make_system(name), x0, rng);
        return py::make_tuple(e.times, e.observations);
      },
      py::arg("system"), py::arg("x0"), py::arg("seed") = 0,
      "Noisy observations (times, N x d) of the true system from x0.");
  m.def(
      "is_truly_safe", [](const std::string& name, const Vec& x0) { return is_truly_safe(make_system(name), x0); },
      py::arg("system"), py::arg("x0"));

  m.def(
      "integrate",
      [](const std::function<Vec(const Vec&)>& rhs, const Vec& x0, const std::vector<double>& times,
         const std::string& method, double rtol, double atol, double fixed_step) {
        const auto t = integrate(rhs, x0, times, integrator(method, rtol, atol, fixed_step));
        return t.states;
      },
      py::arg("rhs"), py::arg("x0"), py::arg("times"), py::arg("method") = "dopri45", py::arg("rtol") = 1e-6,
      py::arg("atol") = 1e-8, py::arg("fixed_step") = 0.05);

  m.def(
      "gram",
      [](const Vec& lengthscales, double signal_variance, const Mat& X, const Mat& X2) {
        return gram(RbfKernel(lengthscales, signal_variance), X, X2);
      },
      py::arg("lengthscales"), py::arg("signal_variance"), py::arg("X"), py::arg("X2"));

  m.def(
      "entropy",
      [](const py::array_t<double>& trajectories, const py::array_t<double>& observations, const Vec& sigma) {
        const auto t = unstack(trajectories, {});
        std::vector<Mat> obs;
        for (const auto& o : unstack(observations, {})) obs.push_back(o.states);
        return entropy_acquisition(t, obs, sigma);
      },
      py::arg("trajectories"), py::arg("observations"), py::arg("sigma"),
      "Monte-Carlo marginal entropy from (K, N, d) samples and matching noisy observations.");
  m.def(
      "covariance_score",
      [](const py::array_t<double>& trajectories, bool log_det) {
        return covariance_acquisition(unstack(trajectories, {}),
                                      log_det ? CovarianceScalarization::log_det : CovarianceScalarization::trace);
      },
      py::arg("trajectories"), py::arg("log_det") = false);
  m.def(
      "safety_probability",
      [](const py::array_t<double>& trajectories, const Vec& x_min, const Vec& x_max) {
        return safety_probability(unstack(trajectories, {}), SafetyBounds(x_min, x_max));
      },
      py::arg("trajectories"), py::arg("x_min"), py::arg("x_max"));
  m.def("conditional_entropy_constant",
        py::overload_cast<double, Eigen::Index, Eigen::Index>(&conditional_entropy_constant), py::arg("sigma"),
        py::arg("N"), py::arg("d"));

  py::class_<GPODEModel>(m, "Model")
      .def_static("load", &load_model, py::arg("path"))
      .def_static("from_json", [](const std::string& s) { return model_from_json(nlohmann::json::parse(s)); })
      .def("save", [](const GPODEModel& self, const std::filesystem::path& p) { save_model(self, p); })
      .def("to_json", [](const GPODEModel& self) { return model_to_json(self).dump(); })
      .def_property_readonly("state_dim", &GPODEModel::state_dim)
      .def_property_readonly("num_inducing", &GPODEModel::num_inducing)
      .def_property_readonly("lengthscales", [](const GPODEModel& self) { return self.kernel.lengthscales; })
      .def_property_readonly("signal_variance", [](const GPODEModel& self) { return self.kernel.signal_variance; })
      .def_property_readonly("obs_noise", [](const GPODEModel& self) { return self.obs_noise; })
      .def(
          "predict",
          [](const GPODEModel& self, const Vec& x0, const std::vector<double>& times, int K, std::uint64_t seed,
             bool x0_noise) {
            Rng rng(seed);
            return stack(predict_trajectories(self, x0, times, K, rng, x0_noise));
          },
          py::arg("x0"), py::arg("times"), py::arg("K") = 32, py::arg("seed") = 0, py::arg("x0_noise") = false,
          "(K, N, d) posterior trajectory samples from x0.");

  m.def(
      "run",
      [](const std::string& config_json, std::uint64_t seed) {
        const ExperimentConfig config = config_from_json(nlohmann::json::parse(config_json));
        RunResult result;
        {
          py::gil_scoped_release release;
          result = run_loop(config, seed);
        }
        py::list records;
        for (const auto& r : result.records) records.append(record_dict(r));
        return py::make_tuple(records, result.model);
      },
      py::arg("config_json"), py::arg("seed"), "Runs one seed; returns (records, model).");
  m.def(
      "validate_config",
      [](const std::string& config_json) {
        return config_to_json(config_from_json(nlohmann::json::parse(config_json))).dump();
      },
      py::arg("config_json"), "Normalized config with all defaults filled in; raises ConfigError.");
  m.def(
      "read_metrics",
      [](const std::filesystem::path& path) {
        py::list out;
        for (const auto& r : load_metrics(path)) out.append(record_dict(r));
        return out;
      },
      py::arg("path"));
  m.def(
      "aggregate_csv",
      [](const std::vector<std::filesystem::path>& paths) {
        std::vector<MetricsRecord> all;
        for (const auto& p : paths) {
          auto rs = load_metrics(p);
          all.insert(all.end(), rs.begin(), rs.end());
        }
        std::ostringstream os;
        write_summary_csv(os, aggregate(all));
        return os.str();
      },
      py::arg("paths"), "Summary CSV text over the given metrics files.");
  m.attr("METRICS_HEADER") = kMetricsHeader;
  m.attr("SUMMARY_HEADER") = kSummaryHeader;
}
