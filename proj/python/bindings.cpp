#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dia/engine.hpp"
#include "dia/estimators.hpp"
#include "dia/errors.hpp"
#include "dia/harness.hpp"
#include "dia/io.hpp"
#include "dia/oracle.hpp"
#include "dia/policy.hpp"
#include "dia/sim.hpp"

namespace py = pybind11;
using namespace dia;

namespace {

Json parse_json(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
}

ExperimentConfig parse_config(const std::string& text) { return experiment_config_from_json(parse_json(text)); }

Policy fixed_policy(const Vec& probs) {
  Vec l(probs.size());
  for (Eigen::Index i = 0; i < probs.size(); ++i) l[i] = std::log(probs[i]);
  return Policy::softmax(l);
}

// Columns of a dataset as a dict of arrays; covariates as an (n, d) matrix.
py::dict dataset_dict(const Dataset& d) {
  const auto n = static_cast<Eigen::Index>(d.size());
  const Eigen::Index dim = n ? d[0].x.size() : 0;
  Eigen::VectorXi z(n), pid(n);
  Vec a(n), y(n), prop(n);
  Mat x(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    z[i] = d[i].z;
    a[i] = d[i].a;
    y[i] = d[i].y;
    pid[i] = d[i].policy_id;
    prop[i] = d[i].logged_propensity;
    if (dim) x.row(i) = d[i].x.transpose();
  }
  py::dict out;
  out["x"] = x;
  out["z"] = z;
  out["a"] = a;
  out["y"] = y;
  out["policy_id"] = pid;
  out["logged_propensity"] = prop;
  return out;
}

}  // namespace

PYBIND11_MODULE(_dia, m) {
  m.doc() = "Adaptive instrument design for indirect experiments";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<RankDeficientError>(m, "RankDeficientError", PyExc_ArithmeticError);

  m.def(
      "validate_config", [](const std::string& text) { parse_config(text).validate(); },
      py::arg("config_json"), "Raise ConfigError if the experiment config is invalid.");

  m.def(
      "run_experiment",
      [](const std::string& text, const std::filesystem::path& out) {
        ExperimentConfig cfg = parse_config(text);
        py::gil_scoped_release nogil;
        return run_experiment(cfg, out);
      },
      py::arg("config_json"), py::arg("out_dir"), "Run an experiment and return the written CSV paths.");

  m.def(
      "sample",
      [](const std::string& dgp_json, const Vec& probs, int n, std::uint64_t seed) {
        DgpInstance dgp = make_dgp(dgp_config_from_json(parse_json(dgp_json)), seed);
        PolicyRegistry reg;
        int id = reg.add(fixed_policy(probs), n);
        return dataset_dict(sample_batch(dgp, reg, id, n, Rng(seed).split(1)));
      },
      py::arg("dgp_json"), py::arg("probs"), py::arg("n"), py::arg("seed") = 0,
      "Draw n samples with a fixed instrument distribution.");

  m.def(
      "fit_mse",
      [](const std::string& dgp_json, const Vec& probs, int n, std::uint64_t seed) {
        DgpInstance dgp = make_dgp(dgp_config_from_json(parse_json(dgp_json)), seed);
        PolicyRegistry reg;
        int id = reg.add(fixed_policy(probs), n);
        Dataset d = sample_batch(dgp, reg, id, n, Rng(seed).split(1));
        EstimatorState st = fit_estimator(default_estimator(dgp), d);
        return py::make_tuple(st.theta, true_mse(dgp, st, dgp.eval_set()));
      },
      py::arg("dgp_json"), py::arg("probs"), py::arg("n"), py::arg("seed") = 0,
      "Sample, fit the domain's default estimator, return (theta, true MSE).");

  m.def(
      "linear_asymptotics",
      [](const Mat& V, const Mat& J, const Mat& Sigma) {
        LinearAsymptotics a = linear_asymptotics({V, J, Sigma});
        return py::make_tuple(a.scaled_mean, a.scaled_variance);
      },
      py::arg("V"), py::arg("J"), py::arg("Sigma"),
      "Limits of n*E[MSE] and n^2*Var[MSE] for the linear two-stage estimator.");
  m.def("binary_instrument_objective", &binary_instrument_objective, py::arg("p"), py::arg("sigma0_sq"),
        py::arg("sigma1_sq"));
  m.def("binary_instrument_argmin", &binary_instrument_argmin, py::arg("sigma0_sq"), py::arg("sigma1_sq"));
  m.def("config_hash", [](const std::string& text) { return config_hash(parse_json(text)); },
        py::arg("json_text"));
}
