// Thin Python surface over the core: configs travel as JSON text, results
// come back as dicts via the json module on the Python side.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "coopclass/error.hpp"
#include "coopclass/metrics.hpp"
#include "coopclass/noise_model.hpp"
#include "coopclass/onboarding.hpp"
#include "coopclass/pipeline.hpp"
#include "coopclass/simulation.hpp"

namespace py = pybind11;
using namespace coopclass;

namespace {

PipelineConfig config_from(const std::string& text) {
  return text.empty() ? PipelineConfig{} : PipelineConfig::from_json(nlohmann::json::parse(text));
}

}  // namespace

PYBIND11_MODULE(_coopclass, m) {
  m.doc() = "Learning-to-complement pipeline core";

  static py::exception<Error> error_type(m, "CoopclassError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = error_type;
      py::object inst = err(e.what());
      inst.attr("kind") = std::string(to_string(e.kind()));
      PyErr_SetObject(error_type.ptr(), inst.ptr());
    }
  });

  m.def("default_config_json", [] { return PipelineConfig{}.to_json().dump(); });
  m.def(
      "config_hash", [](const std::string& text) { return config_from(text).hash(); }, py::arg("config_json"));
  m.def(
      "apply_ablation",
      [](const std::string& text, const std::string& knob, const std::string& value) {
        return apply_ablation(config_from(text), knob, value).to_json().dump();
      },
      py::arg("config_json"), py::arg("knob"), py::arg("value"));
  m.def(
      "run_pipeline",
      [](const std::string& text, const std::filesystem::path& out, const std::string& until) {
        const auto config = config_from(text);
        config.validate();
        RunManifest manifest;
        {
          py::gil_scoped_release release;
          manifest = run_pipeline(config, out, parse_stage(until));
        }
        return manifest.to_json().dump();
      },
      py::arg("config_json"), py::arg("output_dir"), py::arg("until") = "evaluate");
  m.def(
      "load_aggregate", [](const std::filesystem::path& dir) { return load_aggregate(dir).dump(); }, py::arg("output_dir"));

  m.def(
      "alteration_metrics",
      [](const std::vector<int>& clean, const std::vector<int>& user, const std::vector<int>& coop) {
        return alteration_metrics(clean, user, coop).to_json().dump();
      },
      py::arg("clean"), py::arg("user"), py::arg("cooperative"));
  m.def(
      "joint_decision_table",
      [](const std::vector<int>& clean, const std::vector<int>& user, const std::vector<int>& base,
         const std::vector<int>& coop) { return joint_decision_table(clean, user, base, coop).counts; },
      py::arg("clean"), py::arg("user"), py::arg("base"), py::arg("cooperative"));
  m.def("entry_condition", &entry_condition, py::arg("base_accuracy"), py::arg("user_accuracy"));

  m.def(
      "flip_matrix",
      [](int classes, int a, int b, double rate) {
        FlipProfileSpec p;
        p.class_a = a;
        p.class_b = b;
        p.flip_rate = rate;
        return flip_matrix(classes, p).probabilities;
      },
      py::arg("classes"), py::arg("class_a"), py::arg("class_b"), py::arg("flip_rate"));
  m.def(
      "estimate_transition_matrix",
      [](const std::vector<std::vector<int>>& by_class, int classes) {
        return estimate_transition_matrix(by_class, classes).probabilities;
      },
      py::arg("labels_by_class"), py::arg("classes"));
}
