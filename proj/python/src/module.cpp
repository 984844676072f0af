#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dra/analysis.hpp"
#include "dra/attacks.hpp"
#include "dra/errors.hpp"
#include "dra/pipeline.hpp"

namespace py = pybind11;
using namespace dra;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

pipeline::RunConfig parse_config(const std::string& text) { return pipeline::RunConfig::from_json(json::parse(text)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of dra_toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);

  m.def("project_linf", [](const Array& candidate, const Array& anchor, double eps) {
    return to_array(attacks::project_linf(to_tensor(candidate), to_tensor(anchor), eps));
  });
  m.def("alignment", [](const Array& a, const Array& b) { return analysis::alignment_metric(to_tensor(a), to_tensor(b)); });
  m.def("uniformity", [](const Array& x, double t) { return analysis::uniformity_metric(to_tensor(x), t); },
        py::arg("x"), py::arg("t") = 2.0);
  m.def("cknna", [](const Array& a, const Array& b, int k) { return analysis::cknna(to_tensor(a), to_tensor(b), k); },
        py::arg("a"), py::arg("b"), py::arg("k") = 10);
  m.def("centered_dft_magnitude", [](const Array& img) { return to_array(analysis::centered_dft_magnitude(to_tensor(img))); });

  m.def("load_dataset", [](const std::string& id, const std::string& split, std::uint64_t seed, const std::string& cache_dir) {
    data::DatasetOptions opt;
    opt.cache_dir = cache_dir;
    const auto d = data::load_dataset(id, split == "test" ? data::Split::kTest : data::Split::kTrain, seed, opt);
    return py::make_tuple(to_array(d.examples.images), d.examples.labels);
  }, py::arg("id"), py::arg("split"), py::arg("seed") = 0, py::arg("cache_dir") = "dataset-cache");

  m.def("default_config", [] { return pipeline::RunConfig{}.to_json().dump(); });
  m.def("normalize_config", [](const std::string& text) { return parse_config(text).to_json().dump(); });
  m.def("apply_overrides", [](const std::string& text, const std::vector<std::string>& overrides) {
    json j = json::parse(text);
    pipeline::apply_overrides(j, overrides);
    return j.dump();
  });
  m.def("json_diff", [](const std::string& a, const std::string& b) { return pipeline::json_diff(json::parse(a), json::parse(b)); });

  m.def("run_pipeline", [](const std::string& text, bool force, const std::set<std::string>& stages) {
    pipeline::PipelineOptions opt;
    opt.force = force;
    opt.stage_kinds = stages;
    pipeline::PipelineResult r;
    {
      py::gil_scoped_release release;
      r = pipeline::run_pipeline(parse_config(text), opt);
    }
    py::dict out;
    out["run_dir"] = r.run_dir;
    out["executed"] = r.executed();
    out["skipped"] = r.skipped();
    return out;
  }, py::arg("config"), py::arg("force") = false, py::arg("stages") = std::set<std::string>{});

  m.def("emit_report", [](const std::filesystem::path& run_dir) {
    const auto s = pipeline::emit_report(run_dir);
    py::dict out;
    out["files"] = s.files;
    out["notices"] = s.notices;
    return out;
  });
}
