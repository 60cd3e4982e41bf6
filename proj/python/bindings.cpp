#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "neurofuse/cli.hpp"
#include "neurofuse/config.hpp"
#include "neurofuse/connectivity.hpp"
#include "neurofuse/datagen.hpp"
#include "neurofuse/error.hpp"
#include "neurofuse/gradcheck.hpp"
#include "neurofuse/metrics.hpp"

namespace py = pybind11;
using namespace neurofuse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.ptr(), t.ptr() + t.numel(), out.mutable_data());
  return out;
}

nlohmann::json to_json(const py::dict& d) {
  py::module_ json = py::module_::import("json");
  return nlohmann::json::parse(py::str(json.attr("dumps")(d)).cast<std::string>());
}

py::object from_json(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

RunConfig resolved(const py::dict& d) {
  RunConfig c = parse_config(to_json(d));
  c.resolve();
  return c;
}

}  // namespace

PYBIND11_MODULE(_neurofuse, m) {
  m.doc() = "Bindings for the neurofuse C++ core";
  m.attr("__version__") = NEUROFUSE_VERSION;

  static py::handle error_type = py::exception<Error>(m, "NeurofuseError").release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type)(e.what());
      exc.attr("kind") = std::string(to_string(e.kind()));
      exc.attr("module") = e.module();
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  m.def("roc_auc", [](std::vector<double> scores, std::vector<int> labels) { return roc_auc(scores, labels); },
        py::arg("scores"), py::arg("labels"));
  m.def("pr_auc", [](std::vector<double> scores, std::vector<int> labels) { return pr_auc(scores, labels); },
        py::arg("scores"), py::arg("labels"));

  m.def("pearson_matrix", [](const Array& window) { return to_array(pearson_matrix(to_tensor(window))); });
  m.def("correlation_pvalues",
        [](const Array& r, std::size_t n) { return to_array(correlation_pvalues(to_tensor(r), n)); });
  m.def("bh_fdr_reject",
        [](std::vector<double> p, double q) {
          const auto keep = bh_fdr_reject(p, q);
          return std::vector<bool>(keep.begin(), keep.end());
        },
        py::arg("pvalues"), py::arg("q") = 0.05);
  m.def("sliding_windows",
        [](std::size_t length, std::size_t width, std::size_t step) { return sliding_windows(length, width, step).starts; },
        py::arg("length"), py::arg("width") = 130, py::arg("step") = 20);
  m.def("dynamic_graphs",
        [](const Array& series, std::size_t width, std::size_t step, std::size_t count, double q) {
          const Tensor s = to_tensor(series);
          const auto g = build_dynamic_graphs(s, fixed_windows(s.dim(0), width, step, count), q);
          py::list adjacency, masks;
          for (std::size_t w = 0; w < g.windows(); ++w) {
            adjacency.append(to_array(g.adjacency[w]));
            masks.append(to_array(g.masks[w]));
          }
          return py::make_tuple(adjacency, masks, g.plan.starts);
        },
        py::arg("series"), py::arg("width") = 130, py::arg("step") = 20, py::arg("count") = 8, py::arg("q") = 0.05,
        "Per-window (adjacency, mask) lists plus the window starts.");

  m.def("canonical_config", [](const py::dict& d) { return from_json(canonical_json(resolved(d))); },
        py::arg("config") = py::dict());
  m.def("config_hash", [](const py::dict& d) { return config_hash(resolved(d)); }, py::arg("config") = py::dict());

  m.def("generate_dataset",
        [](const py::dict& d, const std::filesystem::path& dir) {
          const GeneratedDataset g = generate_dataset(resolved(d).gen, dir);
          return py::make_tuple(g.data.subjects.size(), g.planted);
        },
        py::arg("config"), py::arg("directory"), "Writes a synthetic dataset; returns (subjects, planted edges).");

  m.def("gradcheck",
        [](std::uint64_t seed) {
          std::vector<std::tuple<std::string, double, bool>> rows;
          for (const auto& r : kernel_gradcheck_suite(seed)) rows.emplace_back(r.name, r.max_relative_error, r.passed());
          return rows;
        },
        py::arg("seed") = 11);

  m.def("run_cli",
        [](std::vector<std::string> args) {
          args.insert(args.begin(), "neurofuse");
          std::vector<char*> argv;
          for (auto& a : args) argv.push_back(a.data());
          std::ostringstream out, err;
          const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the command line in-process; returns (exit code, stdout, stderr).");
}
