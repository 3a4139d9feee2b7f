#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nfb/conformance.hpp"
#include "nfb/corpus.hpp"
#include "nfb/error.hpp"
#include "nfb/http_backend.hpp"
#include "nfb/labeling.hpp"
#include "nfb/metrics.hpp"
#include "nfb/orchestrator.hpp"
#include "nfb/prompting.hpp"

namespace py = pybind11;
using namespace nfb;

namespace {

std::vector<SentenceEmbedding> rows_to_embeddings(const std::vector<std::vector<double>>& rows, int layer) {
  std::vector<SentenceEmbedding> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back({r, layer, 1});
  return out;
}

ExampleSet example_set(const std::vector<std::pair<std::string, int>>& pairs, bool flipped,
                       const std::string& label_mode) {
  ExampleSet ex;
  for (const auto& [s, l] : pairs) ex.pairs.push_back({s, l});
  ex.assignment = flipped ? LabelAssignment::Flipped : LabelAssignment::Identity;
  ex.mode = label_mode_from_string(label_mode);
  ex.levels = ex.mode == LabelMode::Binary ? 2 : 8;
  return ex;
}

// A toy model served over HTTP from a background thread.
class ToyServer {
 public:
  ToyServer() : server_(toy_) {}
  int start(int port) { return server_.start("127.0.0.1", port); }
  void stop() { server_.stop(); }
  std::string url() const { return server_.url(); }

 private:
  ToyBackend toy_;
  BackendServer server_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Neurofeedback harness core";

  static py::exception<Error> exc(m, "NfbError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(exc, e.what());
    }
  });

  py::class_<EffectSize>(m, "EffectSize")
      .def_readonly("d", &EffectSize::d)
      .def_readonly("se", &EffectSize::se)
      .def_readonly("ci_lo", &EffectSize::ci_lo)
      .def_readonly("ci_hi", &EffectSize::ci_hi)
      .def_readonly("pooled_sd", &EffectSize::pooled_sd)
      .def_readonly("n0", &EffectSize::n0)
      .def_readonly("n1", &EffectSize::n1);

  m.def("cohens_d", [](const std::vector<double>& low, const std::vector<double>& high) { return cohens_d(low, high); },
        py::arg("scores_0"), py::arg("scores_1"));
  m.def("control_precision",
        [](const std::vector<double>& d, std::size_t target) { return control_precision(d, target); },
        py::arg("d_by_axis"), py::arg("target_index"));
  m.def("median_threshold", [](const std::vector<double>& s) { return median_threshold(s); });
  m.def("binarize", &binarize, py::arg("score"), py::arg("theta"));
  m.def("quantile_bins", [](const std::vector<double>& s, int n) {
    const auto spec = quantile_bins(s, n);
    return std::make_pair(spec.gammas_neg, spec.gammas_pos);
  }, py::arg("scores"), py::arg("n") = 8);
  m.def("ordinal_bin", [](double score, const std::vector<double>& neg, const std::vector<double>& pos) {
    OrdinalThresholds spec;
    spec.n = 2 * (static_cast<int>(neg.size()) - 1);
    spec.gammas_neg = neg;
    spec.gammas_pos = pos;
    return ordinal_bin(score, spec);
  }, py::arg("score"), py::arg("gammas_neg"), py::arg("gammas_pos"));

  m.def("fit_pca", [](const std::vector<std::vector<double>>& rows, int k) {
    const auto pca = fit_pca(rows_to_embeddings(rows, 1), k);
    py::list out;
    for (const auto& pc : pca.pcs) {
      py::dict d;
      d["id"] = pc.id;
      d["direction"] = pc.direction;
      d["explained_variance_ratio"] = pc.explained_variance_ratio;
      d["eigenvalue"] = pc.eigenvalue;
      out.append(d);
    }
    return out;
  }, py::arg("rows"), py::arg("k"));
  m.def("fit_logistic", [](const std::vector<std::vector<double>>& rows, const std::vector<int>& labels, double l2) {
    LogisticOptions o;
    o.l2 = l2;
    const auto fit = fit_logistic(rows_to_embeddings(rows, 1), labels, o);
    py::dict d;
    d["direction"] = fit.axis.direction;
    d["weights"] = fit.weights;
    d["bias"] = fit.axis.bias;
    d["training_accuracy"] = fit.training_accuracy;
    d["converged"] = fit.converged;
    return d;
  }, py::arg("rows"), py::arg("labels"), py::arg("l2") = 1e-3);

  m.def("build_report_prompt", [](const std::vector<std::pair<std::string, int>>& pairs, const std::string& query,
                                  bool flipped, const std::string& label_mode) {
    return render_plain(build_report_prompt(example_set(pairs, flipped, label_mode), query));
  }, py::arg("pairs"), py::arg("query"), py::arg("flipped") = false, py::arg("label_mode") = "binary");
  m.def("build_control_prompt", [](const std::vector<std::pair<std::string, int>>& pairs, int imitate,
                                   std::optional<std::string> provided, bool flipped, const std::string& label_mode) {
    const auto mode = provided ? ControlMode::Implicit : ControlMode::Explicit;
    std::optional<std::string_view> sentence;
    if (provided) sentence = *provided;
    return render_plain(build_control_prompt(example_set(pairs, flipped, label_mode), imitate, mode, sentence));
  }, py::arg("pairs"), py::arg("imitate_label"), py::arg("provided_sentence") = py::none(),
        py::arg("flipped") = false, py::arg("label_mode") = "binary");
  m.def("counterbalanced_conditions", [] {
    py::list out;
    for (const auto& c : counterbalanced_conditions()) {
      py::dict d;
      d["condition"] = std::string(c.roman());
      d["assignment"] = std::string(to_string(c.assignment));
      d["imitate_label"] = c.imitate_label;
      d["imitated_side"] = c.imitated_side();
      out.append(d);
    }
    return out;
  });

  m.def("toy_model_info", [] { return to_json(ToyBackend().model_info()); });
  m.def("toy_forward", [](const std::string& request_json) {
    ToyBackend toy;
    const auto req = request_from_json(request_json);
    return to_json(req.generate ? toy.generate(req) : toy.forward(req));
  }, py::arg("request_json"));
  m.def("run_conformance", [](const std::string& backend) {
    std::vector<CheckResult> results;
    {
      py::gil_scoped_release nogil;
      auto b = make_backend(backend);
      results = run_conformance(*b);
    }
    py::list out;
    for (const auto& r : results) out.append(py::make_tuple(r.name, r.passed, r.detail));
    return out;
  }, py::arg("backend") = "toy");
  m.def("load_corpus", [](const std::string& path) {
    py::list out;
    for (const auto& s : load_corpus(path)) {
      py::dict d;
      d["id"] = s.id;
      d["text"] = s.text;
      d["label"] = s.label ? py::object(py::int_(*s.label)) : py::object(py::none());
      out.append(d);
    }
    return out;
  }, py::arg("path"));
  m.def("select_layers", [](int layer_count) { return select_layers(layer_count); });

  py::class_<ToyServer>(m, "ToyServer")
      .def(py::init<>())
      .def("start", &ToyServer::start, py::arg("port") = 0)
      .def("stop", &ToyServer::stop)
      .def_property_readonly("url", &ToyServer::url);
}
