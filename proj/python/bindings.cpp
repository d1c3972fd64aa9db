#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>
#include <vector>

#include "peva/cli.hpp"
#include "peva/encoder.hpp"
#include "peva/error.hpp"
#include "peva/feature_store.hpp"
#include "peva/gradient_suite.hpp"
#include "peva/synth.hpp"
#include "peva/trainer.hpp"
#include "peva/zeroshot.hpp"

namespace py = pybind11;
using namespace peva;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 1 && a.ndim() != 2) throw DimensionError("expected a 1-D or 2-D array");
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<std::size_t>(a.shape(i)));
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  return py::array_t<double>(shape, t.data().data());
}

py::array_t<double> to_array(const std::vector<double>& v) {
  return py::array_t<double>(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())}, v.data());
}

py::dict views_dict(const FeatureSet& set) {
  py::list shapes;
  for (const auto& s : set.shapes) shapes.append(py::make_tuple(s.shape_id, s.label_index, to_array(s.views)));
  py::dict d;
  d["kind"] = "views";
  d["dim"] = set.dim;
  d["shapes"] = shapes;
  return d;
}

py::dict prompts_dict(const PromptBank& bank) {
  py::dict d;
  d["kind"] = "prompts";
  d["categories"] = bank.categories;
  d["features"] = to_array(bank.features);
  return d;
}

py::dict read_any(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (const auto* v = std::get_if<FeatureSet>(&c)) return views_dict(*v);
  if (const auto* p = std::get_if<PromptBank>(&c)) return prompts_dict(*p);
  const auto& params = std::get<ParameterSet>(c);
  py::dict tensors;
  for (const auto& t : params.tensors) tensors[py::str(t.name)] = to_array(t.value);
  py::dict d;
  d["kind"] = "parameters";
  d["dim"] = params.dim;
  d["tensors"] = tensors;
  return d;
}

FeatureSet make_views(std::size_t dim, const std::vector<std::tuple<std::string, std::uint32_t, Array>>& shapes) {
  FeatureSet set;
  set.dim = dim;
  for (const auto& [id, label, views] : shapes) set.shapes.push_back({id, label, to_tensor(views)});
  return set;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Prompt-enhanced multi-view aggregation, few-shot encoder and PEVF containers.";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.attr("DEFAULT_LOGIT_SCALE") = kDefaultLogitScale;

  m.def("similarity_matrix", [](const Array& p, const Array& v) { return to_array(similarity_matrix(to_tensor(p), to_tensor(v))); },
        py::arg("prompts"), py::arg("views"), "N×M inner products of prompts[N×D] with views[M×D].");
  m.def("discriminative_scores", [](const Array& s) { return to_array(discriminative_scores(to_tensor(s))); },
        py::arg("similarity"), "Column max minus column mean.");
  m.def("aggregation_weights",
        [](const std::vector<double>& alpha) { return to_array(aggregation_weights(alpha)); }, py::arg("scores"));
  m.def(
      "aggregate_peva",
      [](const Array& p, const Array& v) {
        const AggregationResult r = aggregate_peva(to_tensor(p), to_tensor(v));
        py::dict d;
        d["weights"] = to_array(r.weights);
        d["scores"] = to_array(r.scores);
        d["descriptor"] = to_array(r.descriptor);
        d["similarity"] = to_array(r.similarity);
        return d;
      },
      py::arg("prompts"), py::arg("views"), "Prompt-enhanced view aggregation of one shape.");
  m.def("aggregate_average", [](const Array& v) { return to_array(aggregate_average(to_tensor(v))); }, py::arg("views"));
  m.def(
      "zero_shot_logits",
      [](const Array& p, const std::vector<double>& f, double scale) { return to_array(zero_shot_logits(to_tensor(p), f, scale)); },
      py::arg("prompts"), py::arg("descriptor"), py::arg("scale") = kDefaultLogitScale);
  m.def("predict", [](const std::vector<double>& logits) { return predict(logits); }, py::arg("logits"));

  m.def("read_container", &read_any, py::arg("path"),
        "Decode a PEVF file into a dict whose 'kind' is views, prompts or parameters.");
  m.def(
      "write_views",
      [](const std::filesystem::path& path, std::size_t dim,
         const std::vector<std::tuple<std::string, std::uint32_t, Array>>& shapes) {
        write_container(make_views(dim, shapes), path);
      },
      py::arg("path"), py::arg("dim"), py::arg("shapes"), "shapes: list of (id, label, M×D array).");
  m.def(
      "write_prompts",
      [](const std::filesystem::path& path, const std::vector<std::string>& categories, const Array& features) {
        PromptBank bank;
        bank.categories = categories;
        bank.features = to_tensor(features);
        write_container(bank, path);
      },
      py::arg("path"), py::arg("categories"), py::arg("features"));
  m.def(
      "load_dataset",
      [](const std::filesystem::path& manifest) {
        const Dataset data = load_dataset(read_manifest(manifest));
        py::dict splits;
        for (const auto& [name, set] : data.splits) splits[py::str(name)] = views_dict(set);
        py::dict d;
        d["prompts"] = prompts_dict(data.prompts);
        d["splits"] = splits;
        return d;
      },
      py::arg("manifest"), "Load every split of a manifest, normalized as the engine sees it.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& manifest, const std::string& mode, const std::string& split,
         const std::optional<std::filesystem::path>& checkpoint, double scale) {
        const Dataset data = load_dataset(read_manifest(manifest), std::vector<std::string>{split});
        EvalOptions opts;
        opts.logit_scale = scale;
        EncoderParams params;
        if (checkpoint) {
          params = load_checkpoint(*checkpoint);
          opts.encoder = &params;
        }
        const auto it = data.splits.find(split);
        if (it == data.splits.end()) throw DataError("manifest has no '" + split + "' split");
        return evaluate(it->second, data.prompts, parse_eval_mode(mode), opts).accuracy;
      },
      py::arg("manifest"), py::arg("mode") = "zero_peva", py::arg("split") = "test",
      py::arg("checkpoint") = py::none(), py::arg("scale") = kDefaultLogitScale,
      "Accuracy in mode zero_peva, zero_avg or few (few needs a checkpoint).");

  m.def(
      "encode",
      [](const Array& views, const std::filesystem::path& checkpoint) {
        return to_array(encode(to_tensor(views), load_checkpoint(checkpoint)));
      },
      py::arg("views"), py::arg("checkpoint"), "Few-shot descriptor of one shape.");

  m.def(
      "write_synth",
      [](const std::filesystem::path& out, std::size_t classes, std::size_t views, std::size_t dim, std::size_t shots,
         std::size_t test_per_class, double alignment, double noise, double degenerate, std::uint64_t seed) {
        SynthConfig c;
        c.classes = classes;
        c.views = views;
        c.dim = dim;
        c.shots = shots;
        c.test_per_class = test_per_class;
        c.prompt_alignment = alignment;
        c.view_noise = noise;
        c.degenerate_fraction = degenerate;
        c.seed = seed;
        return write_synth(generate(c), c, out);
      },
      py::arg("out"), py::arg("classes") = 10, py::arg("views") = 8, py::arg("dim") = 64, py::arg("shots") = 16,
      py::arg("test_per_class") = 20, py::arg("alignment") = 0.9, py::arg("noise") = 0.3, py::arg("degenerate") = 0.5,
      py::arg("seed") = 0, "Generate a synthetic benchmark; returns the manifest path.");

  m.def(
      "gradient_suite",
      [](std::uint64_t seed) {
        const GradSuiteReport r = run_gradient_suite(seed);
        return py::make_tuple(r.passed, r.to_text());
      },
      py::arg("seed") = 0, "Finite-difference verification; returns (passed, report text).");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "peva");
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        py::gil_scoped_release release;
        return run_cli(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "Run a peva subcommand in-process; returns its exit code.");
}
