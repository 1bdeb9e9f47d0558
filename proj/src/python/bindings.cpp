#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "a3net/cli.hpp"
#include "a3net/config.hpp"
#include "a3net/corpus.hpp"
#include "a3net/metrics.hpp"
#include "a3net/model.hpp"
#include "a3net/ops.hpp"
#include "a3net/training.hpp"

namespace py = pybind11;
using namespace a3net;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<TokenSequence> tokenize_all(const std::vector<std::string>& texts) {
  std::vector<TokenSequence> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tokenize(t));
  return out;
}

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  const auto v = r.values();
  for (std::size_t i = 0; i < v.size(); ++i) d[py::str(std::string(MetricReport::kFields[i]))] = v[i];
  return d;
}

ImageView image_from(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw py::value_error("image must be HxW or HxWxC");
  ImageView v;
  v.height = static_cast<std::size_t>(a.shape(0));
  v.width = static_cast<std::size_t>(a.shape(1));
  v.channels = a.ndim() == 3 ? static_cast<std::size_t>(a.shape(2)) : 1;
  v.pixels.assign(a.data(), a.data() + a.size());
  return v;
}

// A trained model loaded from a checkpoint, ready for decoding.
struct Checkpoint {
  TrainingSnapshot snap;

  explicit Checkpoint(const std::string& path) : snap(load_snapshot(path)) {}

  std::string generate(const std::vector<Array>& views, std::size_t beam, std::size_t max_len) const {
    ImageSet set;
    for (const auto& v : views) set.push_back(image_from(v));
    BeamOptions opts;
    opts.beam = beam ? beam : snap.config.decode.beam_size;
    opts.max_len = max_len ? max_len : snap.config.decode.max_len;
    opts.alpha = snap.config.decode.length_alpha;
    NoGradGuard ng;
    const auto hyps = snap.model->beam(set, opts);
    return hyps.empty() ? std::string() : join_tokens(snap.model->vocab().decode(hyps.front().tokens));
  }
};

}  // namespace

PYBIND11_MODULE(_a3net, m) {
  m.doc() = "Report generation from chest images with anatomical alignment";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CorpusError>(m, "CorpusError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.def("tokenize", [](const std::string& s) { return tokenize(s); }, py::arg("text"));

  m.def("matmul", [](const Array& a, const Array& b) { return to_array(matmul(to_tensor(a), to_tensor(b))); });
  m.def("softmax", [](const Array& x) { return to_array(softmax_rows(to_tensor(x))); },
        "Softmax over the last axis.");
  m.def(
      "layer_norm",
      [](const Array& x, const Array& gamma, const Array& beta, double eps) {
        return to_array(layer_norm(to_tensor(x), to_tensor(gamma), to_tensor(beta), eps));
      },
      py::arg("x"), py::arg("gamma"), py::arg("beta"), py::arg("eps") = 1e-5);

  m.def(
      "bleu",
      [](const std::vector<std::string>& c, const std::vector<std::string>& r, int n) {
        return bleu(tokenize_all(c), tokenize_all(r), n);
      },
      py::arg("candidates"), py::arg("references"), py::arg("n") = 4);
  m.def("rouge_l", [](const std::vector<std::string>& c, const std::vector<std::string>& r) {
    return rouge_l(tokenize_all(c), tokenize_all(r));
  });
  m.def("meteor", [](const std::vector<std::string>& c, const std::vector<std::string>& r) {
    return meteor(tokenize_all(c), tokenize_all(r));
  });
  m.def(
      "evaluate",
      [](const std::vector<std::string>& c, const std::vector<std::string>& r) {
        return report_dict(evaluate_suite(tokenize_all(c), tokenize_all(r)));
      },
      py::arg("candidates"), py::arg("references"), "All six scores keyed BL-1..BL-4, MTR, RG-L.");

  m.def("default_config", [] { return to_text(Config::desk()); });
  m.def("full_scale_config", [] { return to_text(Config::full_scale()); });
  m.def("resolve_config", [](const std::string& text) { return to_text(parse_config(text)); },
        "Parses a config and returns every key with its resolved value.");
  m.def("model_digest", [](const std::string& text) { return digest_hex(model_digest(parse_config(text).model)); });

  m.def(
      "synthetic_reports",
      [](std::uint64_t seed, std::size_t n) {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& s : generate_synthetic(seed, n).corpus.samples) out.emplace_back(s.id, s.report);
        return out;
      },
      py::arg("seed"), py::arg("samples"), "(id, report) pairs of a synthetic corpus.");
  m.def("corpus_stats", [](const std::string& path) { return stats_json(compute_stats(load_corpus(path))); },
        "Split statistics as a JSON string.");

  py::class_<Vocabulary>(m, "Vocabulary")
      .def_static(
          "build",
          [](const std::vector<std::string>& texts, std::size_t min_freq) {
            return Vocabulary::build(tokenize_all(texts), min_freq);
          },
          py::arg("texts"), py::arg("min_freq") = 3)
      .def("__len__", &Vocabulary::size)
      .def("tokens", &Vocabulary::tokens)
      .def("encode", [](const Vocabulary& v, const std::string& s) { return v.encode(tokenize(s)); })
      .def("decode", [](const Vocabulary& v, const TokenIds& ids) { return join_tokens(v.decode(ids)); });

  py::class_<Checkpoint>(m, "Checkpoint")
      .def(py::init<const std::string&>(), py::arg("path"))
      .def_property_readonly("epoch", [](const Checkpoint& c) { return c.snap.epoch; })
      .def_property_readonly("config", [](const Checkpoint& c) { return to_text(c.snap.config); })
      .def("generate", &Checkpoint::generate, py::arg("views"), py::arg("beam") = 0, py::arg("max_len") = 0,
           "Beam-decodes one sample given its views as float arrays.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a command-line invocation in process; returns (exit code, stdout, stderr).");
}
