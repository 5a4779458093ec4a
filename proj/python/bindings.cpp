// Python bindings for the core operations: sequence metrics, lyric edits,
// alignment loss, group-relative advantages, the synthetic world with its
// oracle decoder, and config plumbing. Matrices cross the boundary as nested
// lists (row-major), vectors as flat lists; no third-party array dependency.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <stdexcept>
#include <vector>

#include "fgl/bench.hpp"
#include "fgl/config.hpp"
#include "fgl/grpo.hpp"
#include "fgl/objectives.hpp"
#include "fgl/toyworld.hpp"

namespace py = pybind11;
using namespace fgl;

namespace {

using Matrix = std::vector<std::vector<double>>;

Tensor matrix_to_tensor(const Matrix& rows, const char* what) {
  if (rows.empty()) throw std::invalid_argument(std::string(what) + ": needs at least one row");
  const int cols = int(rows[0].size());
  if (cols == 0) throw std::invalid_argument(std::string(what) + ": rows must be nonempty");
  Tensor t({int(rows.size()), cols});
  for (size_t i = 0; i < rows.size(); i++) {
    if (int(rows[i].size()) != cols)
      throw std::invalid_argument(std::string(what) + ": ragged rows");
    for (int j = 0; j < cols; j++) t.at(int(i), j) = rows[i][j];
  }
  return t;
}

Tensor vector_to_tensor(const std::vector<double>& v, const char* what) {
  if (v.empty()) throw std::invalid_argument(std::string(what) + ": empty vector");
  Tensor t({int(v.size())});
  for (size_t i = 0; i < v.size(); i++) t.at(int(i)) = v[i];
  return t;
}

Matrix tensor_to_matrix(const Tensor& t) {
  Matrix rows(size_t(t.shape.rows()), std::vector<double>(size_t(t.shape.cols())));
  for (int64_t i = 0; i < t.shape.rows(); i++)
    for (int64_t j = 0; j < t.shape.cols(); j++) rows[size_t(i)][size_t(j)] = t.at(int(i), int(j));
  return rows;
}

std::vector<double> tensor_to_vector(const Tensor& t) {
  return std::vector<double>(t.data.begin(), t.data.end());
}

}  // namespace

PYBIND11_MODULE(_fgl, m) {
  m.doc() = "core operations of the toy singing-edit laboratory";

  // ---- sequence & vector metrics -------------------------------------------
  m.def("per", &per, py::arg("ref"), py::arg("hyp"),
        "Token error rate: Levenshtein(ref, hyp) / len(ref); ref must be nonempty.");
  m.def("pearson", &pearson, py::arg("x"), py::arg("y"),
        "Pearson correlation of two equal-length vectors; constant input gives 0.");
  m.def(
      "cosine",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        return cosine(vector_to_tensor(a, "cosine"), vector_to_tensor(b, "cosine"));
      },
      py::arg("a"), py::arg("b"), "Cosine similarity; zero-norm input gives 0.");
  m.def("collapse_tokens", &collapse_tokens, py::arg("frame_tokens"),
        "Drop padding (0) frames, then merge consecutive identical tokens.");

  // ---- alignment loss --------------------------------------------------------
  m.def(
      "cka_loss",
      [](const Matrix& v, const Matrix& h) {
        return cka_loss(matrix_to_tensor(v, "cka_loss"), matrix_to_tensor(h, "cka_loss"));
      },
      py::arg("v"), py::arg("h"),
      "1 - uncentered CKA between two representations with matching row counts.");

  // ---- group-relative advantages ----------------------------------------------
  m.def(
      "compute_advantages",
      [](const Matrix& rewards, const std::vector<double>& weights, double eps_std) {
        return compute_advantages(matrix_to_tensor(rewards, "compute_advantages"), weights,
                                  eps_std);
      },
      py::arg("rewards"), py::arg("weights"), py::arg("eps_std") = 1e-8,
      "Weighted per-column population z-scores over a (G x M) reward matrix; a "
      "column with population std below eps_std contributes zero.");

  // ---- lyric edits -------------------------------------------------------------
  m.def("translate_token", &translate_token, py::arg("token"), py::arg("tokens_per_language"),
        "The fixed involutive bijection between the two language sub-alphabets.");
  m.def(
      "apply_edit",
      [](const std::vector<int>& tokens, const std::string& edit, double intensity,
         uint64_t seed, int tokens_per_language) {
        return apply_edit(tokens, edit_type_from_name(edit), intensity, seed,
                          tokens_per_language);
      },
      py::arg("tokens"), py::arg("edit"), py::arg("intensity"), py::arg("seed"),
      py::arg("tokens_per_language") = 16,
      "Apply one named edit (PSub|FSub|Del|Ins|Trans|Mix) to a token sequence.");
  m.def(
      "edit_types",
      [] {
        std::vector<std::string> names;
        for (EditType e : kEditTypes) names.push_back(edit_type_name(e));
        return names;
      },
      "The six edit type names.");

  // ---- synthetic world ----------------------------------------------------------
  py::class_<WorldSpec>(m, "WorldSpec")
      .def(py::init<>())
      .def_readwrite("seed", &WorldSpec::seed)
      .def_readwrite("d_latent", &WorldSpec::d_latent)
      .def_readwrite("n_tokens", &WorldSpec::n_tokens)
      .def_readwrite("d_token", &WorldSpec::d_token)
      .def_readwrite("d_pitch", &WorldSpec::d_pitch)
      .def_readwrite("d_timbre", &WorldSpec::d_timbre)
      .def_readwrite("d_melody", &WorldSpec::d_melody)
      .def_readwrite("n_techniques", &WorldSpec::n_techniques)
      .def_readwrite("n_timbres_per_gender", &WorldSpec::n_timbres_per_gender)
      .def_readwrite("sigma_obs", &WorldSpec::sigma_obs)
      .def_readwrite("melody_leak", &WorldSpec::melody_leak)
      .def_readwrite("token_scale", &WorldSpec::token_scale);

  py::class_<SampleLabels>(m, "SampleLabels")
      .def(py::init<>())
      .def_readwrite("language", &SampleLabels::language)
      .def_readwrite("gender", &SampleLabels::gender)
      .def_readwrite("timbre", &SampleLabels::timbre)
      .def_readwrite("technique", &SampleLabels::technique)
      .def_readwrite("speech", &SampleLabels::speech);

  py::class_<ToySample>(m, "ToySample")
      .def_readonly("seed", &ToySample::seed)
      .def_readonly("frames", &ToySample::frames)
      .def_readonly("labels", &ToySample::labels)
      .def_readonly("tokens", &ToySample::tokens)
      .def_readonly("sentences", &ToySample::sentences)
      .def_readonly("onsets", &ToySample::onsets)
      .def_readonly("pitch", &ToySample::pitch)
      .def_readonly("mask_start", &ToySample::mask_start)
      .def_property_readonly("latent",
                             [](const ToySample& s) { return tensor_to_matrix(s.latent); })
      .def_property_readonly("melody",
                             [](const ToySample& s) { return tensor_to_matrix(s.melody); })
      .def_property_readonly("timbre",
                             [](const ToySample& s) { return tensor_to_vector(s.timbre); });

  py::class_<DecodeResult>(m, "DecodeResult")
      .def_readonly("tokens", &DecodeResult::tokens)
      .def_readonly("pitch", &DecodeResult::pitch)
      .def_readonly("resid", &DecodeResult::resid)
      .def_readonly("mean_resid", &DecodeResult::mean_resid)
      .def_property_readonly("timbre",
                             [](const DecodeResult& d) { return tensor_to_vector(d.timbre); });

  py::class_<World>(m, "World")
      .def(py::init<WorldSpec>(), py::arg("spec"))
      .def(py::init([](uint64_t seed) {
             WorldSpec spec;
             spec.seed = seed;
             return World(spec);
           }),
           py::arg("seed"), "World with default dimensions and the given seed.")
      .def_property_readonly("spec", &World::spec)
      .def("gen_sample",
           py::overload_cast<int, uint64_t>(&World::gen_sample, py::const_),
           py::arg("frames"), py::arg("seed"))
      .def("gen_sample",
           py::overload_cast<int, uint64_t, const SampleLabels&>(&World::gen_sample, py::const_),
           py::arg("frames"), py::arg("seed"), py::arg("labels"))
      .def("gen_edit_base", &World::gen_edit_base, py::arg("frames"), py::arg("seed"),
           py::arg("labels"))
      .def("edited_variant", &World::edited_variant, py::arg("base"), py::arg("new_target"),
           py::arg("timbre_id"), py::arg("seed"))
      .def(
          "decode",
          [](const World& w, const Matrix& latent) {
            return w.decode(matrix_to_tensor(latent, "decode"));
          },
          py::arg("latent"), "Oracle least-squares decoding of a (frames x d_latent) matrix.")
      .def(
          "rewards",
          [](const World& w, const Matrix& gen, const std::vector<int>& target_tokens,
             const std::vector<double>& ref_pitch, const std::vector<double>& ctx_timbre) {
            RewardRefs refs;
            refs.target_tokens = target_tokens;
            refs.ref_pitch = ref_pitch;
            refs.ctx_timbre = vector_to_tensor(ctx_timbre, "rewards");
            const auto r = w.rewards(matrix_to_tensor(gen, "rewards"), refs);
            return py::make_tuple(r[0], r[1], r[2], r[3]);
          },
          py::arg("gen"), py::arg("target_tokens"), py::arg("ref_pitch"), py::arg("ctx_timbre"),
          "(R1 lyric accuracy, R2 pitch corr, R3 timbre cosine, R4 quality) of generated rows.")
      .def(
          "timbre_of", [](const World& w, int id) { return tensor_to_vector(w.timbre_of(id)); },
          py::arg("timbre_id"));

  // ---- config plumbing -----------------------------------------------------------
  m.def(
      "default_config", [] { return serialize_config(default_config()); },
      "The default run configuration as a JSON string.");
  m.def(
      "normalize_config",
      [](const std::string& text) { return serialize_config(parse_config(text)); },
      py::arg("text"),
      "Parse, validate, and re-serialize a config; raises ValueError on any "
      "unknown key, bad value, or incoherent combination.");
}
