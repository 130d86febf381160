#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cli.hpp"
#include "keydyn/checkpoint.hpp"
#include "keydyn/dataset.hpp"
#include "keydyn/errors.hpp"
#include "keydyn/evaluation.hpp"
#include "keydyn/features.hpp"
#include "keydyn/scoring.hpp"
#include "keydyn/training.hpp"

namespace py = pybind11;
using namespace keydyn;

namespace {

// Sessions cross the boundary as JSON text to keep the Python side plain dicts.
py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_python(const py::object& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

std::vector<KeystrokeSession> sessions_from(const py::list& items) {
  std::vector<KeystrokeSession> out;
  for (const auto& item : items) {
    auto s = session_from_json(from_python(py::reinterpret_borrow<py::object>(item)));
    validate_session(s);
    out.push_back(std::move(s));
  }
  return out;
}

py::list sessions_to(const std::vector<KeystrokeSession>& sessions) {
  py::list out;
  for (const auto& s : sessions) out.append(to_python(session_to_json(s)));
  return out;
}

std::vector<KeyEvent> events_from(const py::object& events) {
  KeystrokeSession s = session_from_json(
      nlohmann::json{{"subject_id", ""}, {"session_id", ""}, {"events", from_python(events)}});
  sort_events(s.events);
  validate_session(s);
  return s.events;
}

ScorerConfig scorer_from(const std::string& kind, const std::string& metric, std::size_t lof_k,
                         double nu, double gamma) {
  ScorerConfig c;
  c.kind = parse_scorer_kind(kind);
  c.metric = parse_metric(metric);
  c.lof_k = lof_k;
  c.ocsvm_nu = nu;
  c.ocsvm_gamma = gamma;
  c.validate();
  return c;
}

struct PyModel {
  EncoderModel model;
  std::string hash;
};

}  // namespace

PYBIND11_MODULE(_keydyn, m) {
  m.doc() = "Keystroke-dynamics encoder, scorers and evaluation";

  py::register_exception<Error>(m, "KeydynError", PyExc_RuntimeError);

  m.def("synthesize", [](std::size_t subjects, std::size_t sessions, std::size_t keys, std::uint64_t seed) {
    return sessions_to(generate_synthetic(subjects, sessions, keys, seed));
  }, py::arg("subjects") = 40, py::arg("sessions") = 15, py::arg("keys") = 60, py::arg("seed") = 1);

  m.def("load_sessions", [](const std::filesystem::path& path) { return sessions_to(read_sessions(path)); });
  m.def("save_sessions", [](const std::filesystem::path& path, const py::list& sessions) {
    write_sessions(path, sessions_from(sessions));
  });

  m.def("train", [](const py::list& sessions, const std::filesystem::path& out_dir,
                    const std::string& profile, const std::string& loss, const std::string& metric,
                    std::optional<std::size_t> steps, std::uint64_t seed) {
    auto p = profile_by_name(profile);
    p.train.loss.kind = parse_loss_kind(loss);
    p.train.metric = parse_metric(metric);
    p.train.loss.margin = LossConfig::default_margin(p.train.metric);
    p.train.seed = seed;
    if (steps) p.train.steps = *steps;
    if (p.train.loss.kind == LossKind::Softmax) p.encoder.mode = EncoderMode::Cross;
    const auto data = sessions_from(sessions);
    TrainOptions options;
    options.out_dir = out_dir;
    std::vector<double> losses;
    {
      py::gil_scoped_release release;
      losses = train(data, p.encoder, p.train, options).report.losses;
    }
    return losses;
  }, py::arg("sessions"), py::arg("out_dir"), py::arg("profile") = "desk", py::arg("loss") = "batch_all",
     py::arg("metric") = "cosine", py::arg("steps") = py::none(), py::arg("seed") = 1);

  py::class_<PyModel>(m, "Model")
      .def_static("load", [](const std::filesystem::path& dir) {
        return PyModel{load_checkpoint(dir), checkpoint_hash(dir)};
      })
      .def_property_readonly("hash", [](const PyModel& p) { return p.hash; })
      .def_property_readonly("config", [](const PyModel& p) { return to_python(config_to_json(p.model.config)); })
      .def_property_readonly("sequence_length", [](const PyModel& p) { return p.model.sequence_length; })
      .def("embed", [](const PyModel& p, const py::object& events, std::size_t length) {
        KeystrokeSession s{"", "", events_from(events)};
        return Eigen::VectorXd(encode(vectorize(s, p.model.norm, length ? length : p.model.sequence_length), p.model));
      }, py::arg("events"), py::arg("length") = 0)
      .def("pair_probability", [](const PyModel& p, const py::object& source, const py::object& target) {
        KeystrokeSession a{"", "", events_from(source)}, b{"", "", events_from(target)};
        const auto L = p.model.sequence_length;
        return encode_pair(vectorize(a, p.model.norm, L), vectorize(b, p.model.norm, L), p.model)(0);
      })
      .def("evaluate", [](const PyModel& p, const py::list& sessions, std::size_t enrollment,
                          std::size_t length, const std::string& scorer, std::uint64_t seed) {
        ProtocolConfig c;
        c.enrollment = enrollment;
        c.length = length;
        c.seed = seed;
        c.scorer = scorer_from(scorer, "cosine", 3, 0.1, 0.0);
        const auto data = sessions_from(sessions);
        std::vector<std::string> warnings;
        std::vector<ScoreSet> sets;
        {
          py::gil_scoped_release release;
          sets = run_protocol(data, p.model, c, &warnings);
        }
        return to_python(make_report(sets, protocol_config_to_json(c), warnings).to_json());
      }, py::arg("sessions"), py::arg("E") = 5, py::arg("L") = 50, py::arg("scorer") = "avg_distance",
         py::arg("seed") = 0);

  m.def("eer", [](const std::vector<double>& genuine, const std::vector<double>& impostor) {
    return eer(genuine, impostor);
  });
  m.def("score", [](const Eigen::VectorXd& query, const std::vector<Eigen::VectorXd>& enrollment,
                    const std::string& kind, const std::string& metric, std::size_t lof_k, double nu,
                    double gamma) {
    return score(query, enrollment, scorer_from(kind, metric, lof_k, nu, gamma));
  }, py::arg("query"), py::arg("enrollment"), py::arg("kind") = "avg_distance", py::arg("metric") = "cosine",
     py::arg("lof_k") = 3, py::arg("nu") = 0.1, py::arg("gamma") = 0.0);

  m.def("cli", [](const std::vector<std::string>& args) {
    std::vector<const char*> argv{"keydyn"};
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  });
}
