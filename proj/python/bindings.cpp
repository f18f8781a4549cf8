#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "provshift/algorithms.hpp"
#include "provshift/dataset_io.hpp"
#include "provshift/harness.hpp"
#include "provshift/hparams.hpp"
#include "provshift/metrics.hpp"
#include "provshift/random.hpp"
#include "provshift/sampler.hpp"
#include "provshift/synthgen.hpp"

namespace py = pybind11;
using namespace provshift;

namespace {

// JSON crosses the boundary as text; these documents are small.
py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::handle& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

HParams hparams_arg(const py::dict& d) { return d.empty() ? HParams{} : hparams_from_json(from_py(d)); }

Eigen::MatrixXd features_of(const Dataset& d) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(d.size()), static_cast<Eigen::Index>(d.dim));
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t k = 0; k < d.dim; ++k) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = d.examples[i].features[k];
  return x;
}

Dataset dataset_from_arrays(const Eigen::MatrixXd& x, const std::vector<int>& labels, const std::vector<int>& provenance,
                            std::optional<std::vector<std::string>> subjects, std::optional<std::vector<std::string>> ids,
                            const std::string& name) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (labels.size() != n || provenance.size() != n || (subjects && subjects->size() != n) || (ids && ids->size() != n))
    throw argument_error("labels, provenance, subject and example ids must have one entry per row");
  Dataset d;
  d.dim = static_cast<std::size_t>(x.cols());
  d.name = name;
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.features.resize(d.dim);
    for (std::size_t k = 0; k < d.dim; ++k) e.features[k] = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    e.label = labels[i];
    e.provenance = provenance[i];
    e.example_id = ids ? (*ids)[i] : "e" + std::to_string(i);
    e.subject_id = subjects ? (*subjects)[i] : e.example_id;
    d.examples.push_back(std::move(e));
  }
  validate_dataset(d);
  return d;
}

Eigen::Matrix2d table_matrix(const JointTable& t) {
  Eigen::Matrix2d m;
  for (int y = 0; y < 2; ++y)
    for (int z = 0; z < 2; ++z) m(y, z) = t.p(y, z);
  return m;
}

JointTable table_arg(const Eigen::Matrix2d& m) { return JointTable({{{m(0, 0), m(0, 1)}, {m(1, 0), m(1, 1)}}}); }

py::dict stats_dict(const SplitStats& s) {
  py::dict d;
  d["split"] = s.split;
  d["target_log_alpha"] = s.target_log_alpha;
  d["achieved_log_alpha"] = s.achieved_log_alpha;
  d["size"] = s.size;
  d["pool_size"] = s.pool_size;
  d["target"] = table_matrix(s.target);
  d["achieved"] = table_matrix(s.achieved);
  return d;
}

struct Trial {
  TrialRecord record;
};

TrialOptions trial_options(long steps, int checkpoints, int patience, std::size_t hidden, std::size_t per_provenance,
                           const std::string& profile, double id_log_alpha, double ood_log_alpha) {
  TrialOptions o;
  o.budget.steps = steps;
  o.budget.checkpoints = checkpoints;
  o.budget.patience = patience;
  o.settings.steps = steps;
  o.settings.hidden = hidden;
  o.settings.per_provenance = per_provenance;
  o.profile = parse_profile(profile);
  o.trace = {id_log_alpha, ood_log_alpha};
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Provenance-shift benchmark core";
  PYBIND11_CONSTINIT static py::gil_safe_call_once_and_store<py::object> error_type;
  error_type.call_once_and_store_result(
      [&]() -> py::object { return py::exception<Error>(m, "ProvshiftError", PyExc_ValueError); });
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const py::object& cls = error_type.get_stored();
      py::object exc = cls(e.what());
      exc.attr("code") = e.code();
      PyErr_SetObject(cls.ptr(), exc.ptr());
    }
  });
  m.attr("LOG_ALPHA_BASE") = kLogAlphaBase;

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&dataset_from_arrays), py::arg("features"), py::arg("labels"), py::arg("provenance"),
           py::arg("subject_ids") = py::none(), py::arg("example_ids") = py::none(), py::arg("name") = "")
      .def("__len__", &Dataset::size)
      .def_readonly("dim", &Dataset::dim)
      .def_readonly("name", &Dataset::name)
      .def_property_readonly("features", &features_of)
      .def_property_readonly("labels",
                             [](const Dataset& d) {
                               std::vector<int> v;
                               for (const auto& e : d.examples) v.push_back(e.label);
                               return v;
                             })
      .def_property_readonly("provenance",
                             [](const Dataset& d) {
                               std::vector<int> v;
                               for (const auto& e : d.examples) v.push_back(e.provenance);
                               return v;
                             })
      .def_property_readonly("example_ids",
                             [](const Dataset& d) {
                               std::vector<std::string> v;
                               for (const auto& e : d.examples) v.push_back(e.example_id);
                               return v;
                             })
      .def_property_readonly("subject_ids",
                             [](const Dataset& d) {
                               std::vector<std::string> v;
                               for (const auto& e : d.examples) v.push_back(e.subject_id);
                               return v;
                             })
      .def("cell_counts", [](const Dataset& d) { return cell_counts(d); })
      .def("log_alpha", [](const Dataset& d) { return log_alpha_of(empirical_joint(d)); })
      .def("membership_hash", [](const Dataset& d) { return membership_hash(d); })
      .def("__eq__", [](const Dataset& a, const Dataset& b) { return a == b; });

  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));

  m.def(
      "solve_joint",
      [](double la, std::array<double, 2> my, std::array<double, 2> mz) { return table_matrix(solve_joint(la, my, mz)); },
      py::arg("log_alpha"), py::arg("marginal_y") = std::array<double, 2>{0.5, 0.5},
      py::arg("marginal_z") = std::array<double, 2>{0.5, 0.5}, "2x2 joint P(Y=y, Z=z) with the given log alpha");
  m.def("log_alpha", [](const Eigen::Matrix2d& t) { return log_alpha_of(table_arg(t)); }, py::arg("table"));

  m.def(
      "generate",
      [](std::size_t n, double log_alpha, std::size_t d_core, std::size_t d_spur, std::size_t d_noise, double core_strength,
         double spur_strength, std::optional<std::size_t> subjects, std::uint64_t seed, const std::string& name) {
        GenConfig g;
        g.n = n;
        g.joint = solve_joint(log_alpha, {0.5, 0.5}, {0.5, 0.5});
        g.d_core = d_core;
        g.d_spur = d_spur;
        g.d_noise = d_noise;
        g.core_strength = core_strength;
        g.spur_strength = spur_strength;
        g.subjects = subjects.value_or(n);
        g.seed = seed;
        g.name = name;
        return generate(g);
      },
      py::arg("n") = 1000, py::arg("log_alpha") = 0.0, py::arg("d_core") = 4, py::arg("d_spur") = 2, py::arg("d_noise") = 2,
      py::arg("core_strength") = 1.0, py::arg("spur_strength") = 1.0, py::arg("subjects") = py::none(), py::arg("seed") = 0,
      py::arg("name") = "synthetic");

  py::class_<SplitResult>(m, "Splits")
      .def_readonly("train", &SplitResult::train)
      .def_readonly("val", &SplitResult::val)
      .def_property_readonly("tests",
                             [](const SplitResult& r) {
                               py::list out;
                               for (const auto& t : r.tests) out.append(py::make_tuple(t.log_alpha_target, t.data));
                               return out;
                             })
      .def_property_readonly("report", [](const SplitResult& r) {
        py::list out;
        for (const auto& s : r.report) out.append(stats_dict(s));
        return out;
      });

  m.def(
      "make_splits",
      [](const Dataset& d, double train, double val, std::vector<double> sweep, std::array<double, 3> ratios,
         std::uint64_t seed) {
        SplitSpec s;
        s.log_alpha_train = train;
        s.log_alpha_val = val;
        s.sweep = std::move(sweep);
        s.ratios = ratios;
        s.seed = seed;
        return make_splits(d, s);
      },
      py::arg("dataset"), py::arg("log_alpha_train") = -0.6, py::arg("log_alpha_val") = -0.6,
      py::arg("sweep") = std::vector<double>{-0.6, 0.6}, py::arg("ratios") = std::array<double, 3>{6, 2, 2},
      py::arg("seed") = 0);
  m.def("sweep_specs", &sweep_specs, py::arg("lo"), py::arg("hi"), py::arg("steps"));
  m.def(
      "rebalance",
      [](const Dataset& d, const std::string& mode, std::uint64_t seed) {
        if (mode != "up" && mode != "down") throw argument_error("mode must be 'up' or 'down'");
        return rebalance(d, mode == "up" ? RebalanceMode::kUp : RebalanceMode::kDown, seed);
      },
      py::arg("dataset"), py::arg("mode"), py::arg("seed") = 0);

  m.def(
      "decomposition_residual",
      [](std::size_t n_core, std::size_t n_spur, std::uint64_t seed) {
        return decomposition_oracle(random_world(n_core, n_spur, seed));
      },
      py::arg("n_core"), py::arg("n_spur"), py::arg("seed"));

  m.def("evaluate", [](const Eigen::MatrixXd& proba, const Dataset& d) { return to_py(to_json(evaluate(proba, d))); },
        py::arg("proba"), py::arg("dataset"));
  m.def("auprc", &auprc, py::arg("scores"), py::arg("labels"));
  m.def("ece", &ece, py::arg("confidence"), py::arg("correct"), py::arg("bins") = 10);
  m.def("ece_from_p1", &ece_from_p1, py::arg("p1"), py::arg("labels"), py::arg("bins") = 10);
  m.def("worst_group", &worst_group, py::arg("accuracies"));
  m.def("fit_alpha_line", [](std::vector<std::pair<double, double>> pts) { return to_py(to_json(fit_alpha_line(std::move(pts)))); },
        py::arg("points"));

  m.def("algorithms", [] {
    std::vector<std::string> out;
    for (auto k : all_algorithms()) out.push_back(to_string(k));
    return out;
  });
  m.def("is_two_stage", [](const std::string& a) { return is_two_stage(parse_algorithm(a)); }, py::arg("algorithm"));
  m.def(
      "default_hparams",
      [](const std::string& a, const std::string& profile) { return to_py(to_json(default_hparams(parse_algorithm(a), parse_profile(profile)))); },
      py::arg("algorithm"), py::arg("profile") = "desk");
  m.def(
      "sample_hparams",
      [](const std::string& a, std::uint64_t seed, const std::string& profile) {
        Rng rng = make_rng(seed, "python:" + a);
        return to_py(to_json(sample_hparams(parse_algorithm(a), rng, parse_profile(profile))));
      },
      py::arg("algorithm"), py::arg("seed") = 0, py::arg("profile") = "desk");

  py::class_<ModelPredictor>(m, "Predictor")
      .def("predict_proba", [](const ModelPredictor& p, const Dataset& d) { return predict_proba(p, d); }, py::arg("dataset"))
      .def("to_json", [](const ModelPredictor& p) { return to_json(p).dump(); })
      .def_static("from_json", [](const std::string& s) { return predictor_from_json(nlohmann::json::parse(s)); });

  py::class_<Trial>(m, "Trial")
      .def_property_readonly("ok", [](const Trial& t) { return t.record.ok(); })
      .def_property_readonly("error", [](const Trial& t) { return t.record.error; })
      .def_property_readonly("record", [](const Trial& t) { return to_py(to_json(t.record)); })
      .def_property_readonly("predictor", [](const Trial& t) -> std::optional<ModelPredictor> { return t.record.model; });

  m.def(
      "run_trial",
      [](const std::string& algorithm, const SplitResult& splits, const py::dict& hparams, std::uint64_t seed, long steps,
         int checkpoints, int patience, std::size_t hidden, std::size_t per_provenance, const std::string& profile,
         double id_log_alpha, double ood_log_alpha) {
        const TrialOptions o =
            trial_options(steps, checkpoints, patience, hidden, per_provenance, profile, id_log_alpha, ood_log_alpha);
        const AlgorithmKind kind = parse_algorithm(algorithm);
        const HParams hp = hparams_arg(hparams);
        py::gil_scoped_release release;
        return Trial{run_trial(kind, hp, splits, seed, o)};
      },
      py::arg("algorithm"), py::arg("splits"), py::arg("hparams") = py::dict(), py::arg("seed") = 0, py::arg("steps") = 500,
      py::arg("checkpoints") = 10, py::arg("patience") = 3, py::arg("hidden") = 32, py::arg("per_provenance") = 32,
      py::arg("profile") = "desk", py::arg("id_log_alpha") = -0.6, py::arg("ood_log_alpha") = 0.6);

  m.def(
      "stress_test",
      [](const ModelPredictor& p, const SplitResult& splits) {
        const StressResult r = stress_test(p, splits.tests);
        py::dict out;
        py::list points;
        for (const auto& pt : r.points) points.append(py::make_tuple(pt.log_alpha_target, to_py(to_json(pt.report))));
        out["points"] = points;
        out["fit"] = to_py(to_json(r.fit));
        return out;
      },
      py::arg("predictor"), py::arg("splits"));

  m.def(
      "run_benchmark",
      [](const py::object& config, const std::filesystem::path& out_dir) {
        ExperimentConfig cfg = py::isinstance<py::dict>(config) ? parse_experiment(from_py(config))
                                                                : load_experiment(config.cast<std::filesystem::path>());
        py::gil_scoped_release release;
        return summary_csv(run_benchmark(cfg, out_dir));
      },
      py::arg("config"), py::arg("out_dir"), "Runs a benchmark config (dict or path) and returns summary.csv text");
}
