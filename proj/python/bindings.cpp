#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mtil/data.hpp"
#include "mtil/envs.hpp"
#include "mtil/evalm.hpp"
#include "mtil/infer.hpp"
#include "mtil/policy.hpp"
#include "mtil/train.hpp"

namespace py = pybind11;
using namespace mtil;

namespace {

py::array_t<double> rows_to_array(const std::vector<std::vector<double>>& rows) {
  size_t n = rows.size();
  size_t d = n ? rows[0].size() : 0;
  py::array_t<double> out({n, d});
  auto buf = out.mutable_unchecked<2>();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) buf(i, j) = rows[i][j];
  return out;
}

std::vector<double> array_to_vector(const py::array_t<double>& a) {
  auto buf = a.unchecked<1>();
  std::vector<double> out(buf.shape(0));
  for (py::ssize_t i = 0; i < buf.shape(0); ++i) out[i] = buf(i);
  return out;
}

AccuracyMatrix matrix_from_python(const std::vector<std::vector<double>>& rows,
                                  const std::vector<double>& base) {
  AccuracyMatrix m;
  m.n_tasks = static_cast<int>(rows.size());
  m.rows = rows;
  m.base = base.empty() ? std::vector<double>(rows.size(), 0.0) : base;
  m.validate();
  return m;
}

PolicyConfig config_from_kwargs(int obs_dim, int action_dim, int chunk_k, int d_model,
                                int d_state, int n_layers, const std::string& head,
                                const std::string& backbone, int gmm_components,
                                const std::string& env_id) {
  PolicyConfig cfg;
  cfg.obs_dim = obs_dim;
  cfg.action_dim = action_dim;
  cfg.chunk_k = chunk_k;
  cfg.d_model = d_model;
  cfg.d_state = d_state;
  cfg.n_layers = n_layers;
  cfg.head = head == "gmm" ? HeadKind::kGmm : HeadKind::kLinearChunk;
  cfg.backbone = backbone == "mlp" ? Backbone::kMlp : Backbone::kMamba;
  cfg.gmm_components = gmm_components;
  cfg.env_id = env_id;
  cfg.validate();
  return cfg;
}

RolloutConfig rollout_config(bool aggregation, double gamma, int t_max, int reset_interval,
                             bool gmm_sample) {
  RolloutConfig rc;
  rc.aggregation.enabled = aggregation;
  rc.aggregation.gamma = gamma;
  rc.t_max = t_max;
  if (reset_interval > 0) rc.history_reset_interval = reset_interval;
  rc.gmm_sample_actions = gmm_sample;
  return rc;
}

}  // namespace

PYBIND11_MODULE(_mtil, m) {
  m.doc() = "selective state-space imitation learning on toy POMDP tasks";

  py::register_exception<TapeError>(m, "TapeError");
  py::register_exception<FormatError>(m, "FormatError");
  py::register_exception<EnvError>(m, "EnvError");
  py::register_exception<InferError>(m, "InferError");

  py::class_<Env>(m, "Env")
      .def("reset", &Env::reset, py::arg("seed"))
      .def(
          "step",
          [](Env& env, const std::vector<double>& action) {
            StepResult r = env.step(action);
            return py::make_tuple(r.observation, r.done, r.success);
          },
          py::arg("action"))
      .def("expert_action", &Env::expert_action)
      .def_property_readonly("obs_dim", [](const Env& e) { return e.spec().obs_dim; })
      .def_property_readonly("action_dim", [](const Env& e) { return e.spec().action_dim; })
      .def_property_readonly("horizon", [](const Env& e) { return e.spec().horizon; })
      .def_property_readonly("task_id", [](const Env& e) { return e.spec().task_id; });

  m.def("make_env", &make_env, py::arg("env_id"));
  m.def("lifelong_task_family", &lifelong_task_family);

  py::class_<Trajectory>(m, "Trajectory")
      .def_property_readonly("observations",
                             [](const Trajectory& t) { return rows_to_array(t.observations); })
      .def_property_readonly("actions",
                             [](const Trajectory& t) { return rows_to_array(t.actions); })
      .def_readonly("task_id", &Trajectory::task_id)
      .def_readonly("seed", &Trajectory::seed)
      .def_readonly("success", &Trajectory::success)
      .def("__len__", &Trajectory::length);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("obs_dim", &Dataset::obs_dim)
      .def_readonly("action_dim", &Dataset::action_dim)
      .def("__len__", [](const Dataset& d) { return d.trajectories.size(); })
      .def(
          "__getitem__",
          [](const Dataset& d, size_t i) {
            if (i >= d.trajectories.size()) throw py::index_error();
            return d.trajectories[i];
          },
          py::return_value_policy::reference_internal)
      .def("save", &write_dataset, py::arg("path"))
      .def("__eq__", [](const Dataset& a, const Dataset& b) { return a == b; });

  m.def("load_dataset", &read_dataset, py::arg("path"));
  m.def("generate_demos",
        [](const std::string& env_id, int n, uint64_t seed) {
          auto env = make_env(env_id);
          return generate_demos(*env, n, seed);
        },
        py::arg("env_id"), py::arg("n"), py::arg("seed"));
  m.def("export_csv", &export_csv, py::arg("dataset"), py::arg("directory"));

  m.def(
      "chunk_targets",
      [](const Trajectory& traj, int t, int k) { return rows_to_array(chunk_targets(traj, t, k)); },
      py::arg("trajectory"), py::arg("t"), py::arg("k"),
      "K-row action-chunk target at 1-based step t; the tail repeats the final action");

  py::class_<Policy>(m, "Policy")
      .def_property_readonly("obs_dim", [](const Policy& p) { return p.cfg.obs_dim; })
      .def_property_readonly("action_dim", [](const Policy& p) { return p.cfg.action_dim; })
      .def_property_readonly("chunk_k", [](const Policy& p) { return p.cfg.chunk_k; })
      .def_property_readonly("env_id", [](const Policy& p) { return p.cfg.env_id; })
      .def_property_readonly("parameter_count",
                             [](const Policy& p) { return p.params.total_size(); })
      .def("parameters", [](const Policy& p) { return p.params.flatten(); })
      .def("save", &save_checkpoint, py::arg("path"));

  m.def(
      "make_policy",
      [](int obs_dim, int action_dim, int chunk_k, int d_model, int d_state, int n_layers,
         const std::string& head, const std::string& backbone, int gmm_components,
         const std::string& env_id, uint64_t seed) {
        return Policy::init(config_from_kwargs(obs_dim, action_dim, chunk_k, d_model, d_state,
                                               n_layers, head, backbone, gmm_components, env_id),
                            seed);
      },
      py::arg("obs_dim"), py::arg("action_dim"), py::arg("chunk_k") = 1,
      py::arg("d_model") = 64, py::arg("d_state") = 16, py::arg("n_layers") = 4,
      py::arg("head") = "linear", py::arg("backbone") = "mamba", py::arg("gmm_components") = 5,
      py::arg("env_id") = "", py::arg("seed") = 7);

  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  m.def(
      "train",
      [](Policy& policy, const Dataset& dataset, int epochs, double lr0, double weight_decay,
         int reset_interval, uint64_t seed, const std::string& log_path) {
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.lr0 = lr0;
        cfg.weight_decay = weight_decay;
        if (reset_interval > 0) cfg.history_reset_interval = reset_interval;
        cfg.loss = policy.cfg.head == HeadKind::kGmm ? LossKind::kGmmNll : LossKind::kMse;
        cfg.seed = seed;
        cfg.log_path = log_path;
        auto logs = train(policy, dataset, cfg);
        py::list out;
        for (const auto& l : logs) {
          py::dict d;
          d["epoch"] = l.epoch;
          d["mean_loss"] = l.mean_loss;
          d["lr"] = l.lr;
          d["seconds"] = l.seconds;
          d["updates"] = l.updates;
          out.append(d);
        }
        return out;
      },
      py::arg("policy"), py::arg("dataset"), py::arg("epochs") = 40, py::arg("lr0") = 1e-3,
      py::arg("weight_decay") = 1e-4, py::arg("reset_interval") = 0, py::arg("seed") = 7,
      py::arg("log_path") = "");

  m.def(
      "rollout",
      [](const Policy& policy, const std::string& env_id, uint64_t seed, bool aggregation,
         double gamma, int t_max, int reset_interval, bool gmm_sample) {
        auto env = make_env(env_id);
        RolloutResult r = rollout(policy, *env,
                                  rollout_config(aggregation, gamma, t_max, reset_interval,
                                                 gmm_sample),
                                  seed);
        py::dict out;
        out["observations"] = rows_to_array(r.trajectory.observations);
        out["actions"] = rows_to_array(r.trajectory.actions);
        out["success"] = r.success;
        out["steps"] = r.trajectory.length();
        return out;
      },
      py::arg("policy"), py::arg("env_id"), py::arg("seed") = 0, py::arg("aggregation") = false,
      py::arg("gamma") = 0.9, py::arg("t_max") = 0, py::arg("reset_interval") = 0,
      py::arg("gmm_sample") = false);

  m.def(
      "success_rate",
      [](const Policy& policy, const std::string& env_id, int episodes, uint64_t seed,
         bool aggregation, double gamma, int reset_interval, int workers) {
        RateResult r = success_rate(policy, env_id, episodes, seed,
                                    rollout_config(aggregation, gamma, 0, reset_interval, false),
                                    workers);
        py::dict out;
        out["rate"] = r.rate;
        out["ci_lo"] = r.ci.lo;
        out["ci_hi"] = r.ci.hi;
        out["episodes"] = r.episodes;
        out["base_seed"] = r.base_seed;
        return out;
      },
      py::arg("policy"), py::arg("env_id"), py::arg("episodes") = 100, py::arg("seed") = 5001,
      py::arg("aggregation") = false, py::arg("gamma") = 0.9, py::arg("reset_interval") = 0,
      py::arg("workers") = 0);

  m.def(
      "fwt",
      [](const std::vector<std::vector<double>>& rows, const std::vector<double>& base) {
        return fwt(matrix_from_python(rows, base));
      },
      py::arg("matrix"), py::arg("base"));
  m.def(
      "nbt",
      [](const std::vector<std::vector<double>>& rows) {
        return nbt(matrix_from_python(rows, {}));
      },
      py::arg("matrix"));
  m.def(
      "auc",
      [](const std::vector<std::vector<double>>& rows) {
        return auc(matrix_from_python(rows, {}));
      },
      py::arg("matrix"));

  m.def("cosine_lr", &cosine_lr, py::arg("step"), py::arg("total"), py::arg("lr0"));
  m.def(
      "wilson_interval",
      [](int successes, int n) {
        WilsonInterval w = wilson_interval(successes, n);
        return py::make_tuple(w.lo, w.hi);
      },
      py::arg("successes"), py::arg("n"));

  m.def(
      "grad_check_quadratic",
      [](const py::array_t<double>& theta, double eps) {
        DiffArray t({static_cast<int>(theta.size())}, array_to_vector(theta));
        auto f = [](Tape& tape, const DiffArray& x) { return tape.sum(tape.square(x)); };
        return grad_check(f, t, eps);
      },
      py::arg("theta"), py::arg("eps") = 1e-5,
      "verification hook: finite-difference error of the tape on <theta, theta>");

  m.attr("__version__") = "0.1.0";
}
