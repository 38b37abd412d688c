#include "bimag/eval.hpp"
#include "bimag/runtime.hpp"
#include "bimag/train.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace bimag;

namespace {

py::object to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

Json from_py(const py::object& o) {
  return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict observation_dict(const Observation& o) {
  py::dict d;
  d["features"] = Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(o.features.data(), static_cast<Eigen::Index>(o.features.size())));
  if (o.grid) {
    Eigen::MatrixXd g(kGridChannels * kGridSize, kGridSize);
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < kGridSize; ++c) g(r, c) = (*o.grid)[static_cast<std::size_t>(r * kGridSize + c)];
    d["grid"] = g;  // (channel * 32 + row) x col
  } else {
    d["grid"] = py::none();
  }
  return d;
}

Controller& pick_controller(const std::string& name, const Checkpoint* ck, const RolloutConfig& cfg,
                            std::unique_ptr<Controller>& holder) {
  if (name == "expert") holder = std::make_unique<ExpertController>();
  else if (name == "zero") holder = std::make_unique<ZeroController>();
  else if (name == "policy") {
    if (!ck) throw std::invalid_argument("the policy controller needs a checkpoint");
    holder = std::make_unique<PolicyController>(ck->policy, ck->stats, cfg);
  } else {
    throw std::invalid_argument("unknown controller " + name);
  }
  return *holder;
}

// Thin inference handle around a loaded checkpoint.
class PolicyHandle {
 public:
  explicit PolicyHandle(const std::filesystem::path& path) : ck_(load_checkpoint(path)) {}

  py::dict predict(const std::vector<SimState>& history, TaskId task, int prompt_id, std::optional<Phase> teacher) {
    if (static_cast<int>(history.size()) != kHistory) {
      throw std::invalid_argument("predict needs " + std::to_string(kHistory) + " states, oldest first");
    }
    const WorkspaceSpec ws = build_workspace(task);
    std::vector<Observation> obs;
    std::vector<Vec4> states;
    for (const auto& s : history) {
      obs.push_back(observe(s, ws, ck_.policy.config().use_grid));
      states.push_back(s.arms);
    }
    const ForwardOutput out = ck_.policy.forward(PolicyInput{obs, states, prompt_id}, teacher);
    py::dict d;
    d["chunk"] = Eigen::MatrixXd(denormalize_chunk(out.chunk, ck_.stats));
    d["logits"] = Eigen::Vector2d(out.phase.logits);
    d["phase"] = out.phase.predicted;
    d["conditioned_on"] = out.conditioned_on;
    return d;
  }
  py::object config() const { return to_py(to_json(ck_.policy.config())); }
  py::object stats() const { return to_py(to_json(ck_.stats)); }
  long parameter_count() const { return ck_.policy.params().scalar_count(); }
  const Checkpoint& checkpoint() const { return ck_; }

 private:
  Checkpoint ck_;
};

}  // namespace

PYBIND11_MODULE(bimag, m) {
  m.doc() = "Magnetic micromanipulation simulator, demonstration data, chunked imitation policy and evaluation";

  py::enum_<TaskId>(m, "Task").value("A", TaskId::A).value("B", TaskId::B).value("C", TaskId::C);
  py::enum_<Phase>(m, "Phase").value("Approach", Phase::Approach).value("Transport", Phase::Transport);

  m.attr("CHUNK") = kChunk;
  m.attr("HISTORY") = kHistory;
  m.attr("FEATURE_DIM") = kFeatureDim;
  m.attr("FPS") = kFps;

  py::class_<SimConfig>(m, "SimConfig")
      .def(py::init<>())
      .def_readwrite("dt", &SimConfig::dt)
      .def_readwrite("coupling", &SimConfig::coupling)
      .def_readwrite("force_exponent", &SimConfig::force_exponent)
      .def_readwrite("mobility", &SimConfig::mobility)
      .def_readwrite("max_arm_delta", &SimConfig::max_arm_delta)
      .def_readwrite("attach_radius", &SimConfig::attach_radius)
      .def_readwrite("attach_offset", &SimConfig::attach_offset)
      .def_readwrite("slip_threshold", &SimConfig::slip_threshold)
      .def_readwrite("min_distance", &SimConfig::min_distance)
      .def_readwrite("brownian_std", &SimConfig::brownian_std)
      .def_readwrite("rng_seed", &SimConfig::rng_seed)
      .def("validate", &SimConfig::validate)
      .def("to_dict", [](const SimConfig& c) { return to_py(to_json(c)); })
      .def_static("from_dict", [](const py::object& o) { return sim_config_from_json(from_py(o)); });

  py::class_<SimState>(m, "SimState")
      .def(py::init<>())
      .def_readwrite("arms", &SimState::arms)
      .def_readwrite("bead", &SimState::bead)
      .def_readwrite("cargo", &SimState::cargo)
      .def_readwrite("attached", &SimState::attached)
      .def_readwrite("ever_attached", &SimState::ever_attached)
      .def_readwrite("t", &SimState::t)
      .def_readwrite("slips", &SimState::slips)
      .def("to_dict", [](const SimState& s) { return to_py(to_json(s)); })
      .def("__repr__", [](const SimState& s) { return "SimState(" + to_json(s).dump() + ")"; });

  m.def("workspace", [](TaskId task) { return to_py(to_json(build_workspace(task))); }, py::arg("task"),
        "Corridor geometry of a task as a dict (ticks).");
  m.def("initial_state", [](TaskId task, std::uint64_t seed) {
    Rng rng = make_rng(seed, 1);
    return sample_initial_state(build_workspace(task), rng);
  }, py::arg("task"), py::arg("seed") = 0, "Start state drawn the same way as for datasets and rollouts.");
  m.def("magnetic_force", [](const Vec4& arms, const Vec2& bead, const SimConfig& cfg) {
    const ForceResult f = magnetic_force(arms, bead, cfg);
    return py::make_tuple(Vec2(f.force), f.saturated);
  }, py::arg("arms"), py::arg("bead"), py::arg("config") = SimConfig{});
  m.def("step", [](const SimState& s, const Vec4& action, TaskId task, const SimConfig& cfg) {
    return step_sim(s, action, build_workspace(task), cfg);
  }, py::arg("state"), py::arg("action"), py::arg("task"), py::arg("config") = SimConfig{},
        "One simulator step; the noise stream comes from config.rng_seed and state.t.");
  m.def("clip_action", &clip_action, py::arg("action"), py::arg("config") = SimConfig{});
  m.def("expert_action", [](const SimState& s, TaskId task, const SimConfig& cfg) {
    const ExpertDecision d = expert_action(s, build_workspace(task), cfg);
    return py::make_tuple(Vec4(d.action), d.phase);
  }, py::arg("state"), py::arg("task"), py::arg("config") = SimConfig{});
  m.def("success", [](const SimState& s, TaskId task) {
    const SuccessFlags f = check_success(s, build_workspace(task));
    return py::make_tuple(f.approach_done, f.transport_done);
  }, py::arg("state"), py::arg("task"), "(approach_done, transport_done)");
  m.def("observe", [](const SimState& s, TaskId task, bool with_grid) {
    return observation_dict(observe(s, build_workspace(task), with_grid));
  }, py::arg("state"), py::arg("task"), py::arg("with_grid") = false);

  m.def("prompts", [] {
    const PromptBank& bank = prompt_bank();
    std::vector<std::pair<std::string, TaskId>> out;
    for (int i = 0; i < bank.size(); ++i) out.emplace_back(bank.prompts[static_cast<std::size_t>(i)], bank.task_of(i));
    return out;
  }, "(text, task) for every prompt id.");

  m.def("generate_dataset", [](const std::filesystem::path& out, int episodes, std::uint64_t seed,
                               const SimConfig& cfg, bool store_grid) {
    GenerateOptions opts;
    opts.store_grid = store_grid;
    const Dataset ds = generate_dataset(episodes, seed, cfg, opts);
    write_dataset(ds, out, store_grid);
    return to_py(meta_to_json(ds.meta, ds.episodes));
  }, py::arg("out"), py::arg("episodes") = 75, py::arg("seed") = 0, py::arg("config") = SimConfig{},
        py::arg("store_grid") = false, "Writes an expert dataset directory and returns its metadata.");
  m.def("load_dataset_meta", [](const std::filesystem::path& dir) {
    const Dataset ds = load_dataset(dir);
    py::dict d;
    d["meta"] = to_py(meta_to_json(ds.meta, ds.episodes));
    d["stats"] = to_py(to_json(ds.stats));
    std::vector<std::size_t> counts;
    for (Split s : {Split::Train, Split::Val, Split::Test}) counts.push_back(ds.split(s).size());
    d["split_counts"] = counts;
    return d;
  }, py::arg("dir"));

  m.def("train", [](const std::filesystem::path& data, const std::filesystem::path& out, int steps, int batch,
                    double lr, std::uint64_t seed, bool augment, const py::object& model,
                    std::optional<std::function<void(py::object)>> on_log) {
    const Dataset ds = load_dataset(data);
    ModelConfig mc = model.is_none() ? ModelConfig{} : model_config_from_json(from_py(model));
    TrainConfig tc;
    tc.steps = steps;
    tc.batch = batch;
    tc.lr_max = lr;
    tc.seed = seed;
    tc.augment = augment;
    TrainOptions opts;
    opts.out_dir = out;
    if (on_log) opts.on_log = [&](const Json& j) { (*on_log)(to_py(j)); };
    const TrainResult r = [&] {
      if (on_log) return train_loop(ds, mc, tc, opts);  // callbacks need the GIL
      py::gil_scoped_release release;
      return train_loop(ds, mc, tc, opts);
    }();
    py::dict d;
    d["best_step"] = r.best_step;
    d["best_val_loss"] = r.best_val_loss;
    d["initial_train_loss"] = r.initial_train.loss;
    d["final_train_loss"] = r.final_train.loss;
    d["final_train_phase_accuracy"] = r.final_train.phase_accuracy;
    d["best_checkpoint"] = r.best_checkpoint->string();
    d["last_checkpoint"] = r.last_checkpoint->string();
    return d;
  }, py::arg("data"), py::arg("out"), py::arg("steps") = 2000, py::arg("batch") = 16, py::arg("lr") = 1e-3,
        py::arg("seed") = 0, py::arg("augment") = true, py::arg("model") = py::none(),
        py::arg("on_log") = py::none());

  py::class_<PolicyHandle>(m, "Policy")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("predict", &PolicyHandle::predict, py::arg("history"), py::arg("task"), py::arg("prompt_id"),
           py::arg("teacher_phase") = py::none(),
           "Chunk in ticks (5x4), phase logits and the phase the decoder was conditioned on.")
      .def_property_readonly("config", &PolicyHandle::config)
      .def_property_readonly("stats", &PolicyHandle::stats)
      .def_property_readonly("parameter_count", &PolicyHandle::parameter_count);

  m.def("rollout", [](const std::string& controller, TaskId task, std::uint64_t seed, std::optional<int> prompt,
                      int max_steps, const PolicyHandle* policy, const SimConfig& cfg) {
    RolloutConfig rc;
    rc.max_steps = max_steps;
    std::unique_ptr<Controller> holder;
    Controller& c = pick_controller(controller, policy ? &policy->checkpoint() : nullptr, rc, holder);
    const int p = prompt.value_or(prompt_bank().prompts_for(task).front());
    RolloutResult r;
    {
      py::gil_scoped_release release;
      r = run_rollout(c, task, p, seed, cfg, rc);
    }
    py::list lines;
    std::istringstream in(trajectory_to_jsonl(r, rc));
    for (std::string line; std::getline(in, line);) lines.append(to_py(Json::parse(line)));
    return lines;
  }, py::arg("controller"), py::arg("task"), py::arg("seed") = 0, py::arg("prompt_id") = py::none(),
        py::arg("max_steps") = 600, py::arg("policy") = nullptr, py::arg("config") = SimConfig{},
        "Trajectory records: a header followed by one dict per step.");

  m.def("closed_loop", [](const std::string& controller, int trials, std::uint64_t seed, int max_steps,
                          const PolicyHandle* policy, const SimConfig& cfg) {
    RolloutConfig rc;
    rc.max_steps = max_steps;
    std::unique_ptr<Controller> holder;
    Controller& c = pick_controller(controller, policy ? &policy->checkpoint() : nullptr, rc, holder);
    SuccessTable t;
    {
      py::gil_scoped_release release;
      t = closed_loop_eval(c, kAllTasks, trials, seed, cfg, rc);
    }
    return to_py(to_json(t));
  }, py::arg("controller"), py::arg("trials") = 20, py::arg("seed") = 11, py::arg("max_steps") = 600,
        py::arg("policy") = nullptr, py::arg("config") = SimConfig{});

  m.def("evaluate", [](const PolicyHandle& policy, const std::filesystem::path& data, const std::string& split) {
    const Dataset ds = load_dataset(data);
    const Checkpoint& ck = policy.checkpoint();
    const SampleSet set(ds.split(parse_split(split)), ck.stats, ck.policy.config().use_grid);
    MetricReport mr;
    {
      py::gil_scoped_release release;
      mr = evaluate_offline(ck.policy, ck.stats, set);
    }
    return to_py(to_json(mr));
  }, py::arg("policy"), py::arg("data"), py::arg("split") = "test");

  m.def("metrics", [](const std::vector<Eigen::MatrixXd>& preds, const std::vector<Eigen::MatrixXd>& gts,
                      const std::vector<Phase>& phases, const std::vector<Eigen::Vector2d>& logits, const Vec4& mean,
                      const Vec4& std) {
    NormStats s;
    s.mean = mean;
    s.std = std;
    return to_py(to_json(compute_metrics(preds, gts, phases, logits, s)));
  }, py::arg("preds"), py::arg("gts"), py::arg("phases"), py::arg("logits"), py::arg("mean"), py::arg("std"),
        "Metrics on normalized chunks, reported in ticks.");

  py::class_<ChunkBuffer>(m, "ChunkBuffer")
      .def(py::init<double, int>(), py::arg("decay") = kDefaultDecay, py::arg("horizon") = kChunk)
      .def("push", &ChunkBuffer::push, py::arg("t_r"), py::arg("chunk"))
      .def("prune", &ChunkBuffer::prune, py::arg("t"))
      .def("clear", &ChunkBuffer::clear)
      .def("ensemble", &ChunkBuffer::ensemble, py::arg("t"))
      .def("weight_mass", &ChunkBuffer::weight_mass, py::arg("t"))
      .def("active", &ChunkBuffer::active, py::arg("t"))
      .def("__len__", &ChunkBuffer::size);

  m.def("grad_check", [](std::uint64_t seed) {
    const Dataset ds = generate_dataset(10, seed, SimConfig{});
    const EpisodeRecord& ep = *ds.split(Split::Train).front();
    TrainingSample s = make_sample(ep, ep.length() / 2, ds.stats);
    attach_grids(s, ep, build_workspace(ep.task));
    GradCheckReport r;
    {
      py::gil_scoped_release release;
      r = grad_check(tiny_model_config(seed), s);
    }
    return to_py(to_json(r));
  }, py::arg("seed") = 0, "Central-difference check of every gradient of a tiny model.");

  py::register_exception<InvalidAction>(m, "InvalidAction", PyExc_ValueError);
  py::register_exception<NoActionError>(m, "NoActionError", PyExc_RuntimeError);
}
