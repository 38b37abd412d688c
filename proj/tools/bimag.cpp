// bimag command-line entry point.

#include "bimag/eval.hpp"
#include "bimag/server.hpp"
#include "bimag/train.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>

using namespace bimag;
namespace fs = std::filesystem;

namespace {

std::map<std::string, TaskId> task_map() { return {{"A", TaskId::A}, {"B", TaskId::B}, {"C", TaskId::C}}; }

SimConfig load_sim(const std::string& path) {
  SimConfig cfg;
  if (!path.empty()) cfg = sim_config_from_json(read_json_file(path));
  cfg.validate();
  return cfg;
}

struct GenArgs {
  int episodes = 75;
  std::uint64_t seed = 0;
  std::string out;
  std::string sim;
  int max_steps = 600;
  double recovery_fraction = GenerateOptions{}.recovery_fraction;
  bool store_grid = false;
};

int run_gen(const GenArgs& a) {
  GenerateOptions opts;
  opts.max_steps = a.max_steps;
  opts.recovery_fraction = a.recovery_fraction;
  opts.store_grid = a.store_grid;
  const Dataset ds = generate_dataset(a.episodes, a.seed, load_sim(a.sim), opts);
  write_dataset(ds, a.out, a.store_grid);
  const auto counts = split_counts(a.episodes, opts.split_ratio);
  std::printf("gen-data: %d episodes (train %d, val %d, test %d), %ld frames, %d discarded -> %s\n", a.episodes,
              counts[0], counts[1], counts[2], ds.meta.total_frames, ds.meta.discarded, a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config;
  int steps = TrainConfig{}.steps;
  int batch = TrainConfig{}.batch;
  double lr = TrainConfig{}.lr_max;
  std::uint64_t seed = 0;
  bool no_augment = false;
  int max_val_samples = 0;
  bool quiet = false;
};

int run_train(const TrainArgs& a, const CLI::App& cmd) {
  ModelConfig mc;
  TrainConfig tc;
  if (!a.config.empty()) {
    const Json j = read_json_file(a.config);
    if (j.contains("model")) mc = model_config_from_json(j.at("model"));
    if (j.contains("train")) tc = train_config_from_json(j.at("train"));
  }
  // explicit flags win over the config file
  if (cmd.count("--steps")) tc.steps = a.steps;
  if (cmd.count("--batch")) tc.batch = a.batch;
  if (cmd.count("--lr")) tc.lr_max = a.lr;
  if (cmd.count("--seed")) {
    tc.seed = a.seed;
    mc.seed = a.seed;
  }
  if (a.no_augment) tc.augment = false;
  if (cmd.count("--max-val-samples")) tc.max_val_samples = a.max_val_samples;
  tc.validate();
  mc.validate();

  const Dataset ds = load_dataset(a.data);
  fs::create_directories(a.out);
  TrainOptions opts;
  opts.out_dir = fs::path(a.out);
  if (!a.quiet) {
    opts.on_log = [](const Json& r) {
      if (r.contains("val")) {
        std::fprintf(stderr, "step %d loss %.5f val %.5f\n", r.at("step").get<int>() + 1, r.at("loss").get<double>(),
                     r.at("val").at("loss").get<double>());
      }
    };
  }
  const TrainResult r = train_loop(ds, mc, tc, opts);
  std::printf("train: %d steps, train loss %.5f -> %.5f, phase acc %.4f, best step %d -> %s\n", tc.steps,
              r.initial_train.loss_action, r.final_train.loss_action, r.final_train.phase_accuracy, r.best_step,
              a.out.c_str());
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string report;
  std::string split = "test";
  std::string controller = "policy";
  std::string sim;
  bool closed_loop = false;
  bool offline = true;
  int trials = 20;
  std::uint64_t seed = 11;
  int max_steps = 600;
};

int run_eval(EvalArgs a) {
  std::optional<Checkpoint> ck;
  if (a.controller == "policy" || a.offline) {
    if (a.ckpt.empty()) throw CLI::ValidationError("--ckpt", "required for the policy controller and offline metrics");
    ck = load_checkpoint(a.ckpt);
  }
  std::optional<MetricReport> metrics;
  if (a.offline) {
    if (a.data.empty()) throw CLI::ValidationError("--data", "required for offline metrics");
    const Dataset ds = load_dataset(a.data);
    const SampleSet samples(ds.split(parse_split(a.split)), ck->stats, ck->policy.config().use_grid);
    metrics = evaluate_offline(ck->policy, ck->stats, samples);
  }
  std::optional<SuccessTable> table;
  if (a.closed_loop) {
    RolloutConfig rc;
    rc.max_steps = a.max_steps;
    const SimConfig sim = load_sim(a.sim);
    std::unique_ptr<Controller> ctl;
    if (a.controller == "policy") {
      ctl = std::make_unique<PolicyController>(ck->policy, ck->stats, rc);
    } else if (a.controller == "expert") {
      ctl = std::make_unique<ExpertController>();
    } else {
      ctl = std::make_unique<ZeroController>();
    }
    table = closed_loop_eval(*ctl, kAllTasks, a.trials, a.seed, sim, rc);
  }
  write_report(metrics ? &*metrics : nullptr, table ? &*table : nullptr, a.report);
  std::string line = "eval:";
  char buf[160];
  if (metrics) {
    std::snprintf(buf, sizeof buf, " rmse %.3f, direction %.2f%%, phase %.2f%% on %ld %s samples;",
                  metrics->rmse.overall, 100.0 * metrics->direction.accuracy.value_or(0.0),
                  100.0 * metrics->phase.overall.value_or(0.0), metrics->n_samples, a.split.c_str());
    line += buf;
  }
  if (table) {
    for (const auto& row : table->rows) {
      std::snprintf(buf, sizeof buf, " %s %.0f%%/%.0f%%", task_name(row.task).c_str(), 100.0 * row.approach_rate(),
                    100.0 * row.transport_rate());
      line += buf;
    }
    line += " (approach/transport);";
  }
  std::printf("%s -> %s\n", line.c_str(), a.report.c_str());
  return 0;
}

struct RolloutArgs {
  std::string ckpt;
  std::string out;
  std::string controller = "policy";
  std::string sim;
  TaskId task = TaskId::A;
  std::uint64_t seed = 0;
  int prompt = -1;
  int max_steps = 600;
  int replan_every = 1;
  double decay = kDefaultDecay;
  bool teacher_phase = false;
};

int run_rollout_cmd(const RolloutArgs& a) {
  RolloutConfig rc;
  rc.max_steps = a.max_steps;
  rc.replan_every = a.replan_every;
  rc.decay = a.decay;
  rc.teacher_phase = a.teacher_phase;
  rc.validate();
  const SimConfig sim = load_sim(a.sim);
  const int prompt = a.prompt >= 0 ? a.prompt : prompt_bank().prompts_for(a.task).front();
  if (prompt >= prompt_bank().size() || prompt_bank().task_of(prompt) != a.task) {
    throw CLI::ValidationError("--prompt", "prompt does not belong to the task");
  }
  std::optional<Checkpoint> ck;
  std::unique_ptr<Controller> ctl;
  if (a.controller == "policy") {
    if (a.ckpt.empty()) throw CLI::ValidationError("--ckpt", "required for the policy controller");
    ck = load_checkpoint(a.ckpt);
    ctl = std::make_unique<PolicyController>(ck->policy, ck->stats, rc);
  } else if (a.controller == "expert") {
    ctl = std::make_unique<ExpertController>();
  } else {
    ctl = std::make_unique<ZeroController>();
  }
  const RolloutResult r = run_rollout(*ctl, a.task, prompt, a.seed, sim, rc);
  write_text_file(a.out, trajectory_to_jsonl(r, rc));
  std::printf("rollout: task %s seed %llu, %zu steps, approach %s, transport %s%s -> %s\n", task_name(a.task).c_str(),
              static_cast<unsigned long long>(a.seed), r.steps.size(), r.success.approach_done ? "yes" : "no",
              r.success.transport_done ? "yes" : "no", r.crashed ? " (crashed)" : "", a.out.c_str());
  return r.crashed ? 1 : 0;
}

int run_grad_check(std::uint64_t seed, const std::string& out) {
  const Dataset ds = generate_dataset(10, seed, SimConfig{});
  const auto train = ds.split(Split::Train);
  const EpisodeRecord& ep = *train.front();
  TrainingSample s = make_sample(ep, ep.length() / 2, ds.stats);
  attach_grids(s, ep, build_workspace(ep.task));
  const GradCheckReport r = grad_check(tiny_model_config(seed), s);
  if (!out.empty()) write_text_file(out, to_json(r).dump(2) + "\n");
  std::printf("grad-check: %s, max rel error %.3e over %ld entries in %zu groups (worst %s)\n",
              r.passed() ? "pass" : "FAIL", r.max_rel_error, r.entries, r.groups.size(), r.worst_group.c_str());
  return r.passed() ? 0 : 1;
}

int run_inspect(const std::string& dir) {
  const Dataset ds = load_dataset(dir);
  std::array<int, 3> per_task{};
  std::array<int, 3> per_split{};
  long frames = 0;
  long samples = 0;
  for (const auto& ep : ds.episodes) {
    ++per_task[static_cast<std::size_t>(ep.task)];
    ++per_split[static_cast<std::size_t>(ep.split)];
    frames += ep.length();
    samples += sample_count(ep.length());
  }
  int invalid = 0;
  for (const auto& ep : ds.episodes) invalid += validate_episode(ep).empty() ? 0 : 1;
  std::printf("inspect: %zu episodes, %ld frames, %ld samples; tasks A %d B %d C %d; splits %d/%d/%d; source %s%s\n",
              ds.episodes.size(), frames, samples, per_task[0], per_task[1], per_task[2], per_split[0], per_split[1],
              per_split[2], ds.meta.source.c_str(),
              invalid ? (", " + std::to_string(invalid) + " invalid episodes").c_str() : "");
  return invalid ? 1 : 0;
}

SessionServer* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

struct ServeArgs {
  std::string address = "127.0.0.1";
  int port = 8765;
  int tick_ms = 100;
  std::string ckpt;
  std::string record_dir;
  std::string sim;
};

int run_serve(const ServeArgs& a) {
  ServeOptions opts;
  opts.address = a.address;
  opts.port = static_cast<std::uint16_t>(a.port);
  opts.tick_ms = a.tick_ms;
  opts.sim = load_sim(a.sim);
  if (!a.ckpt.empty()) opts.checkpoint = fs::path(a.ckpt);
  if (!a.record_dir.empty()) opts.record_root = fs::path(a.record_dir);
  SessionServer server(opts);
  const auto port = server.listen();
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::printf("serve: listening on ws://%s:%u (rollout %s, recording %s)\n", a.address.c_str(), port,
              a.ckpt.empty() ? "off" : "on", a.record_dir.empty() ? "in memory" : a.record_dir.c_str());
  std::fflush(stdout);
  server.run();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bimag: bimanual magnetic micromanipulation simulator and chunked imitation policy"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate an expert demonstration dataset");
  gen_cmd->add_option("--episodes", gen.episodes, "Episode count (>= 10)")->check(CLI::Range(10, 100000));
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--sim", gen.sim, "SimConfig JSON file");
  gen_cmd->add_option("--max-steps", gen.max_steps, "Expert step budget per episode")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--recovery-fraction", gen.recovery_fraction, "Share of mid-course recovery starts")
      ->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_flag("--store-grid", gen.store_grid, "Store occupancy grids in the episode files");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the policy on a dataset");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--config", tr.config, "JSON with optional model and train objects")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--steps", tr.steps, "Optimizer steps")->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", tr.lr, "Peak learning rate")->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", tr.seed, "Initialization and sampling seed");
  train_cmd->add_option("--max-val-samples", tr.max_val_samples, "Validation prefix size (0 = all)")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_flag("--no-augment", tr.no_augment, "Disable photometric augmentation");
  train_cmd->add_flag("--quiet", tr.quiet, "No progress lines");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Offline metrics and closed-loop success");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint file")->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--report", ev.report, "Report JSON path (a .txt table is written next to it)")->required();
  eval_cmd->add_option("--split", ev.split, "Split for offline metrics")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--controller", ev.controller, "Closed-loop controller")
      ->check(CLI::IsMember({"policy", "expert", "zero"}));
  eval_cmd->add_flag("--closed-loop", ev.closed_loop, "Run seeded rollouts on every task");
  eval_cmd->add_flag("!--no-offline", ev.offline, "Skip offline metrics");
  eval_cmd->add_option("--trials", ev.trials, "Rollouts per task")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ev.seed, "Trial seed");
  eval_cmd->add_option("--max-steps", ev.max_steps, "Rollout step budget")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--sim", ev.sim, "SimConfig JSON file");

  RolloutArgs ro;
  auto* ro_cmd = app.add_subcommand("rollout", "Run one closed-loop episode and log the trajectory");
  ro_cmd->add_option("--ckpt", ro.ckpt, "Checkpoint file")->check(CLI::ExistingFile);
  ro_cmd->add_option("--out", ro.out, "Trajectory JSONL path")->required();
  ro_cmd->add_option("--controller", ro.controller, "Controller")->check(CLI::IsMember({"policy", "expert", "zero"}));
  ro_cmd->add_option("--task", ro.task, "Task A, B or C")->transform(CLI::CheckedTransformer(task_map()));
  ro_cmd->add_option("--seed", ro.seed, "Rollout seed");
  ro_cmd->add_option("--prompt", ro.prompt, "Prompt id (default: first prompt of the task)");
  ro_cmd->add_option("--max-steps", ro.max_steps, "Step budget")->check(CLI::PositiveNumber);
  ro_cmd->add_option("--replan-every", ro.replan_every, "Replanning period")->check(CLI::Range(1, kChunk));
  ro_cmd->add_option("--decay", ro.decay, "Ensembling decay")->check(CLI::NonNegativeNumber);
  ro_cmd->add_flag("--teacher-phase", ro.teacher_phase, "Condition on the attachment-derived phase");
  ro_cmd->add_option("--sim", ro.sim, "SimConfig JSON file");

  std::uint64_t gc_seed = 0;
  std::string gc_out;
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of every parameter gradient");
  gc_cmd->add_option("--seed", gc_seed, "Seed for the tiny model and its sample");
  gc_cmd->add_option("--out", gc_out, "Report JSON path");

  std::string inspect_dir;
  auto* inspect_cmd = app.add_subcommand("inspect", "Summarize a dataset directory");
  inspect_cmd->add_option("dir", inspect_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "Websocket session server for teleoperation and live rollouts");
  serve_cmd->add_option("--address", sv.address, "Bind address");
  serve_cmd->add_option("--port", sv.port, "Port (0 = any free port)")->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--tick-ms", sv.tick_ms, "Rollout tick period")->check(CLI::PositiveNumber);
  serve_cmd->add_option("--ckpt", sv.ckpt, "Checkpoint enabling rollout mode")->check(CLI::ExistingFile);
  serve_cmd->add_option("--record-dir", sv.record_dir, "Root directory for recorded episodes");
  serve_cmd->add_option("--sim", sv.sim, "SimConfig JSON file");

  auto* ws_cmd = app.add_subcommand("workspace", "Workspace geometry");
  std::string ws_out;
  auto* ws_export = ws_cmd->add_subcommand("export", "Write the geometry of every task as JSON");
  ws_export->add_option("--out", ws_out, "Output JSON path")->required();
  ws_cmd->require_subcommand(1);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr, *train_cmd);
    if (*eval_cmd) return run_eval(ev);
    if (*ro_cmd) return run_rollout_cmd(ro);
    if (*gc_cmd) return run_grad_check(gc_seed, gc_out);
    if (*inspect_cmd) return run_inspect(inspect_dir);
    if (*serve_cmd) return run_serve(sv);
    if (*ws_export) {
      write_text_file(ws_out, export_workspaces().dump(2) + "\n");
      std::printf("workspace export: 3 tasks -> %s\n", ws_out.c_str());
      return 0;
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
