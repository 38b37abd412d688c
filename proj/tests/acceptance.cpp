// Acceptance suite: one PASS/FAIL line per criterion.
//
//   bimag_acceptance [--only name ...] [--cli path/to/bimag] [--workdir dir]
//
// With --cli the determinism check drives the command-line tool; otherwise it
// calls the same library entry points directly.

#include "bimag/eval.hpp"
#include "bimag/train.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace bimag;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Relative path -> contents for every regular file below dir (or dir itself).
std::map<std::string, std::string> snapshot(const fs::path& p) {
  std::map<std::string, std::string> files;
  if (fs::is_regular_file(p)) {
    files[p.filename().string()] = slurp(p);
    return files;
  }
  for (const auto& e : fs::recursive_directory_iterator(p)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), p).string()] = slurp(e.path());
  }
  return files;
}

// Empty when identical, otherwise the first differing file.
std::string compare_trees(const fs::path& a, const fs::path& b) {
  const auto x = snapshot(a), y = snapshot(b);
  if (x.empty()) return "no files under " + a.string();
  for (const auto& [name, content] : x) {
    const auto it = y.find(name);
    if (it == y.end()) return name + " missing in second run";
    if (it->second != content) return name + " differs";
  }
  if (x.size() != y.size()) return "file sets differ";
  return "";
}

// ---------------------------------------------------------------------------

Outcome grad_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = generate_dataset(10, 0, SimConfig{});
  const EpisodeRecord& ep = *ds.split(Split::Train).front();
  TrainingSample s = make_sample(ep, ep.length() / 2, ds.stats);
  attach_grids(s, ep, build_workspace(ep.task));
  const GradCheckReport r = grad_check(tiny_model_config(0), s, 1e-5, 1e-4);
  const double secs = seconds_since(t0);
  return {r.passed() && secs < 60.0,
          fmt("max rel error %.3e < 1e-4 over %ld entries, %zu/%d groups, %.1f s < 60 s", r.max_rel_error, r.entries,
              r.groups.size(), r.total_groups, secs)};
}

Outcome ensembling_oracle() {
  Rng rng = make_rng(2024);
  double worst = 0.0;
  long steps = 0;
  bool clip_ok = true;
  std::unique_ptr<Policy> policy;
  const NormStats& stats = testutil::tiny_dataset().stats;
  for (int trial = 0; trial < 100; ++trial) {
    if (trial % 10 == 0) {
      ModelConfig mc;
      mc.seed = static_cast<std::uint64_t>(trial);
      policy = std::make_unique<Policy>(mc);
      testutil::perturb(*policy, 0.05, 500 + static_cast<std::uint64_t>(trial));
    }
    RolloutConfig cfg;
    cfg.max_steps = 20 + static_cast<int>(uniform_index(rng, 30));
    cfg.replan_every = 1 + static_cast<int>(uniform_index(rng, kChunk));
    cfg.decay = uniform(rng, 0.0, 0.3);
    cfg.warmup_hold = uniform01(rng) < 0.5;
    const TaskId task = kAllTasks[uniform_index(rng, 3)];
    const auto prompts = prompt_bank().prompts_for(task);
    const int prompt = prompts[uniform_index(rng, prompts.size())];
    PolicyController ctl(*policy, stats, cfg);
    const RolloutResult r = run_rollout(ctl, task, prompt, uniform_index(rng, 1u << 30), SimConfig{}, cfg);
    if (r.crashed) return {false, "rollout crashed: " + r.error};
    std::vector<oracle::StoredChunk> logged;
    for (const auto& s : r.steps) {
      if (s.pushed) {
        oracle::StoredChunk c{s.pushed->t_r, {}};
        for (int k = 0; k < kChunk; ++k) {
          const auto row = s.pushed->chunk.row(k);
          c.rows.push_back({row[0], row[1], row[2], row[3]});
        }
        logged.push_back(c);
      }
      const auto ref = oracle::ensemble(logged, s.t, cfg.decay, kChunk);
      if (!ref) {
        if (!s.held) return {false, fmt("step %ld executed an action with no active chunk", s.t)};
        continue;
      }
      for (int d = 0; d < 4; ++d) worst = std::max(worst, std::abs(s.command[d] - (*ref)[d]));
      clip_ok &= s.action == clip_action(s.command, SimConfig{});
      ++steps;
    }
  }

  // single chunk: replayed verbatim
  bool single_exact = true;
  {
    ChunkBuffer b;
    ChunkMatrix c(kChunk, kActionDim);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = uniform(rng, -20, 20);
    b.push(3, c);
    for (int i = 0; i < kChunk; ++i) single_exact &= b.ensemble(3 + i) == c.row(i).transpose();
  }
  // identical overlapping chunks: the shared action comes back verbatim
  bool identical_exact = true;
  {
    ChunkBuffer b(0.2);
    std::vector<Vec4> path(30);
    for (auto& a : path) a = Vec4(uniform(rng, -9, 9), uniform(rng, -9, 9), uniform(rng, -9, 9), uniform(rng, -9, 9));
    for (long t = 0; t + kChunk <= 30; ++t) {
      ChunkMatrix c(kChunk, kActionDim);
      for (int i = 0; i < kChunk; ++i) c.row(i) = path[static_cast<std::size_t>(t + i)].transpose();
      b.push(t, c);
      b.prune(t);
      identical_exact &= b.ensemble(t) == path[static_cast<std::size_t>(t)];
    }
  }
  return {worst <= 1e-9 && clip_ok && single_exact && identical_exact,
          fmt("100 rollouts, %ld ensembled steps, max |diff| %.2e <= 1e-9, single-chunk exact %s, identical-chunk "
              "exact %s",
              steps, worst, single_exact ? "yes" : "no", identical_exact ? "yes" : "no")};
}

Outcome metric_oracles() {
  Rng rng = make_rng(99);
  double worst = 0.0;
  double identity = 0.0;
  bool presence = true;
  for (int trial = 0; trial < 100; ++trial) {
    const testutil::Batch b = testutil::random_batch(rng);
    const MetricReport m = compute_metrics(b.preds, b.gts, b.phases, b.logits, b.stats);
    auto diff = [&](double a, double c) { worst = std::max(worst, std::abs(a - c)); };
    auto diff_opt = [&](const std::optional<double>& a, const std::optional<double>& c) {
      presence &= a.has_value() == c.has_value();
      if (a && c) diff(*a, *c);
    };

    const oracle::Rmse r = oracle::rmse(b.preds, b.gts, b.labels, b.stats);
    diff(m.rmse.overall, r.overall);
    diff_opt(m.rmse.approach, r.approach);
    diff_opt(m.rmse.transport, r.transport);
    double sq = 0.0;
    for (int d = 0; d < 4; ++d) {
      diff(m.rmse.per_axis[static_cast<std::size_t>(d)], r.axis[d]);
      sq += m.rmse.per_axis[static_cast<std::size_t>(d)] * m.rmse.per_axis[static_cast<std::size_t>(d)];
    }
    identity = std::max(identity, std::abs(m.rmse.overall * m.rmse.overall - sq / 4.0));

    const auto [mean, median] = oracle::endpoint(b.preds, b.gts, b.stats);
    diff(m.endpoint.mean, mean);
    diff(m.endpoint.median, median);

    const oracle::Direction dir = oracle::direction(b.preds, b.gts, b.stats, kMovingEps);
    presence &= m.direction.n_moving == dir.moving;
    std::optional<double> acc, cos;
    if (dir.moving) {
      acc = double(dir.positive) / double(dir.moving);
      cos = dir.cos_sum / double(dir.moving);
    }
    diff_opt(m.direction.accuracy, acc);
    diff_opt(m.direction.mean_cosine, cos);

    const oracle::PhaseCount pc = oracle::phase_counts(b.logit_pairs, b.labels);
    diff_opt(m.phase.overall, double(pc.correct[0] + pc.correct[1]) / double(pc.total[0] + pc.total[1]));
    diff_opt(m.phase.approach,
             pc.total[0] ? std::optional<double>(double(pc.correct[0]) / double(pc.total[0])) : std::nullopt);
    diff_opt(m.phase.transport,
             pc.total[1] ? std::optional<double>(double(pc.correct[1]) / double(pc.total[1])) : std::nullopt);
  }
  return {worst <= 1e-9 && identity <= 1e-9 && presence,
          fmt("100 batches, max |diff| %.2e <= 1e-9, |rmse^2 - mean axis rmse^2| %.2e, defined-ness %s", worst, identity,
              presence ? "matches" : "MISMATCH")};
}

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  Dataset ds = generate_dataset(10, 7, SimConfig{});
  ds.episodes.resize(5);
  for (auto& ep : ds.episodes) ep.split = Split::Train;
  ds.stats = compute_norm_stats(ds.split(Split::Train));
  TrainConfig tc;
  tc.steps = 2000;
  tc.batch = 32;
  tc.augment = false;
  const TrainResult r = train_loop(ds, ModelConfig{}, tc);
  const double secs = seconds_since(t0);
  const bool pass = r.final_train.loss_action < 0.01 && r.final_train.phase_accuracy > 0.99 && secs < 900.0;
  return {pass, fmt("5 episodes, 2000 steps: train SmoothL1 %.4f < 0.01, phase acc %.2f%% > 99%%, %.0f s < 900 s",
                    r.final_train.loss_action, 100.0 * r.final_train.phase_accuracy, secs)};
}

// Shared by the generalization and closed-loop checks.
struct TrainedModel {
  Dataset ds;
  std::unique_ptr<Policy> policy;
  double seconds = 0.0;
};

TrainedModel& trained_model() {
  static TrainedModel m = [] {
    const auto t0 = std::chrono::steady_clock::now();
    TrainedModel t;
    t.ds = generate_dataset(75, 7, SimConfig{});
    TrainConfig tc;
    tc.steps = 6000;
    tc.batch = 16;
    tc.max_val_samples = 300;
    const TrainResult r = train_loop(t.ds, ModelConfig{}, tc, TrainOptions{{}, false, {}});
    t.policy = std::make_unique<Policy>(r.best);
    t.seconds = seconds_since(t0);
    return t;
  }();
  return m;
}

Outcome generalization() {
  TrainedModel& m = trained_model();
  const SampleSet test(m.ds.split(Split::Test), m.ds.stats, true);
  const MetricReport r = evaluate_offline(*m.policy, m.ds.stats, test);
  const double dir = r.direction.accuracy.value_or(0.0);
  const double phase = r.phase.overall.value_or(0.0);
  const auto splits = std::array<std::size_t, 3>{m.ds.split(Split::Train).size(), m.ds.split(Split::Val).size(),
                                                  m.ds.split(Split::Test).size()};
  const bool pass = splits == std::array<std::size_t, 3>{60, 9, 6} && dir >= 0.90 && phase >= 0.95 && m.seconds < 3600.0;
  return {pass, fmt("split %zu/%zu/%zu, test direction acc %.2f%% >= 90%%, phase acc %.2f%% >= 95%%, rmse %.2f ticks, "
                    "%.0f s < 3600 s",
                    splits[0], splits[1], splits[2], 100.0 * dir, 100.0 * phase, r.rmse.overall, m.seconds)};
}

Outcome closed_loop() {
  ExpertController expert;
  const std::array<TaskId, 1> only_a{TaskId::A};
  const SuccessTable cal = closed_loop_eval(expert, only_a, 20, 11, SimConfig{});
  const double expert_a = cal.row(TaskId::A).transport_rate();
  if (expert_a < 0.95) return {false, fmt("expert calibration on A %.0f%% < 95%%", 100.0 * expert_a)};

  TrainedModel& m = trained_model();
  PolicyController ctl(*m.policy, m.ds.stats);
  const SuccessTable t = closed_loop_eval(ctl, kAllTasks, 20, 11, SimConfig{});
  const double aa = t.row(TaskId::A).approach_rate(), ab = t.row(TaskId::B).approach_rate(),
               ac = t.row(TaskId::C).approach_rate();
  const double ta = t.row(TaskId::A).transport_rate(), tb = t.row(TaskId::B).transport_rate(),
               tc = t.row(TaskId::C).transport_rate();
  const bool approach_ok = aa >= 0.70 && ab >= 0.70 && ac >= 0.70;
  const bool monotone = ta >= tb && tb >= tc - 0.10;
  return {approach_ok && monotone,
          fmt("expert A %.0f%%; approach A/B/C %.0f/%.0f/%.0f%% (>= 70%%); transport A/B/C %.0f/%.0f/%.0f%% "
              "(A >= B >= C - 10pp)",
              100.0 * expert_a, 100.0 * aa, 100.0 * ab, 100.0 * ac, 100.0 * ta, 100.0 * tb, 100.0 * tc)};
}

// ---------------------------------------------------------------------------
// Determinism

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null").c_str());
  if (rc != 0) throw std::runtime_error("command failed (" + std::to_string(rc) + "): " + cmd);
  return rc;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Produces every artifact kind under root using the command-line tool.
void artifacts_cli(const std::string& cli, const fs::path& root) {
  const std::string b = q(cli);
  run(b + " gen-data --episodes 12 --seed 5 --out " + q(root / "data"));
  run(b + " train --data " + q(root / "data") + " --out " + q(root / "run") +
      " --steps 20 --batch 4 --max-val-samples 30 --quiet");
  run(b + " eval --ckpt " + q(root / "run" / "best.ckpt.json") + " --data " + q(root / "data") + " --report " +
      q(root / "eval" / "report.json") + " --closed-loop --trials 10 --max-steps 40");
  run(b + " rollout --ckpt " + q(root / "run" / "best.ckpt.json") + " --out " + q(root / "rollout" / "traj.jsonl") +
      " --task B --seed 3 --max-steps 60");
}

void artifacts_lib(const fs::path& root) {
  const Dataset ds = generate_dataset(12, 5, SimConfig{});
  write_dataset(ds, root / "data");
  TrainConfig tc;
  tc.steps = 20;
  tc.batch = 4;
  tc.max_val_samples = 30;
  TrainOptions opts;
  opts.out_dir = root / "run";
  const TrainResult r = train_loop(load_dataset(root / "data"), ModelConfig{}, tc, opts);
  const Checkpoint ck = load_checkpoint(*r.best_checkpoint);
  const Dataset back = load_dataset(root / "data");
  const SampleSet test(back.split(Split::Test), back.stats, true);
  const MetricReport m = evaluate_offline(ck.policy, ck.stats, test);
  RolloutConfig rc;
  rc.max_steps = 40;
  PolicyController ctl(ck.policy, ck.stats, rc);
  const SuccessTable t = closed_loop_eval(ctl, kAllTasks, 10, 11, SimConfig{}, rc);
  write_report(&m, &t, root / "eval" / "report.json");
  rc.max_steps = 60;
  PolicyController ctl2(ck.policy, ck.stats, rc);
  const RolloutResult ro = run_rollout(ctl2, TaskId::B, prompt_bank().prompts_for(TaskId::B).front(), 3, SimConfig{}, rc);
  fs::create_directories(root / "rollout");
  std::ofstream(root / "rollout" / "traj.jsonl", std::ios::binary) << trajectory_to_jsonl(ro, rc);
}

Outcome determinism(const std::string& cli, const fs::path& work) {
  const fs::path a = work / "determinism_a", b = work / "determinism_b";
  fs::remove_all(a);
  fs::remove_all(b);
  fs::create_directories(a);
  fs::create_directories(b);
  if (cli.empty()) {
    artifacts_lib(a);
    artifacts_lib(b);
  } else {
    artifacts_cli(cli, a);
    artifacts_cli(cli, b);
  }
  std::string detail;
  bool pass = true;
  for (const char* stage : {"data", "run", "eval", "rollout"}) {
    const std::string d = compare_trees(a / stage, b / stage);
    const std::size_t n = snapshot(a / stage).size();
    detail += fmt("%s%s %s (%zu files)", detail.empty() ? "" : ", ", stage, d.empty() ? "identical" : d.c_str(), n);
    pass &= d.empty();
  }
  return {pass, std::string(cli.empty() ? "library: " : "cli: ") + detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<std::string> only;
  std::string cli;
  std::string workdir = (fs::temp_directory_path() / "bimag_acceptance").string();
  app.add_option("--only", only, "Run only these checks");
  app.add_option("--cli", cli, "Command-line tool used for the determinism check");
  app.add_option("--workdir", workdir, "Scratch directory");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"gradient-oracle", grad_oracle},
      {"ensembling-oracle", ensembling_oracle},
      {"metric-oracles", metric_oracles},
      {"overfit-capacity", overfit},
      {"generalization", generalization},
      {"closed-loop", closed_loop},
      {"determinism", [&] { return determinism(cli, workdir); }},
  };

  int failed = 0;
  for (const auto& [name, fn] : checks) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s %-18s %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
