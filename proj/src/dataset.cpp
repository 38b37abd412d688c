#include "bimag/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace bimag {

// ---------------------------------------------------------------------------
// Prompts

namespace {

constexpr std::array<const char*, 7> kActionExpressions{
    "Move the cargo to",
    "Push the cargo into",
    "Transport the object to",
    "Use the microrobot to carry the cargo to",
    "Deliver the cargo to",
    "Bring the object to",
    "Steer the cargo toward",
};

struct Region {
  const char* text;
  TaskId task;
};

constexpr std::array<Region, 10> kRegions{{
    {"target region A", TaskId::A},
    {"the goal after the gentle bend", TaskId::A},
    {"the end of the shallow curve", TaskId::A},
    {"the slightly turned outlet", TaskId::A},
    {"target region B", TaskId::B},
    {"the goal past the right-angle turn", TaskId::B},
    {"the outlet beyond the quarter turn", TaskId::B},
    {"target region C", TaskId::C},
    {"the goal behind the hairpin", TaskId::C},
    {"the end of the sharp switchback", TaskId::C},
}};

}  // namespace

PromptBank build_prompt_bank() {
  PromptBank bank;
  for (const Region& region : kRegions) {
    for (const char* expr : kActionExpressions) {
      bank.prompts.push_back(std::string(expr) + " " + region.text + ".");
      bank.prompt_to_task.push_back(region.task);
    }
  }
  return bank;
}

const PromptBank& prompt_bank() {
  static const PromptBank bank = build_prompt_bank();
  return bank;
}

TaskId PromptBank::task_of(int prompt_id) const {
  if (prompt_id < 0 || prompt_id >= size()) {
    throw std::out_of_range("prompt id " + std::to_string(prompt_id) + " outside the bank");
  }
  return prompt_to_task[static_cast<std::size_t>(prompt_id)];
}

std::vector<int> PromptBank::prompts_for(TaskId task) const {
  std::vector<int> ids;
  for (int i = 0; i < size(); ++i) {
    if (prompt_to_task[static_cast<std::size_t>(i)] == task) ids.push_back(i);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Frames and splits

SimState frame_sim_state(const Frame& f) {
  SimState s;
  s.arms = f.state;
  s.bead = f.bead;
  s.cargo = f.cargo;
  s.attached = f.attached;
  s.ever_attached = f.attached;
  return s;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

std::vector<const EpisodeRecord*> Dataset::split(Split s) const {
  std::vector<const EpisodeRecord*> out;
  for (const auto& ep : episodes) {
    if (ep.split == s) out.push_back(&ep);
  }
  return out;
}

std::array<int, 3> split_counts(int n, const std::array<int, 3>& ratio) {
  const int total = ratio[0] + ratio[1] + ratio[2];
  if (total <= 0) throw std::invalid_argument("split ratio must be positive");
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * ratio[i] / total;
    counts[i] = static_cast<int>(std::floor(exact));
    rem[i] = exact - counts[i];
    assigned += counts[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];
  return counts;
}

void assign_splits(std::vector<EpisodeRecord>& episodes, const std::array<int, 3>& ratio,
                   std::uint64_t seed) {
  const auto counts = split_counts(static_cast<int>(episodes.size()), ratio);
  Rng rng = make_rng(seed, 0x5EB1u);
  std::array<std::vector<std::size_t>, 3> by_task;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    by_task[static_cast<std::size_t>(episodes[i].task)].push_back(i);
  }
  for (auto& group : by_task) shuffle(group, rng);

  std::vector<std::size_t> order;
  for (std::size_t k = 0; order.size() < episodes.size(); ++k) {
    for (const auto& group : by_task) {
      if (k < group.size()) order.push_back(group[k]);
    }
  }
  std::size_t pos = 0;
  for (int i = 0; i < counts[2]; ++i) episodes[order[pos++]].split = Split::Test;
  for (int i = 0; i < counts[1]; ++i) episodes[order[pos++]].split = Split::Val;
  while (pos < order.size()) episodes[order[pos++]].split = Split::Train;
}

// ---------------------------------------------------------------------------
// Generation

std::optional<EpisodeRecord> record_expert_episode(TaskId task, int prompt_id, std::uint64_t seed,
                                                   const SimConfig& cfg, const RecordOptions& opts) {
  if (opts.lead_in < 0) throw std::invalid_argument("record_expert_episode: lead_in must be >= 0");
  const WorkspaceSpec ws = build_workspace(task);
  SimConfig sim = cfg;
  sim.rng_seed = seed;
  Rng rng = make_rng(seed, 1);
  SimState state = opts.recovery ? sample_recovery_state(ws, sim, opts.recovery_arm_std, rng)
                                 : sample_initial_state(ws, rng);

  EpisodeRecord ep;
  ep.task = task;
  ep.prompt_id = prompt_id;
  ep.seed = seed;
  ep.recovery_start = opts.recovery;
  for (int t = 0; t < opts.max_steps; ++t) {
    const ExpertDecision d = expert_action(state, ws, sim);
    Frame f;
    f.obs = observe(state, ws);
    f.state = state.arms;
    f.action = t < opts.lead_in ? Vec4::Zero() : clip_action(d.action, sim);
    f.phase = d.phase;
    f.bead = state.bead;
    f.cargo = state.cargo;
    f.attached = state.attached;
    const Vec4 action = f.action;
    ep.frames.push_back(std::move(f));
    state = step_sim(state, action, ws, sim);
    if (check_success(state, ws).transport_done) {
      if (ep.length() < kChunk + kHistory) return std::nullopt;
      return ep;
    }
  }
  return std::nullopt;
}

std::vector<std::string> validate_episode(const EpisodeRecord& ep) {
  std::vector<std::string> problems;
  const PromptBank& bank = prompt_bank();
  if (ep.length() < kChunk + kHistory) {
    problems.push_back("episode has " + std::to_string(ep.length()) + " frames, needs at least " +
                       std::to_string(kChunk + kHistory));
  }
  if (ep.prompt_id < 0 || ep.prompt_id >= bank.size()) {
    problems.push_back("prompt_id " + std::to_string(ep.prompt_id) + " out of range");
  } else if (bank.task_of(ep.prompt_id) != ep.task) {
    problems.push_back("prompt_id " + std::to_string(ep.prompt_id) + " belongs to another task");
  }
  for (int t = 0; t < ep.length(); ++t) {
    const Frame& f = ep.frames[static_cast<std::size_t>(t)];
    if (!f.action.allFinite() || !f.state.allFinite()) {
      problems.push_back("frame " + std::to_string(t) + ": non-finite action or state");
    }
    if (t > 0) {
      const Frame& prev = ep.frames[static_cast<std::size_t>(t - 1)];
      if (prev.phase == Phase::Transport && f.phase == Phase::Approach && !(prev.attached && !f.attached)) {
        problems.push_back("frame " + std::to_string(t) + ": phase reverts to approach without a slip");
      }
    }
  }
  return problems;
}

Dataset generate_dataset(int n_episodes, std::uint64_t seed, const SimConfig& cfg,
                         const GenerateOptions& opts) {
  if (n_episodes < 10) throw std::invalid_argument("generate_dataset needs at least 10 episodes");
  cfg.validate();
  const PromptBank& bank = prompt_bank();

  Dataset ds;
  ds.meta.seed = seed;
  ds.meta.sim = cfg;
  ds.meta.max_steps = opts.max_steps;
  ds.meta.lead_in = opts.lead_in;
  ds.meta.recovery_fraction = opts.recovery_fraction;
  ds.meta.recovery_arm_std = opts.recovery_arm_std;
  ds.meta.split_ratio = opts.split_ratio;
  ds.meta.n_episodes = n_episodes;

  if (!(opts.recovery_fraction >= 0.0 && opts.recovery_fraction <= 1.0)) {
    throw std::invalid_argument("generate_dataset: recovery_fraction must lie in [0, 1]");
  }
  for (int e = 0; e < n_episodes; ++e) {
    const TaskId task = kAllTasks[static_cast<std::size_t>(e % 3)];
    const auto candidates = bank.prompts_for(task);
    // per-task index k; every task gets round(k * fraction) recovery starts
    const int k = e / 3;
    RecordOptions rec;
    rec.max_steps = opts.max_steps;
    rec.lead_in = opts.lead_in;
    rec.recovery = std::floor((k + 1) * opts.recovery_fraction) > std::floor(k * opts.recovery_fraction);
    rec.recovery_arm_std = opts.recovery_arm_std;
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt > 1000) throw std::runtime_error("expert failed 1000 times in a row");
      const std::uint64_t ep_seed = derive_seed(seed, static_cast<std::uint64_t>(e) * 4096u + attempt);
      Rng prompt_rng = make_rng(ep_seed, 2);
      const int prompt_id = candidates[uniform_index(prompt_rng, candidates.size())];
      auto ep = record_expert_episode(task, prompt_id, ep_seed, cfg, rec);
      if (!ep) {
        ++ds.meta.discarded;
        continue;
      }
      ep->episode_id = e;
      ds.meta.total_frames += ep->length();
      ds.episodes.push_back(std::move(*ep));
      break;
    }
  }
  assign_splits(ds.episodes, opts.split_ratio, seed);
  ds.stats = compute_norm_stats(ds.split(Split::Train));
  return ds;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::string episode_filename(int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ep_%04d.jsonl", id);
  return buf;
}

}  // namespace

Json meta_to_json(const DatasetMeta& meta, std::span<const EpisodeRecord> episodes) {
  Json eps = Json::array();
  Json splits = {{"train", Json::array()}, {"val", Json::array()}, {"test", Json::array()}};
  std::array<int, 3> per_task{};
  for (const auto& ep : episodes) {
    eps.push_back({{"episode_id", ep.episode_id},
                   {"task_id", task_name(ep.task)},
                   {"prompt_id", ep.prompt_id},
                   {"length", ep.length()},
                   {"split", split_name(ep.split)},
                   {"seed", ep.seed},
                   {"start", ep.recovery_start ? "recovery" : "entrance"},
                   {"file", "episodes/" + episode_filename(ep.episode_id)}});
    splits[split_name(ep.split)].push_back(ep.episode_id);
    ++per_task[static_cast<std::size_t>(ep.task)];
  }
  long frames = 0;
  for (const auto& ep : episodes) frames += ep.length();
  return Json{{"format_version", meta.format_version},
              {"fps", meta.fps},
              {"seed", meta.seed},
              {"source", meta.source},
              {"n_episodes", static_cast<int>(episodes.size())},
              {"total_frames", frames},
              {"discarded_episodes", meta.discarded},
              {"max_steps", meta.max_steps},
              {"lead_in", meta.lead_in},
              {"recovery_fraction", meta.recovery_fraction},
              {"recovery_arm_std", meta.recovery_arm_std},
              {"split_ratio", meta.split_ratio},
              {"counts",
               {{"train", splits["train"].size()},
                {"val", splits["val"].size()},
                {"test", splits["test"].size()},
                {"per_task", {{"A", per_task[0]}, {"B", per_task[1]}, {"C", per_task[2]}}}}},
              {"chunk_size", kChunk},
              {"history", kHistory},
              {"sim_config", to_json(meta.sim)},
              {"splits", splits},
              {"episodes", eps}};
}

std::string episode_to_jsonl(const EpisodeRecord& ep, bool store_grid) {
  std::string out;
  const WorkspaceSpec ws = build_workspace(ep.task);
  for (int t = 0; t < ep.length(); ++t) {
    const Frame& f = ep.frames[static_cast<std::size_t>(t)];
    Json line{{"t", t},
              {"obs", f.obs.features},
              {"state", to_json(f.state)},
              {"action", to_json(f.action)},
              {"phase", static_cast<int>(f.phase)},
              {"bead", to_json(f.bead)},
              {"cargo", to_json(f.cargo)},
              {"attached", f.attached}};
    if (store_grid) {
      line["grid"] = f.obs.grid ? *f.obs.grid : rasterize(frame_sim_state(f), ws);
    }
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::vector<Frame> episode_from_jsonl(const std::string& text) {
  std::vector<Frame> frames;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw std::runtime_error("episode line " + std::to_string(lineno) + ": " + e.what());
    }
    Frame f;
    f.obs.features = j.at("obs").get<std::vector<double>>();
    if (static_cast<int>(f.obs.features.size()) != kFeatureDim) {
      throw std::runtime_error("episode line " + std::to_string(lineno) + ": bad feature length");
    }
    if (j.contains("grid")) f.obs.grid = j.at("grid").get<std::vector<double>>();
    f.state = vec4_from_json(j.at("state"));
    f.action = vec4_from_json(j.at("action"));
    if (!f.action.allFinite()) {
      throw std::runtime_error("episode line " + std::to_string(lineno) + ": non-finite action");
    }
    f.phase = phase_from_index(j.at("phase").get<int>());
    f.bead = vec2_from_json(j.at("bead"));
    f.cargo = vec2_from_json(j.at("cargo"));
    f.attached = j.at("attached").get<bool>();
    frames.push_back(std::move(f));
  }
  return frames;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir, bool store_grid) {
  std::filesystem::create_directories(dir / "episodes");
  for (const auto& ep : ds.episodes) {
    write_text_file(dir / "episodes" / episode_filename(ep.episode_id), episode_to_jsonl(ep, store_grid));
  }
  write_text_file(dir / "meta.json", meta_to_json(ds.meta, ds.episodes).dump(2) + "\n");
  write_text_file(dir / "stats.json", to_json(ds.stats).dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const Json meta = read_json_file(dir / "meta.json");
  if (meta.at("format_version").get<int>() != kFormatVersion) {
    throw std::runtime_error("unsupported dataset format_version in " + dir.string());
  }
  Dataset ds;
  ds.meta.format_version = kFormatVersion;
  ds.meta.fps = meta.at("fps").get<int>();
  ds.meta.seed = meta.at("seed").get<std::uint64_t>();
  ds.meta.source = meta.value("source", std::string("expert"));
  ds.meta.discarded = meta.value("discarded_episodes", 0);
  ds.meta.max_steps = meta.value("max_steps", 600);
  ds.meta.lead_in = meta.value("lead_in", 0);
  ds.meta.recovery_fraction = meta.value("recovery_fraction", 0.0);
  ds.meta.recovery_arm_std = meta.value("recovery_arm_std", 0.0);
  if (meta.contains("split_ratio")) ds.meta.split_ratio = meta.at("split_ratio").get<std::array<int, 3>>();
  if (meta.contains("sim_config")) ds.meta.sim = sim_config_from_json(meta.at("sim_config"));

  long total = 0;
  for (const auto& info : meta.at("episodes")) {
    EpisodeRecord ep;
    ep.episode_id = info.at("episode_id").get<int>();
    ep.task = parse_task(info.at("task_id").get<std::string>());
    ep.prompt_id = info.at("prompt_id").get<int>();
    ep.seed = info.value("seed", std::uint64_t{0});
    ep.recovery_start = info.value("start", std::string("entrance")) == "recovery";
    ep.split = parse_split(info.at("split").get<std::string>());
    const auto path = dir / info.at("file").get<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    ep.frames = episode_from_jsonl(buf.str());
    const int expected = info.at("length").get<int>();
    if (ep.length() != expected) {
      throw std::runtime_error(path.string() + ": " + std::to_string(ep.length()) +
                               " frames, meta says " + std::to_string(expected));
    }
    total += ep.length();
    ds.episodes.push_back(std::move(ep));
  }
  ds.meta.n_episodes = static_cast<int>(ds.episodes.size());
  ds.meta.total_frames = total;
  if (meta.contains("total_frames") && meta.at("total_frames").get<long>() != total) {
    throw std::runtime_error("frame recount does not match meta.total_frames in " + dir.string());
  }
  ds.stats = norm_stats_from_json(read_json_file(dir / "stats.json"));
  return ds;
}

// ---------------------------------------------------------------------------
// Normalization

NormStats compute_norm_stats(std::span<const EpisodeRecord* const> train) {
  // Welford accumulation
  long n = 0;
  Vec4 mean = Vec4::Zero();
  Vec4 m2 = Vec4::Zero();
  for (const EpisodeRecord* ep : train) {
    for (const Frame& f : ep->frames) {
      ++n;
      const Vec4 delta = f.action - mean;
      mean += delta / static_cast<double>(n);
      m2 += delta.cwiseProduct(f.action - mean);
    }
  }
  if (n == 0) throw std::invalid_argument("compute_norm_stats: no training actions");
  NormStats s;
  s.mean = mean;
  s.std = (m2 / static_cast<double>(n)).cwiseSqrt().cwiseMax(kStdFloor);
  return s;
}

NormStats compute_norm_stats(std::span<const EpisodeRecord> train) {
  std::vector<const EpisodeRecord*> ptrs;
  for (const auto& ep : train) ptrs.push_back(&ep);
  return compute_norm_stats(std::span<const EpisodeRecord* const>(ptrs));
}

Json to_json(const NormStats& s) {
  return Json{{"format_version", kFormatVersion}, {"mean", to_json(s.mean)}, {"std", to_json(s.std)}};
}

NormStats norm_stats_from_json(const Json& j) {
  NormStats s;
  s.mean = vec4_from_json(j.at("mean"));
  s.std = vec4_from_json(j.at("std"));
  if ((s.std.array() < kStdFloor).any()) throw std::invalid_argument("NormStats std below floor");
  return s;
}

Vec4 normalize_action(const Vec4& a, const NormStats& s) {
  return (a - s.mean).cwiseQuotient(s.std);
}

Vec4 denormalize_action(const Vec4& z, const NormStats& s) {
  return z.cwiseProduct(s.std) + s.mean;
}

ChunkMatrix denormalize_chunk(const ChunkMatrix& z, const NormStats& s) {
  ChunkMatrix out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    out.row(r) = denormalize_action(z.row(r).transpose(), s).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Samples

int sample_count(int length) {
  return std::max(0, length - kChunk - kHistory + 2);
}

TrainingSample make_sample(const EpisodeRecord& ep, int t, const NormStats& stats) {
  if (t < kHistory - 1 || t > ep.length() - kChunk) {
    throw std::out_of_range("make_sample: t=" + std::to_string(t) + " outside [" +
                            std::to_string(kHistory - 1) + ", " +
                            std::to_string(ep.length() - kChunk) + "]");
  }
  TrainingSample s;
  s.prompt_id = ep.prompt_id;
  s.task = ep.task;
  s.episode_id = ep.episode_id;
  s.t = t;
  for (int k = t - kHistory + 1; k <= t; ++k) {
    const Frame& f = ep.frames[static_cast<std::size_t>(k)];
    s.obs_history.push_back(f.obs);
    s.state_history.push_back(f.state);
  }
  s.state = s.state_history.back();
  s.chunk.resize(kChunk, kActionDim);
  for (int i = 0; i < kChunk; ++i) {
    s.chunk.row(i) = normalize_action(ep.frames[static_cast<std::size_t>(t + i)].action, stats).transpose();
  }
  s.phase = ep.frames[static_cast<std::size_t>(t)].phase;
  return s;
}

std::vector<TrainingSample> make_samples(std::span<const EpisodeRecord* const> episodes,
                                         const NormStats& stats) {
  std::vector<TrainingSample> out;
  for (const EpisodeRecord* ep : episodes) {
    for (int t = kHistory - 1; t <= ep->length() - kChunk; ++t) out.push_back(make_sample(*ep, t, stats));
  }
  return out;
}

void attach_grids(TrainingSample& sample, const EpisodeRecord& ep, const WorkspaceSpec& ws) {
  for (int k = 0; k < kHistory; ++k) {
    Observation& obs = sample.obs_history[static_cast<std::size_t>(k)];
    if (obs.grid) continue;
    const Frame& f = ep.frames[static_cast<std::size_t>(sample.t - kHistory + 1 + k)];
    obs.grid = f.obs.grid ? *f.obs.grid : rasterize(frame_sim_state(f), ws);
  }
}

// ---------------------------------------------------------------------------
// Augmentation

void apply_photometric(std::vector<double>& grid, double brightness, double contrast) {
  for (double& g : grid) g = std::clamp(((g - 0.5) * contrast + 0.5) * brightness, 0.0, 1.0);
}

PhotometricDraw draw_photometric(Rng& rng, const AugmentParams& p) {
  PhotometricDraw d;
  if (uniform01(rng) < p.brightness_prob) d.brightness = uniform(rng, p.brightness_lo, p.brightness_hi);
  if (uniform01(rng) < p.contrast_prob) d.contrast = uniform(rng, p.contrast_lo, p.contrast_hi);
  return d;
}

Observation augment_observation(const Observation& obs, Rng& rng, const AugmentParams& p) {
  if (!obs.grid) throw std::invalid_argument("augment_observation: observation has no grid");
  const PhotometricDraw d = draw_photometric(rng, p);
  Observation out = obs;
  if (!d.identity()) apply_photometric(*out.grid, d.brightness, d.contrast);
  return out;
}

}  // namespace bimag
