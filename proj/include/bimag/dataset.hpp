#pragma once

// Demonstration episodes: generation with the scripted expert, on-disk layout,
// action normalization, chunked training samples and photometric augmentation.
//
// Layout of a dataset directory:
//   meta.json              format_version, fps, seed, per-episode info, splits
//   stats.json             NormStats computed from the train split only
//   episodes/ep_%04d.jsonl one frame object per line

#include "bimag/json_io.hpp"
#include "bimag/magsim.hpp"
#include "bimag/rng.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bimag {

inline constexpr int kFormatVersion = 1;
inline constexpr int kChunk = 5;      // K
inline constexpr int kActionDim = 4;  // d_a
inline constexpr int kHistory = 4;    // observation / state history length
inline constexpr int kFps = 10;

using ChunkMatrix = Eigen::MatrixXd;  // kChunk x kActionDim

struct PromptBank {
  std::vector<std::string> prompts;
  std::vector<TaskId> prompt_to_task;

  int size() const { return static_cast<int>(prompts.size()); }
  TaskId task_of(int prompt_id) const;
  std::vector<int> prompts_for(TaskId task) const;
};

// 7 action expressions x 10 target-region descriptions; regions 0-3 belong to
// task A, 4-6 to B and 7-9 to C.
const PromptBank& prompt_bank();
PromptBank build_prompt_bank();

struct Frame {
  Observation obs;
  Vec4 state = Vec4::Zero();   // arm positions before the action
  Vec4 action = Vec4::Zero();  // executed (clipped) delta
  Phase phase = Phase::Approach;
  Vec2 bead = Vec2::Zero();
  Vec2 cargo = Vec2::Zero();
  bool attached = false;
};

SimState frame_sim_state(const Frame& f);

enum class Split : int { Train = 0, Val = 1, Test = 2 };
std::string split_name(Split s);
Split parse_split(std::string_view name);

struct EpisodeRecord {
  int episode_id = 0;
  TaskId task = TaskId::A;
  int prompt_id = 0;
  std::uint64_t seed = 0;
  Split split = Split::Train;
  bool recovery_start = false;
  std::vector<Frame> frames;

  int length() const { return static_cast<int>(frames.size()); }
};

struct NormStats {
  Vec4 mean = Vec4::Zero();
  Vec4 std = Vec4::Ones();
};

inline constexpr double kStdFloor = 1e-6;

struct DatasetMeta {
  int format_version = kFormatVersion;
  int fps = kFps;
  std::uint64_t seed = 0;
  int n_episodes = 0;
  int discarded = 0;
  long total_frames = 0;
  std::array<int, 3> split_ratio{60, 9, 6};
  SimConfig sim;
  int max_steps = 600;
  int lead_in = kHistory - 1;
  double recovery_fraction = 0.0;
  double recovery_arm_std = 0.0;
  std::string source = "expert";
};

struct Dataset {
  DatasetMeta meta;
  std::vector<EpisodeRecord> episodes;
  NormStats stats;

  std::vector<const EpisodeRecord*> split(Split s) const;
};

struct RecordOptions {
  int max_steps = 600;
  // idle frames (zero action) recorded before the expert starts moving; with
  // history - 1 of them the first sample sees a stationary history, which is
  // what a rollout sees after its warm-up hold
  int lead_in = kHistory - 1;
  // start mid-course with perturbed arms instead of at the corridor entrance
  bool recovery = false;
  double recovery_arm_std = 30.0;
};

struct GenerateOptions {
  int max_steps = 600;
  std::array<int, 3> split_ratio{60, 9, 6};
  bool store_grid = false;
  int lead_in = kHistory - 1;
  // share of episodes recorded from a recovery start; these show the expert
  // pulling a displaced arm pair back into formation
  double recovery_fraction = 0.5;
  double recovery_arm_std = 30.0;
};

// Episode counts per split, largest-remainder rounding of the ratio.
std::array<int, 3> split_counts(int n_episodes, const std::array<int, 3>& ratio);

// Stratified by task: each task's episodes are shuffled, then interleaved, and
// the interleaved order is cut into test, val and train.
void assign_splits(std::vector<EpisodeRecord>& episodes, const std::array<int, 3>& ratio,
                   std::uint64_t seed);

// One expert rollout. The start state comes from make_rng(seed, 1) and the sim
// noise from seed. Returns nullopt when the expert does not finish within
// max_steps (idle frames included).
std::optional<EpisodeRecord> record_expert_episode(TaskId task, int prompt_id, std::uint64_t seed,
                                                   const SimConfig& cfg, const RecordOptions& opts = {});

// Problems with an episode; empty when it satisfies the dataset invariants.
// A Transport -> Approach label change is only allowed where the cargo
// detaches (a slip).
std::vector<std::string> validate_episode(const EpisodeRecord& ep);

Dataset generate_dataset(int n_episodes, std::uint64_t seed, const SimConfig& cfg,
                         const GenerateOptions& opts = {});
void write_dataset(const Dataset& ds, const std::filesystem::path& dir, bool store_grid = false);
Dataset load_dataset(const std::filesystem::path& dir);

Json meta_to_json(const DatasetMeta& meta, std::span<const EpisodeRecord> episodes);
std::string episode_to_jsonl(const EpisodeRecord& ep, bool store_grid = false);
std::vector<Frame> episode_from_jsonl(const std::string& text);

NormStats compute_norm_stats(std::span<const EpisodeRecord* const> train_episodes);
NormStats compute_norm_stats(std::span<const EpisodeRecord> train_episodes);
Json to_json(const NormStats& s);
NormStats norm_stats_from_json(const Json& j);

Vec4 normalize_action(const Vec4& a, const NormStats& s);
Vec4 denormalize_action(const Vec4& z, const NormStats& s);
ChunkMatrix denormalize_chunk(const ChunkMatrix& z, const NormStats& s);

struct TrainingSample {
  std::vector<Observation> obs_history;  // kHistory frames, oldest first
  std::vector<Vec4> state_history;       // ticks, oldest first
  Vec4 state = Vec4::Zero();             // ticks, equals state_history.back()
  int prompt_id = 0;
  TaskId task = TaskId::A;
  ChunkMatrix chunk;                     // normalized, kChunk x kActionDim
  Phase phase = Phase::Approach;
  int episode_id = 0;
  int t = 0;
};

// Valid t are kHistory-1 .. length-kChunk inclusive.
int sample_count(int episode_length);
TrainingSample make_sample(const EpisodeRecord& ep, int t, const NormStats& stats);
std::vector<TrainingSample> make_samples(std::span<const EpisodeRecord* const> episodes,
                                         const NormStats& stats);

// Rebuilds the occupancy grid of every observation in the sample from the
// stored frame snapshots.
void attach_grids(TrainingSample& sample, const EpisodeRecord& ep, const WorkspaceSpec& ws);

struct AugmentParams {
  double brightness_prob = 0.5;
  double brightness_lo = 0.85;
  double brightness_hi = 1.15;
  double contrast_prob = 0.3;
  double contrast_lo = 0.90;
  double contrast_hi = 1.10;
};

struct PhotometricDraw {
  double brightness = 1.0;
  double contrast = 1.0;
  bool identity() const { return brightness == 1.0 && contrast == 1.0; }
};

PhotometricDraw draw_photometric(Rng& rng, const AugmentParams& p = {});
void apply_photometric(std::vector<double>& grid, double brightness, double contrast);

Observation augment_observation(const Observation& obs, Rng& rng, const AugmentParams& p = {});

}  // namespace bimag
