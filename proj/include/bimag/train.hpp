#pragma once

// Imitation training: AdamW with decoupled decay, cosine schedule, per-sample
// photometric augmentation, best-validation checkpointing, and a central
// finite-difference gradient check.

#include "bimag/dataset.hpp"
#include "bimag/policy.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace bimag {

struct TrainConfig {
  int steps = 2000;
  int batch = 16;
  double lr_max = 1e-3;
  double lr_min = 0.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  int eval_every = 200;
  bool augment = true;
  AugmentParams augment_params;
  int max_val_samples = 0;  // 0 = whole validation split

  void validate() const;
};

Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j);

double cosine_lr(int step, const TrainConfig& cfg);

struct AdamState {
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
  long t = 0;
  long skipped = 0;
};

AdamState make_adam_state(const ParamSet& params);

// Returns false and leaves params and moments untouched when any gradient
// entry is non-finite.
bool optimizer_step(ParamSet& params, const std::vector<ad::Matrix>& grads, AdamState& state,
                    double lr, const TrainConfig& cfg);

// Training samples with occupancy grids kept as compact per-frame bitmaps and
// expanded on demand.
class SampleSet {
 public:
  SampleSet(std::span<const EpisodeRecord* const> episodes, const NormStats& stats, bool with_grids);

  std::size_t size() const { return samples_.size(); }
  bool with_grids() const { return with_grids_; }
  // Full sample; photometric augmentation drawn from rng when non-null, with
  // one brightness/contrast draw shared by the sample's frames.
  TrainingSample get(std::size_t i, Rng* augment_rng = nullptr, const AugmentParams& p = {}) const;
  const TrainingSample& bare(std::size_t i) const { return samples_[i]; }

 private:
  std::vector<TrainingSample> samples_;
  std::vector<std::size_t> episode_of_;
  std::vector<std::vector<std::vector<std::uint8_t>>> grids_;  // [episode][frame][cell]
  bool with_grids_;
};

struct EvalSummary {
  double loss = 0.0;
  double loss_action = 0.0;
  double loss_phase = 0.0;
  double phase_accuracy = 0.0;
  long n = 0;
};

// Teacher-forced loss and argmax phase accuracy over (a prefix of) a sample set.
EvalSummary evaluate_samples(const Policy& policy, const SampleSet& set, std::size_t limit = 0);

struct TrainResult {
  Policy last;
  Policy best;
  int best_step = -1;
  double best_val_loss = 0.0;
  EvalSummary initial_train;
  EvalSummary final_train;
  long skipped_steps = 0;
  std::optional<std::filesystem::path> best_checkpoint;
  std::optional<std::filesystem::path> last_checkpoint;
  std::optional<std::filesystem::path> log_path;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints + train_log.jsonl
  bool evaluate_train_set = true;                // fill initial_train/final_train
  std::function<void(const Json&)> on_log;       // called for every log record
};

// Throws before step 0 when the dataset's stats do not match its train split.
TrainResult train_loop(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& tcfg,
                       const TrainOptions& opts = {});

struct GradCheckGroup {
  std::string name;
  long entries = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  int total_groups = 0;
  long entries = 0;
  double max_rel_error = 0.0;
  std::string worst_group;
  double step = 1e-5;
  double tolerance = 1e-4;
  int nudged_targets = 0;
  bool passed() const { return max_rel_error < tolerance && static_cast<int>(groups.size()) == total_groups; }
};

Json to_json(const GradCheckReport& r);

// Small model used for gradient checks.
ModelConfig tiny_model_config(std::uint64_t seed = 0);

// Central differences over every parameter entry. The zero-initialized output
// head is replaced with random values first, otherwise every upstream gradient
// is trivially zero. Targets within 0.01 of the Smooth L1 kink are moved away.
GradCheckReport grad_check(const ModelConfig& cfg, TrainingSample sample, double step = 1e-5,
                           double tolerance = 1e-4);

}  // namespace bimag
