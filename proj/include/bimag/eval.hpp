#pragma once

// Offline action-prediction metrics and closed-loop success rates.
//
// All action metrics are computed on denormalized chunks (ticks). Direction
// metrics use every (sample, chunk step) pair whose ground-truth action norm
// exceeds eps; a pair counts as correct only when the cosine is strictly
// positive.

#include "bimag/dataset.hpp"
#include "bimag/policy.hpp"
#include "bimag/runtime.hpp"
#include "bimag/train.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bimag {

inline constexpr int kReportVersion = 1;
inline constexpr double kMovingEps = 1e-6;

struct RmseResult {
  double overall = 0.0;
  std::optional<double> approach;
  std::optional<double> transport;
  std::array<double, 4> per_axis{};
};

struct EndpointResult {
  double mean = 0.0;
  double median = 0.0;
};

struct DirectionResult {
  std::optional<double> accuracy;
  std::optional<double> mean_cosine;
  long n_moving = 0;
};

struct PhaseAccuracyResult {
  std::optional<double> overall;
  std::optional<double> approach;
  std::optional<double> transport;
};

struct MetricReport {
  RmseResult rmse;
  EndpointResult endpoint;
  DirectionResult direction;
  PhaseAccuracyResult phase;
  long n_samples = 0;
};

// preds/gts are normalized chunks; every metric denormalizes with stats first.
RmseResult rmse_report(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts,
                       std::span<const Phase> phases, const NormStats& stats);
EndpointResult endpoint_error(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts,
                              const NormStats& stats);
DirectionResult direction_metrics(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts,
                                  const NormStats& stats, double eps = kMovingEps);
PhaseAccuracyResult phase_accuracy(std::span<const Eigen::Vector2d> logits, std::span<const Phase> labels);

MetricReport compute_metrics(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts,
                             std::span<const Phase> phases, std::span<const Eigen::Vector2d> logits,
                             const NormStats& stats);

// Runs the policy on every sample (predicted phase conditions the decoder,
// as at inference) and scores it.
MetricReport evaluate_offline(const Policy& policy, const NormStats& stats, const SampleSet& samples);

struct TrialLog {
  std::uint64_t seed = 0;
  int prompt_id = 0;
  bool approach = false;
  bool transport = false;
  bool crashed = false;
  int steps = 0;
  int slips = 0;
  std::string error;
};

struct TaskSuccess {
  TaskId task = TaskId::A;
  int n_trials = 0;
  int approach = 0;
  int transport = 0;
  int crashed = 0;
  std::vector<TrialLog> trials;

  double approach_rate() const { return n_trials ? static_cast<double>(approach) / n_trials : 0.0; }
  double transport_rate() const { return n_trials ? static_cast<double>(transport) / n_trials : 0.0; }
};

struct SuccessTable {
  std::string controller;
  std::uint64_t seed = 0;
  int n_trials = 0;
  std::vector<TaskSuccess> rows;

  const TaskSuccess& row(TaskId task) const;
};

// Seed and prompt of trial i on a task; the same for every controller.
std::uint64_t trial_seed(std::uint64_t seed, TaskId task, int trial);
int trial_prompt(std::uint64_t trial_seed, TaskId task);

// A crashed rollout counts as a failure of both stages and is flagged.
SuccessTable closed_loop_eval(Controller& controller, std::span<const TaskId> tasks, int n_trials,
                              std::uint64_t seed, const SimConfig& sim, const RolloutConfig& cfg = {});

Json to_json(const MetricReport& m);
Json to_json(const SuccessTable& t);
Json report_json(const MetricReport* metrics, const SuccessTable* table);
// Returns a list of problems; empty when the document matches the schema.
std::vector<std::string> validate_report_json(const Json& j);
std::string report_table(const MetricReport* metrics, const SuccessTable* table);

// Writes `path` (JSON) and the same path with a .txt extension (text table).
void write_report(const MetricReport* metrics, const SuccessTable* table, const std::filesystem::path& path);

}  // namespace bimag
