#pragma once

// Receding-horizon execution: every step the policy predicts a chunk, the
// chunk is pushed into a buffer of overlapping predictions, and the executed
// action is the exponentially weighted mix of every chunk row aligned with the
// current step.

#include "bimag/dataset.hpp"
#include "bimag/magsim.hpp"
#include "bimag/policy.hpp"

#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bimag {

inline constexpr double kDefaultDecay = 0.01;

// Thrown when no stored chunk covers the requested step.
class NoActionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ChunkEntry {
  long t_r = 0;       // issue step
  ChunkMatrix chunk;  // ticks, horizon x kActionDim
};

class ChunkBuffer {
 public:
  explicit ChunkBuffer(double decay = kDefaultDecay, int horizon = kChunk);

  // t_r must exceed every stored issue step.
  void push(long t_r, const ChunkMatrix& chunk);
  // Drops entries with t - t_r >= horizon.
  void prune(long t);
  void clear() { entries_.clear(); }

  // sum_r w(t - t_r) * chunk_r[t - t_r] / sum_r w(t - t_r) over entries with
  // 0 <= t - t_r < horizon.
  Vec4 ensemble(long t) const;
  double weight_mass(long t) const;
  int active(long t) const;

  static double weight(long aligned_index, double decay) {
    return std::exp(-decay * static_cast<double>(aligned_index));
  }

  const std::deque<ChunkEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  double decay() const { return decay_; }
  int horizon() const { return horizon_; }

 private:
  std::deque<ChunkEntry> entries_;
  double decay_;
  int horizon_;
};

struct RolloutConfig {
  int max_steps = 600;
  int replan_every = 1;
  bool clear_on_replan = false;  // open-loop chunk execution when combined with replan_every = K
  bool teacher_phase = false;    // condition on the attachment-derived phase instead of the prediction
  double decay = kDefaultDecay;
  // hold position for the first history - 1 steps so the first plan sees real
  // frames; otherwise the first frame is repeated to fill the window
  bool warmup_hold = true;

  void validate() const;
};

struct StepRecord {
  long t = 0;
  SimState state;  // before the action
  Vec4 command = Vec4::Zero();  // controller output (the ensembled action for a policy)
  Vec4 action = Vec4::Zero();   // after clipping, as executed
  bool held = false;  // no chunk covered this step
  std::optional<Phase> predicted_phase;
  std::optional<Eigen::Vector2d> logits;
  std::optional<ChunkEntry> pushed;
  double weight_mass = 0.0;
  int active_chunks = 0;
  SuccessFlags success;  // after the action
};

// Chooses one action per step.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual void reset(const SimState& initial, const WorkspaceSpec& ws, const SimConfig& cfg, int prompt_id) = 0;
  // Fills the per-step fields it knows about and returns the action in ticks.
  virtual Vec4 act(const SimState& state, StepRecord& rec) = 0;
  virtual std::string name() const = 0;
};

class PolicyController : public Controller {
 public:
  PolicyController(const Policy& policy, const NormStats& stats, const RolloutConfig& cfg = {});

  void reset(const SimState& initial, const WorkspaceSpec& ws, const SimConfig& cfg, int prompt_id) override;
  Vec4 act(const SimState& state, StepRecord& rec) override;
  std::string name() const override { return "policy"; }

  const ChunkBuffer& buffer() const { return buffer_; }

 private:
  const Policy& policy_;
  NormStats stats_;
  RolloutConfig cfg_;
  ChunkBuffer buffer_;
  const WorkspaceSpec* ws_ = nullptr;
  SimConfig sim_;
  int prompt_id_ = 0;
  std::deque<Observation> obs_;
  std::deque<Vec4> states_;
  long first_plan_ = 0;
};

class ExpertController : public Controller {
 public:
  explicit ExpertController(const ExpertParams& params = {}) : params_(params) {}
  void reset(const SimState&, const WorkspaceSpec& ws, const SimConfig& cfg, int) override {
    ws_ = &ws;
    sim_ = cfg;
  }
  Vec4 act(const SimState& state, StepRecord& rec) override;
  std::string name() const override { return "expert"; }

 private:
  ExpertParams params_;
  const WorkspaceSpec* ws_ = nullptr;
  SimConfig sim_;
};

class ZeroController : public Controller {
 public:
  void reset(const SimState&, const WorkspaceSpec&, const SimConfig&, int) override {}
  Vec4 act(const SimState&, StepRecord&) override { return Vec4::Zero(); }
  std::string name() const override { return "zero"; }
};

struct RolloutResult {
  TaskId task = TaskId::A;
  int prompt_id = 0;
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;
  SimState final_state;
  SuccessFlags success;
  bool crashed = false;
  std::string error;
};

// Steps one rollout at a time; run_rollout drives it to completion and the
// session server streams it. Owns the workspace the controller points into,
// so it is neither copyable nor movable.
class RolloutRunner {
 public:
  RolloutRunner(Controller& controller, TaskId task, int prompt_id, std::uint64_t seed, const SimConfig& sim,
                const RolloutConfig& cfg = {});
  RolloutRunner(const RolloutRunner&) = delete;
  RolloutRunner& operator=(const RolloutRunner&) = delete;

  // Runs one executor step; returns the record, or nullptr when finished.
  const StepRecord* step();
  bool done() const { return done_; }
  const SimState& state() const { return result_.final_state; }
  const WorkspaceSpec& workspace() const { return ws_; }
  const RolloutResult& result() const { return result_; }
  RolloutResult take() { return std::move(result_); }

 private:
  Controller& controller_;
  WorkspaceSpec ws_;
  SimConfig sim_;
  RolloutConfig cfg_;
  RolloutResult result_;
  bool done_ = false;
};

// The simulator uses `seed` for its noise stream and the initial state is
// drawn from the same seed, as in dataset generation.
RolloutResult run_rollout(Controller& controller, TaskId task, int prompt_id, std::uint64_t seed,
                          const SimConfig& sim, const RolloutConfig& cfg = {});

// Header line followed by one step object per line; every pushed chunk is
// logged with its issue step.
std::string trajectory_to_jsonl(const RolloutResult& r, const RolloutConfig& cfg);

}  // namespace bimag
