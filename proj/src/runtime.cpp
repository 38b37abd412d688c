#include "bimag/runtime.hpp"

#include "bimag/json_io.hpp"

#include <sstream>

namespace bimag {

ChunkBuffer::ChunkBuffer(double decay, int horizon) : decay_(decay), horizon_(horizon) {
  if (!(decay >= 0.0) || !std::isfinite(decay)) throw std::invalid_argument("ChunkBuffer: decay must be >= 0");
  if (horizon <= 0) throw std::invalid_argument("ChunkBuffer: horizon must be > 0");
}

void ChunkBuffer::push(long t_r, const ChunkMatrix& chunk) {
  if (chunk.rows() != horizon_ || chunk.cols() != kActionDim) {
    throw std::invalid_argument("ChunkBuffer::push: chunk must be " + std::to_string(horizon_) + "x" +
                                std::to_string(kActionDim));
  }
  if (!chunk.allFinite()) throw std::invalid_argument("ChunkBuffer::push: non-finite chunk");
  if (!entries_.empty() && t_r <= entries_.back().t_r) {
    throw std::invalid_argument("ChunkBuffer::push: issue step " + std::to_string(t_r) +
                                " is not after " + std::to_string(entries_.back().t_r));
  }
  entries_.push_back(ChunkEntry{t_r, chunk});
}

void ChunkBuffer::prune(long t) {
  // issue steps increase along the deque, so stale entries sit at the front
  while (!entries_.empty() && t - entries_.front().t_r >= horizon_) entries_.pop_front();
}

Vec4 ChunkBuffer::ensemble(long t) const {
  // incremental weighted mean: a lone chunk or identical rows come back bit-exact
  Vec4 mean = Vec4::Zero();
  double den = 0.0;
  for (const auto& e : entries_) {
    const long i = t - e.t_r;
    if (i < 0 || i >= horizon_) continue;
    const double w = weight(i, decay_);
    den += w;
    mean += (w / den) * (e.chunk.row(i).transpose() - mean);
  }
  if (den == 0.0) throw NoActionError("no chunk covers step " + std::to_string(t));
  return mean;
}

double ChunkBuffer::weight_mass(long t) const {
  double den = 0.0;
  for (const auto& e : entries_) {
    const long i = t - e.t_r;
    if (i >= 0 && i < horizon_) den += weight(i, decay_);
  }
  return den;
}

int ChunkBuffer::active(long t) const {
  int n = 0;
  for (const auto& e : entries_) {
    const long i = t - e.t_r;
    if (i >= 0 && i < horizon_) ++n;
  }
  return n;
}

void RolloutConfig::validate() const {
  if (max_steps <= 0) throw std::invalid_argument("RolloutConfig: max_steps must be > 0");
  if (replan_every <= 0 || replan_every > kChunk) {
    throw std::invalid_argument("RolloutConfig: replan_every must lie in [1, K]");
  }
  if (!(decay >= 0.0)) throw std::invalid_argument("RolloutConfig: decay must be >= 0");
}

// ---------------------------------------------------------------------------
// Controllers

PolicyController::PolicyController(const Policy& policy, const NormStats& stats, const RolloutConfig& cfg)
    : policy_(policy), stats_(stats), cfg_(cfg), buffer_(cfg.decay, policy.config().chunk) {
  cfg_.validate();
}

void PolicyController::reset(const SimState&, const WorkspaceSpec& ws, const SimConfig& cfg, int prompt_id) {
  ws_ = &ws;
  sim_ = cfg;
  prompt_id_ = prompt_id;
  buffer_.clear();
  obs_.clear();
  states_.clear();
}

Vec4 PolicyController::act(const SimState& state, StepRecord& rec) {
  const int hist = policy_.config().history;
  Observation obs = observe(state, *ws_, policy_.config().use_grid);
  if (obs_.empty()) {
    first_plan_ = state.t;
    if (cfg_.warmup_hold) {
      first_plan_ += hist - 1;
    } else {
      for (int k = 0; k < hist - 1; ++k) {
        obs_.push_back(obs);
        states_.push_back(state.arms);
      }
    }
  }
  obs_.push_back(std::move(obs));
  states_.push_back(state.arms);
  while (static_cast<int>(obs_.size()) > hist) {
    obs_.pop_front();
    states_.pop_front();
  }

  const long t = state.t;
  if (t >= first_plan_ && (t - first_plan_) % cfg_.replan_every == 0) {
    const std::vector<Observation> oh(obs_.begin(), obs_.end());
    const std::vector<Vec4> sh(states_.begin(), states_.end());
    const PolicyInput in{oh, sh, prompt_id_};
    std::optional<Phase> teacher;
    if (cfg_.teacher_phase) teacher = state.attached ? Phase::Transport : Phase::Approach;
    const ForwardOutput out = policy_.forward(in, teacher);
    const ChunkMatrix ticks = denormalize_chunk(out.chunk, stats_);
    if (cfg_.clear_on_replan) buffer_.clear();
    buffer_.push(t, ticks);
    rec.pushed = ChunkEntry{t, ticks};
    rec.predicted_phase = out.phase.predicted;
    rec.logits = out.phase.logits;
  }
  buffer_.prune(t);
  rec.weight_mass = buffer_.weight_mass(t);
  rec.active_chunks = buffer_.active(t);
  try {
    return buffer_.ensemble(t);
  } catch (const NoActionError&) {
    rec.held = true;
    return Vec4::Zero();
  }
}

Vec4 ExpertController::act(const SimState& state, StepRecord& rec) {
  const ExpertDecision d = expert_action(state, *ws_, sim_, params_);
  rec.predicted_phase = d.phase;
  return d.action;
}

// ---------------------------------------------------------------------------
// Rollouts

RolloutRunner::RolloutRunner(Controller& controller, TaskId task, int prompt_id, std::uint64_t seed,
                             const SimConfig& sim, const RolloutConfig& cfg)
    : controller_(controller), ws_(build_workspace(task)), sim_(sim), cfg_(cfg) {
  cfg_.validate();
  sim_.rng_seed = seed;
  Rng rng = make_rng(seed, 1);
  result_.task = task;
  result_.prompt_id = prompt_id;
  result_.seed = seed;
  result_.final_state = sample_initial_state(ws_, rng);
  result_.success = check_success(result_.final_state, ws_);
  try {
    controller_.reset(result_.final_state, ws_, sim_, prompt_id);
  } catch (const std::exception& e) {
    result_.crashed = true;
    result_.error = e.what();
    done_ = true;
  }
}

const StepRecord* RolloutRunner::step() {
  if (done_) return nullptr;
  SimState& state = result_.final_state;
  try {
    StepRecord rec;
    rec.t = state.t;
    rec.state = state;
    const Vec4 action = controller_.act(state, rec);
    state = step_sim(state, action, ws_, sim_);
    rec.command = action;
    rec.action = clip_action(action, sim_);
    rec.success = check_success(state, ws_);
    result_.steps.push_back(std::move(rec));
  } catch (const std::exception& e) {
    result_.crashed = true;
    result_.error = e.what();
    done_ = true;
    return nullptr;
  }
  result_.success = check_success(state, ws_);
  if (result_.success.transport_done || static_cast<int>(result_.steps.size()) >= cfg_.max_steps) done_ = true;
  return &result_.steps.back();
}

RolloutResult run_rollout(Controller& controller, TaskId task, int prompt_id, std::uint64_t seed,
                          const SimConfig& sim, const RolloutConfig& cfg) {
  cfg.validate();
  RolloutRunner runner(controller, task, prompt_id, seed, sim, cfg);
  while (runner.step()) {
  }
  return runner.take();
}

namespace {

Json chunk_json(const ChunkMatrix& c) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < c.cols(); ++j) row.push_back(c(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

std::string trajectory_to_jsonl(const RolloutResult& r, const RolloutConfig& cfg) {
  std::ostringstream out;
  out << Json{{"type", "header"},
              {"format_version", 1},
              {"task_id", task_name(r.task)},
              {"prompt_id", r.prompt_id},
              {"seed", r.seed},
              {"decay", cfg.decay},
              {"horizon", kChunk},
              {"replan_every", cfg.replan_every},
              {"max_steps", cfg.max_steps}}
             .dump()
      << '\n';
  for (const auto& s : r.steps) {
    Json j{{"type", "step"},
           {"t", s.t},
           {"arms", to_json(s.state.arms)},
           {"bead", to_json(s.state.bead)},
           {"cargo", to_json(s.state.cargo)},
           {"attached", s.state.attached},
           {"command", to_json(s.command)},
           {"action", to_json(s.action)},
           {"held", s.held},
           {"weight_mass", s.weight_mass},
           {"active_chunks", s.active_chunks},
           {"approach_done", s.success.approach_done},
           {"transport_done", s.success.transport_done}};
    if (s.predicted_phase) j["predicted_phase"] = phase_name(*s.predicted_phase);
    if (s.logits) j["logits"] = Json::array({(*s.logits)[0], (*s.logits)[1]});
    if (s.pushed) j["chunk"] = Json{{"t_r", s.pushed->t_r}, {"rows", chunk_json(s.pushed->chunk)}};
    out << j.dump() << '\n';
  }
  Json footer{{"type", "result"},
              {"approach_done", r.success.approach_done},
              {"transport_done", r.success.transport_done},
              {"steps", r.steps.size()},
              {"slips", r.final_state.slips},
              {"crashed", r.crashed}};
  if (r.crashed) footer["error"] = r.error;
  out << footer.dump() << '\n';
  return out.str();
}

}  // namespace bimag
