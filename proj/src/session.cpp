#include "bimag/session.hpp"

#include <array>
#include <cmath>
#include <utility>

namespace bimag {

namespace {

constexpr std::array<std::pair<MessageType, const char*>, 9> kTypeNames{{
    {MessageType::Hello, "hello"},
    {MessageType::State, "state"},
    {MessageType::Control, "control"},
    {MessageType::MarkPhase, "mark_phase"},
    {MessageType::StartRecord, "start_record"},
    {MessageType::StopRecord, "stop_record"},
    {MessageType::StartRollout, "start_rollout"},
    {MessageType::Stop, "stop"},
    {MessageType::Error, "error"},
}};

Json success_json(const SuccessFlags& s) {
  return Json{{"approach_done", s.approach_done}, {"transport_done", s.transport_done}};
}

Json chunk_rows(const ChunkMatrix& c) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    rows.push_back(Json::array({c(i, 0), c(i, 1), c(i, 2), c(i, 3)}));
  }
  return rows;
}

double number_field(const Json& payload, const char* key) {
  if (!payload.contains(key)) throw ProtocolError("bad_payload", std::string("missing field ") + key);
  const Json& v = payload.at(key);
  if (!v.is_number()) throw ProtocolError("bad_payload", std::string("field ") + key + " must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ProtocolError("bad_payload", std::string("field ") + key + " must be finite");
  return x;
}

template <class T>
T optional_field(const Json& payload, const char* key, T fallback) {
  if (!payload.contains(key)) return fallback;
  try {
    return payload.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ProtocolError("bad_payload", std::string("field ") + key + " has the wrong type");
  }
}

TaskId task_field(const Json& payload, TaskId fallback) {
  if (!payload.contains("task")) return fallback;
  try {
    return parse_task(payload.at("task").get<std::string>());
  } catch (const std::exception&) {
    throw ProtocolError("bad_payload", "task must be one of A, B, C");
  }
}

}  // namespace

std::string message_type_name(MessageType type) {
  for (const auto& [t, name] : kTypeNames) {
    if (t == type) return name;
  }
  throw std::invalid_argument("unknown message type");
}

std::optional<MessageType> parse_message_type(std::string_view name) {
  for (const auto& [t, n] : kTypeNames) {
    if (name == n) return t;
  }
  return std::nullopt;
}

Json to_json(const WireMessage& m) {
  return Json{{"type", message_type_name(m.type)}, {"seq", m.seq}, {"payload", m.payload}};
}

std::string to_text(const WireMessage& m) { return to_json(m).dump(); }

WireMessage parse_wire_message(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ProtocolError("bad_json", std::string("not JSON: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError("bad_message", "message must be a JSON object");
  if (!j.contains("type") || !j.at("type").is_string()) throw ProtocolError("bad_message", "missing type");
  if (!j.contains("seq") || !j.at("seq").is_number_integer()) {
    throw ProtocolError("bad_message", "missing integer seq");
  }
  const auto type = parse_message_type(j.at("type").get<std::string>());
  if (!type) throw ProtocolError("unknown_type", "unknown message type " + j.at("type").get<std::string>());
  WireMessage m;
  m.type = *type;
  m.seq = j.at("seq").get<long>();
  if (j.contains("payload")) {
    if (!j.at("payload").is_object()) throw ProtocolError("bad_message", "payload must be an object");
    m.payload = j.at("payload");
  }
  return m;
}

Json prompt_bank_json() {
  const PromptBank& bank = prompt_bank();
  Json out = Json::array();
  for (int i = 0; i < bank.size(); ++i) {
    out.push_back(Json{{"id", i}, {"task", task_name(bank.task_of(i))}, {"text", bank.prompts[static_cast<std::size_t>(i)]}});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct Session::RolloutRun {
  PolicyController controller;
  RolloutRunner runner;

  RolloutRun(const Policy& policy, const NormStats& stats, const RolloutConfig& cfg, TaskId task, int prompt,
             std::uint64_t seed, const SimConfig& sim)
      : controller(policy, stats, cfg), runner(controller, task, prompt, seed, sim, cfg) {}
};

Session::Session(SessionConfig cfg) : cfg_(std::move(cfg)), sim_(cfg_.sim) { cfg_.sim.validate(); }

Session::~Session() = default;

WireMessage Session::out(MessageType type, Json payload) {
  WireMessage m;
  m.type = type;
  m.seq = ++out_seq_;
  m.payload = std::move(payload);
  return m;
}

WireMessage Session::error(const std::string& code, const std::string& message, std::optional<long> ref_seq) {
  Json p{{"code", code}, {"message", message}};
  if (ref_seq) p["ref_seq"] = *ref_seq;
  return out(MessageType::Error, std::move(p));
}

std::vector<WireMessage> Session::handle(std::string_view text) {
  WireMessage in;
  try {
    in = parse_wire_message(text);
  } catch (const ProtocolError& e) {
    return {error(e.code(), e.what(), std::nullopt)};
  }
  if (in.seq <= last_in_seq_) {
    return {error("bad_seq", "seq " + std::to_string(in.seq) + " is not after " + std::to_string(last_in_seq_),
                  in.seq)};
  }
  last_in_seq_ = in.seq;
  try {
    return dispatch(in);
  } catch (const ProtocolError& e) {
    return {error(e.code(), e.what(), in.seq)};
  } catch (const std::exception& e) {
    return {error("failed", e.what(), in.seq)};
  }
}

std::vector<WireMessage> Session::dispatch(const WireMessage& in) {
  if (in.type != MessageType::Hello && mode_ == SessionMode::Idle) {
    throw ProtocolError("no_session", "send hello first");
  }
  switch (in.type) {
    case MessageType::Hello: return on_hello(in);
    case MessageType::Control: return on_control(in);
    case MessageType::MarkPhase: return on_mark_phase(in);
    case MessageType::StartRecord: return on_start_record(in);
    case MessageType::StopRecord: return on_stop_record(in);
    case MessageType::StartRollout: return on_start_rollout(in);
    case MessageType::Stop: return on_stop(in);
    case MessageType::State:
    case MessageType::Error: break;
  }
  throw ProtocolError("unexpected_type", message_type_name(in.type) + " is sent by the server only");
}

Json Session::state_payload(const Vec4& action, std::optional<Phase> label) const {
  Json p{{"mode", "teleop"},
         {"t", state_.t},
         {"state", to_json(state_)},
         {"action", to_json(action)},
         {"success", success_json(check_success(state_, ws_))},
         {"recording", recording_.has_value()}};
  if (label) p["phase"] = phase_name(*label);
  if (recording_) p["frames"] = recording_->episode.length();
  return p;
}

std::vector<WireMessage> Session::on_hello(const WireMessage& in) {
  if (recording_) throw ProtocolError("busy", "stop the recording before a new hello");
  if (mode_ == SessionMode::Rollout) throw ProtocolError("busy", "stop the rollout before a new hello");
  task_ = task_field(in.payload, TaskId::A);
  seed_ = optional_field<std::uint64_t>(in.payload, "seed", 0);
  ws_ = build_workspace(task_);
  sim_ = cfg_.sim;
  sim_.rng_seed = seed_;
  Rng rng = make_rng(seed_, 1);
  state_ = sample_initial_state(ws_, rng);
  mode_ = SessionMode::Teleop;

  Json p = state_payload(Vec4::Zero(), std::nullopt);
  p["handshake"] = true;
  p["task"] = task_name(task_);
  p["seed"] = seed_;
  p["workspace"] = to_json(ws_);
  p["sim_config"] = to_json(sim_);
  p["prompts"] = prompt_bank_json();
  p["rollout_available"] = cfg_.policy != nullptr && cfg_.stats != nullptr;
  p["fps"] = kFps;
  return {out(MessageType::State, std::move(p))};
}

std::vector<WireMessage> Session::on_control(const WireMessage& in) {
  if (mode_ != SessionMode::Teleop) throw ProtocolError("busy", "control is ignored while a rollout runs");
  const Vec4 raw(number_field(in.payload, "dxL"), number_field(in.payload, "dyL"), number_field(in.payload, "dxR"),
                 number_field(in.payload, "dyR"));
  const Vec4 action = clip_action(raw, sim_);
  std::optional<Phase> label;
  if (recording_) {
    Frame f;
    f.obs = observe(state_, ws_);
    f.state = state_.arms;
    f.action = action;
    f.phase = recording_->override_phase.value_or(state_.attached ? Phase::Transport : Phase::Approach);
    f.bead = state_.bead;
    f.cargo = state_.cargo;
    f.attached = state_.attached;
    label = f.phase;
    recording_->episode.frames.push_back(std::move(f));
  }
  state_ = step_sim(state_, action, ws_, sim_);
  return {out(MessageType::State, state_payload(action, label))};
}

std::vector<WireMessage> Session::on_mark_phase(const WireMessage& in) {
  if (!recording_) throw ProtocolError("not_recording", "mark_phase needs an active recording");
  const std::string phase = optional_field<std::string>(in.payload, "phase", "");
  if (phase == "auto") {
    recording_->override_phase.reset();
  } else {
    try {
      recording_->override_phase = parse_phase(phase);
    } catch (const std::exception&) {
      throw ProtocolError("bad_payload", "phase must be approach, transport or auto");
    }
  }
  return {out(MessageType::MarkPhase, Json{{"phase", phase}, {"ref_seq", in.seq}})};
}

std::vector<WireMessage> Session::on_start_record(const WireMessage& in) {
  if (recording_) throw ProtocolError("busy", "already recording");
  if (mode_ != SessionMode::Teleop) throw ProtocolError("busy", "cannot record during a rollout");
  const PromptBank& bank = prompt_bank();
  const auto candidates = bank.prompts_for(task_);
  const int prompt = optional_field<int>(in.payload, "prompt_id", candidates.front());
  if (prompt < 0 || prompt >= bank.size() || bank.task_of(prompt) != task_) {
    throw ProtocolError("bad_payload", "prompt_id " + std::to_string(prompt) + " is not a task " + task_name(task_) +
                                           " prompt");
  }
  Recording r;
  r.episode.episode_id = static_cast<int>(recorded_.size());
  r.episode.task = task_;
  r.episode.prompt_id = prompt;
  r.episode.seed = seed_;
  r.episode.split = Split::Train;
  recording_ = std::move(r);
  return {out(MessageType::StartRecord,
              Json{{"recording", true}, {"episode_id", recording_->episode.episode_id}, {"prompt_id", prompt},
                   {"ref_seq", in.seq}})};
}

std::vector<WireMessage> Session::on_stop_record(const WireMessage& in) {
  if (!recording_) throw ProtocolError("not_recording", "stop_record without start_record");
  EpisodeRecord ep = std::move(recording_->episode);
  recording_.reset();
  const auto problems = validate_episode(ep);
  if (!problems.empty()) {
    Json p{{"code", "invalid_episode"}, {"message", "recording discarded"}, {"problems", problems},
           {"ref_seq", in.seq}};
    return {out(MessageType::Error, std::move(p))};
  }
  recorded_.push_back(std::move(ep));
  Json p{{"recording", false},
         {"episode_id", recorded_.back().episode_id},
         {"frames", recorded_.back().length()},
         {"ref_seq", in.seq}};
  if (cfg_.record_dir) {
    write_recordings();
    p["path"] = cfg_.record_dir->string();
  }
  return {out(MessageType::StopRecord, std::move(p))};
}

void Session::write_recordings() const {
  Dataset ds;
  ds.meta.seed = seed_;
  ds.meta.sim = cfg_.sim;
  ds.meta.n_episodes = static_cast<int>(recorded_.size());
  ds.meta.split_ratio = {1, 0, 0};
  ds.meta.lead_in = 0;
  ds.meta.source = "teleop";
  ds.episodes = recorded_;
  for (const auto& ep : ds.episodes) ds.meta.total_frames += ep.length();
  ds.stats = compute_norm_stats(std::span<const EpisodeRecord>(ds.episodes));
  write_dataset(ds, *cfg_.record_dir);
}

std::vector<WireMessage> Session::on_start_rollout(const WireMessage& in) {
  if (!cfg_.policy || !cfg_.stats) throw ProtocolError("no_policy", "server was started without a checkpoint");
  if (recording_) throw ProtocolError("busy", "stop the recording first");
  if (mode_ == SessionMode::Rollout) throw ProtocolError("busy", "a rollout is already running");
  const TaskId task = task_field(in.payload, task_);
  const auto seed = optional_field<std::uint64_t>(in.payload, "seed", seed_);
  const PromptBank& bank = prompt_bank();
  const int prompt = optional_field<int>(in.payload, "prompt_id", bank.prompts_for(task).front());
  if (prompt < 0 || prompt >= bank.size() || bank.task_of(prompt) != task) {
    throw ProtocolError("bad_payload", "prompt_id does not belong to the task");
  }
  RolloutConfig rc = cfg_.rollout;
  rc.max_steps = optional_field<int>(in.payload, "max_steps", rc.max_steps);
  rc.validate();
  rollout_ = std::make_unique<RolloutRun>(*cfg_.policy, *cfg_.stats, rc, task, prompt, seed, cfg_.sim);
  mode_ = SessionMode::Rollout;
  const RolloutRunner& r = rollout_->runner;
  return {out(MessageType::StartRollout, Json{{"task", task_name(task)},
                                              {"seed", seed},
                                              {"prompt_id", prompt},
                                              {"max_steps", rc.max_steps},
                                              {"workspace", to_json(r.workspace())},
                                              {"state", to_json(r.state())},
                                              {"ref_seq", in.seq}})};
}

std::vector<WireMessage> Session::tick() {
  if (mode_ != SessionMode::Rollout || !rollout_) return {};
  RolloutRunner& r = rollout_->runner;
  std::vector<WireMessage> msgs;
  if (const StepRecord* s = r.step()) {
    Json p{{"mode", "rollout"},
           {"t", s->t},
           {"state", to_json(r.state())},
           {"command", to_json(s->command)},
           {"action", to_json(s->action)},
           {"held", s->held},
           {"weight_mass", s->weight_mass},
           {"active_chunks", s->active_chunks},
           {"success", success_json(s->success)}};
    if (s->predicted_phase) p["predicted_phase"] = phase_name(*s->predicted_phase);
    if (s->pushed) p["chunk"] = Json{{"t_r", s->pushed->t_r}, {"rows", chunk_rows(s->pushed->chunk)}};
    msgs.push_back(out(MessageType::State, std::move(p)));
  }
  if (r.done()) {
    const RolloutResult& res = r.result();
    Json p{{"finished", true},
           {"steps", res.steps.size()},
           {"success", success_json(res.success)},
           {"crashed", res.crashed}};
    if (res.crashed) p["error"] = res.error;
    msgs.push_back(out(MessageType::Stop, std::move(p)));
    rollout_.reset();
    mode_ = SessionMode::Teleop;
  }
  return msgs;
}

std::vector<WireMessage> Session::on_stop(const WireMessage& in) {
  Json p{{"ref_seq", in.seq}, {"finished", false}};
  if (rollout_) {
    p["steps"] = rollout_->runner.result().steps.size();
    rollout_.reset();
    mode_ = SessionMode::Teleop;
  }
  return {out(MessageType::Stop, std::move(p))};
}

void Session::disconnect() {
  recording_.reset();
  rollout_.reset();
  mode_ = SessionMode::Idle;
}

}  // namespace bimag
