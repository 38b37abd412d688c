#pragma once

// Session protocol behind the websocket server. Transport-agnostic: feed it
// text frames with handle() and executor ticks with tick(), send back what it
// returns.
//
// Client -> server: hello, control, mark_phase, start_record, stop_record,
// start_rollout, stop. Server -> client: state, acknowledgements (same type as
// the request), error. Every frame is {"type", "seq", "payload"}; seq must
// increase strictly per direction.
//
// Teleop: each control message advances the simulator by one tick (the client
// sends one per 10 Hz tick, zero deltas as heartbeat) and is answered with a
// state message. Rollout: the server calls tick() at its own rate and each call
// streams one executor step.

#include "bimag/dataset.hpp"
#include "bimag/magsim.hpp"
#include "bimag/policy.hpp"
#include "bimag/runtime.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace bimag {

enum class MessageType { Hello, State, Control, MarkPhase, StartRecord, StopRecord, StartRollout, Stop, Error };

std::string message_type_name(MessageType type);
std::optional<MessageType> parse_message_type(std::string_view name);

struct WireMessage {
  MessageType type = MessageType::Error;
  long seq = 0;
  Json payload = Json::object();
};

Json to_json(const WireMessage& m);
std::string to_text(const WireMessage& m);

class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

// Throws ProtocolError on malformed frames and unknown types.
WireMessage parse_wire_message(std::string_view text);

struct SessionConfig {
  SimConfig sim;
  // recorded episodes are written here as a dataset directory (train split)
  std::optional<std::filesystem::path> record_dir;
  // rollout mode is only available with a policy
  const Policy* policy = nullptr;
  const NormStats* stats = nullptr;
  RolloutConfig rollout;
};

enum class SessionMode { Idle, Teleop, Rollout };

class Session {
 public:
  explicit Session(SessionConfig cfg);
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  std::vector<WireMessage> handle(std::string_view text);
  // One executor step while a rollout runs; empty otherwise.
  std::vector<WireMessage> tick();
  // Tears the session down; an unfinished recording is dropped.
  void disconnect();

  SessionMode mode() const { return mode_; }
  bool recording() const { return recording_.has_value(); }
  const SimState& state() const { return state_; }
  const std::vector<EpisodeRecord>& recorded() const { return recorded_; }

 private:
  struct Recording {
    EpisodeRecord episode;
    std::optional<Phase> override_phase;
  };
  struct RolloutRun;

  std::vector<WireMessage> dispatch(const WireMessage& in);
  WireMessage out(MessageType type, Json payload);
  WireMessage error(const std::string& code, const std::string& message, std::optional<long> ref_seq);
  Json state_payload(const Vec4& action, std::optional<Phase> label) const;

  std::vector<WireMessage> on_hello(const WireMessage& in);
  std::vector<WireMessage> on_control(const WireMessage& in);
  std::vector<WireMessage> on_mark_phase(const WireMessage& in);
  std::vector<WireMessage> on_start_record(const WireMessage& in);
  std::vector<WireMessage> on_stop_record(const WireMessage& in);
  std::vector<WireMessage> on_start_rollout(const WireMessage& in);
  std::vector<WireMessage> on_stop(const WireMessage& in);
  void write_recordings() const;

  SessionConfig cfg_;
  SessionMode mode_ = SessionMode::Idle;
  long last_in_seq_ = -1;
  long out_seq_ = 0;
  TaskId task_ = TaskId::A;
  std::uint64_t seed_ = 0;
  WorkspaceSpec ws_;
  SimConfig sim_;
  SimState state_;
  std::optional<Recording> recording_;
  std::vector<EpisodeRecord> recorded_;
  std::unique_ptr<RolloutRun> rollout_;
};

Json prompt_bank_json();

}  // namespace bimag
