#include "bimag/session.hpp"
#include "bimag/train.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <filesystem>

using namespace bimag;
namespace fs = std::filesystem;

namespace {

struct Client {
  Session& session;
  long seq = 0;

  std::vector<WireMessage> send(const std::string& type, Json payload = Json::object()) {
    return session.handle(Json{{"type", type}, {"seq", ++seq}, {"payload", std::move(payload)}}.dump());
  }
  WireMessage one(const std::string& type, Json payload = Json::object()) {
    auto msgs = send(type, std::move(payload));
    REQUIRE(msgs.size() == 1);
    return msgs.front();
  }
  WireMessage control(const Vec4& a) {
    return one("control", Json{{"dxL", a[0]}, {"dyL", a[1]}, {"dxR", a[2]}, {"dyR", a[3]}});
  }
};

std::string error_code(const WireMessage& m) {
  REQUIRE(m.type == MessageType::Error);
  return m.payload.at("code").get<std::string>();
}

}  // namespace

TEST_CASE("wire format") {
  for (auto t : {MessageType::Hello, MessageType::State, MessageType::Control, MessageType::MarkPhase,
                 MessageType::StartRecord, MessageType::StopRecord, MessageType::StartRollout, MessageType::Stop,
                 MessageType::Error}) {
    CHECK(parse_message_type(message_type_name(t)) == t);
  }
  CHECK_FALSE(parse_message_type("teleport").has_value());
  const WireMessage m{MessageType::Control, 4, Json{{"dxL", 1.0}}};
  const WireMessage back = parse_wire_message(to_text(m));
  CHECK(back.type == m.type);
  CHECK(back.seq == 4);
  CHECK(back.payload == m.payload);
  CHECK_THROWS_AS(parse_wire_message("{"), ProtocolError);
  CHECK_THROWS_AS(parse_wire_message(R"({"type":"hello"})"), ProtocolError);
  CHECK_THROWS_AS(parse_wire_message(R"({"type":"warp","seq":1})"), ProtocolError);
  CHECK_THROWS_AS(parse_wire_message(R"({"type":"hello","seq":1,"payload":[]})"), ProtocolError);
}

TEST_CASE("handshake carries the workspace and prompts") {
  Session s(SessionConfig{});
  Client c{s};
  CHECK(error_code(c.one("control", Json{{"dxL", 0}, {"dyL", 0}, {"dxR", 0}, {"dyR", 0}})) == "no_session");
  const WireMessage h = c.one("hello", Json{{"task", "B"}, {"seed", 3}});
  CHECK(h.type == MessageType::State);
  CHECK(h.payload.at("handshake") == true);
  CHECK(h.payload.at("task") == "B");
  CHECK(h.payload.at("workspace") == to_json(build_workspace(TaskId::B)));
  CHECK(h.payload.at("prompts").size() == 70);
  CHECK(h.payload.at("rollout_available") == false);
  CHECK(s.mode() == SessionMode::Teleop);
}

TEST_CASE("zero control only moves the bead") {
  Session s(SessionConfig{});
  Client c{s};
  c.one("hello", Json{{"task", "A"}, {"seed", 1}});
  const SimState before = s.state();
  const WireMessage r = c.control(Vec4::Zero());
  CHECK(r.type == MessageType::State);
  CHECK(s.state().arms == before.arms);
  CHECK(s.state().cargo == before.cargo);
  CHECK(s.state().t == before.t + 1);
  CHECK(r.payload.at("t") == before.t + 1);
}

TEST_CASE("controls are clipped like the simulator") {
  Session s(SessionConfig{});
  Client c{s};
  c.one("hello");
  const SimState before = s.state();
  const WireMessage r = c.control(Vec4(500, 0, 0, 0));
  const Vec4 clipped = clip_action(Vec4(500, 0, 0, 0), SimConfig{});
  CHECK(r.payload.at("action")[0].get<double>() == clipped[0]);
  CHECK(s.state().arms[0] <= before.arms[0] + clipped[0] + 1e-9);
}

TEST_CASE("sequence numbers must increase") {
  Session s(SessionConfig{});
  const std::string hello = R"({"type":"hello","seq":5,"payload":{}})";
  CHECK(s.handle(hello).front().type == MessageType::State);
  CHECK(error_code(s.handle(hello).front()) == "bad_seq");
  CHECK(error_code(s.handle(R"({"type":"control","seq":4,"payload":{}})").front()) == "bad_seq");
  // outgoing seq increases too
  const auto a = s.handle(R"({"type":"control","seq":6,"payload":{"dxL":0,"dyL":0,"dxR":0,"dyR":0}})");
  const auto b = s.handle(R"({"type":"control","seq":7,"payload":{"dxL":0,"dyL":0,"dxR":0,"dyR":0}})");
  CHECK(b.front().seq > a.front().seq);
}

TEST_CASE("malformed messages are answered and the session carries on") {
  Session s(SessionConfig{});
  Client c{s};
  c.one("hello");
  CHECK(error_code(s.handle("not json").front()) == "bad_json");
  CHECK(error_code(s.handle(R"({"type":"jump","seq":100})").front()) == "unknown_type");
  c.seq = 100;
  CHECK(error_code(c.one("control", Json{{"dxL", "fast"}})) != "");
  CHECK(error_code(c.one("control", Json{{"dxL", 0}, {"dyL", 0}, {"dxR", 0}})) != "");
  CHECK(error_code(c.one("state")) == "unexpected_type");
  CHECK(error_code(c.one("mark_phase", Json{{"phase", "transport"}})) == "not_recording");
  CHECK(error_code(c.one("stop_record")) == "not_recording");
  CHECK(error_code(c.one("start_rollout")) == "no_policy");
  CHECK(error_code(c.one("start_record", Json{{"prompt_id", 69}})) == "bad_payload");
  CHECK(c.control(Vec4(1, 0, 0, 0)).type == MessageType::State);
}

TEST_CASE("a recorded teleop episode is a usable dataset") {
  const fs::path dir = fs::temp_directory_path() / "bimag_test_record";
  fs::remove_all(dir);
  SessionConfig cfg;
  cfg.record_dir = dir;
  Session s(cfg);
  Client c{s};
  c.one("hello", Json{{"task", "A"}, {"seed", 2}});
  const int prompt = prompt_bank().prompts_for(TaskId::A)[3];
  const WireMessage start = c.one("start_record", Json{{"prompt_id", prompt}});
  CHECK(start.type == MessageType::StartRecord);
  CHECK(start.payload.at("episode_id") == 0);
  CHECK(s.recording());

  const WorkspaceSpec ws = build_workspace(TaskId::A);
  int n = 0;
  while (n < 400 && !check_success(s.state(), ws).transport_done) {
    const ExpertDecision d = expert_action(s.state(), ws, SimConfig{});
    const WireMessage r = c.control(d.action);
    CHECK(r.payload.at("recording") == true);
    CHECK(r.payload.at("phase") == phase_name(d.phase));
    ++n;
  }
  const WireMessage stop = c.one("stop_record");
  REQUIRE(stop.type == MessageType::StopRecord);
  CHECK(stop.payload.at("episode_id") == 0);
  CHECK(stop.payload.at("frames") == n);
  CHECK_FALSE(s.recording());
  REQUIRE(s.recorded().size() == 1);

  const Dataset ds = load_dataset(dir);
  REQUIRE(ds.episodes.size() == 1);
  CHECK(ds.meta.source == "teleop");
  CHECK(ds.episodes[0].length() == n);
  CHECK(ds.episodes[0].prompt_id == prompt);
  CHECK(validate_episode(ds.episodes[0]).empty());
  CHECK_NOTHROW(make_sample(ds.episodes[0], kHistory - 1, ds.stats));
  TrainConfig t;
  t.steps = 3;
  t.batch = 2;
  const TrainResult r = train_loop(ds, tiny_model_config(), t);
  CHECK(r.skipped_steps == 0);
}

TEST_CASE("mark_phase overrides the automatic label") {
  Session s(SessionConfig{});
  Client c{s};
  c.one("hello");
  c.one("start_record");
  CHECK(c.control(Vec4::Zero()).payload.at("phase") == "approach");
  const WireMessage ack = c.one("mark_phase", Json{{"phase", "transport"}});
  CHECK(ack.type == MessageType::MarkPhase);
  CHECK(c.control(Vec4::Zero()).payload.at("phase") == "transport");
  c.one("mark_phase", Json{{"phase", "auto"}});
  CHECK(c.control(Vec4::Zero()).payload.at("phase") == "approach");
  CHECK(error_code(c.one("mark_phase", Json{{"phase", "sideways"}})) == "bad_payload");
}

TEST_CASE("too short recordings are rejected") {
  Session s(SessionConfig{});
  Client c{s};
  c.one("hello");
  c.one("start_record");
  for (int i = 0; i < 3; ++i) c.control(Vec4::Zero());
  const WireMessage r = c.one("stop_record");
  CHECK(error_code(r) == "invalid_episode");
  CHECK(s.recorded().empty());
  CHECK_FALSE(s.recording());
}

TEST_CASE("disconnect drops a partial recording") {
  Session s(SessionConfig{});
  Client c{s};
  c.one("hello");
  c.one("start_record");
  for (int i = 0; i < 12; ++i) c.control(Vec4::Zero());
  s.disconnect();
  CHECK_FALSE(s.recording());
  CHECK(s.recorded().empty());
  CHECK(s.mode() == SessionMode::Idle);
}

TEST_CASE("replaying a transcript gives the same replies") {
  std::vector<std::string> transcript{R"({"type":"hello","seq":1,"payload":{"task":"C","seed":8}})"};
  Rng rng = make_rng(3);
  for (int i = 0; i < 40; ++i) {
    Json p{{"dxL", uniform(rng, -6, 6)}, {"dyL", uniform(rng, -6, 6)}, {"dxR", uniform(rng, -6, 6)}, {"dyR", uniform(rng, -6, 6)}};
    transcript.push_back(Json{{"type", "control"}, {"seq", i + 2}, {"payload", p}}.dump());
  }
  auto play = [&] {
    Session s(SessionConfig{});
    std::string out;
    for (const auto& line : transcript)
      for (const auto& m : s.handle(line)) out += to_text(m) + "\n";
    return out;
  };
  CHECK(play() == play());
}

TEST_CASE("rollout streaming") {
  Policy p(ModelConfig{});
  testutil::perturb(p, 0.05, 21);
  SessionConfig cfg;
  cfg.policy = &p;
  cfg.stats = &testutil::tiny_dataset().stats;
  Session s(cfg);
  Client c{s};
  CHECK(c.one("hello").payload.at("rollout_available") == true);
  CHECK(s.tick().empty());
  const WireMessage start = c.one("start_rollout", Json{{"task", "A"}, {"seed", 4}, {"max_steps", 12}});
  REQUIRE(start.type == MessageType::StartRollout);
  CHECK(start.payload.contains("workspace"));
  CHECK(s.mode() == SessionMode::Rollout);
  CHECK(error_code(c.control(Vec4::Zero())) == "busy");

  // same steps as a direct rollout
  RolloutConfig rc;
  rc.max_steps = 12;
  PolicyController ctl(p, *cfg.stats, rc);
  const RolloutResult ref = run_rollout(ctl, TaskId::A, prompt_bank().prompts_for(TaskId::A).front(), 4, SimConfig{}, rc);

  int states = 0;
  bool finished = false;
  for (int i = 0; i < 20 && !finished; ++i) {
    for (const auto& m : s.tick()) {
      if (m.type == MessageType::State) {
        const auto& step = ref.steps[static_cast<size_t>(states)];
        CHECK(m.payload.at("mode") == "rollout");
        CHECK(m.payload.at("t") == step.t);
        CHECK(m.payload.at("action") == to_json(step.action));
        CHECK(m.payload.contains("chunk") == step.pushed.has_value());
        ++states;
      } else {
        CHECK(m.type == MessageType::Stop);
        CHECK(m.payload.at("finished") == true);
        CHECK(m.payload.at("steps") == 12);
        finished = true;
      }
    }
  }
  CHECK(finished);
  CHECK(states == 12);
  CHECK(s.mode() == SessionMode::Teleop);

  c.one("start_rollout", Json{{"max_steps", 50}});
  s.tick();
  const WireMessage stop = c.one("stop");
  CHECK(stop.type == MessageType::Stop);
  CHECK(stop.payload.at("finished") == false);
  CHECK(s.mode() == SessionMode::Teleop);
  CHECK(s.tick().empty());
}
