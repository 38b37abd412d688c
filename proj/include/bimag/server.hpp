#pragma once

// Websocket front end for bimag::Session: one session per connection, JSON
// text frames, rollout steps pushed every tick_ms.

#include "bimag/session.hpp"

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

namespace bimag {

struct ServeOptions {
  std::string address = "127.0.0.1";
  std::uint16_t port = 8765;  // 0 picks a free port
  int tick_ms = 100;
  SimConfig sim;
  RolloutConfig rollout;
  // each connection records into <record_root>/session_NNNN
  std::optional<std::filesystem::path> record_root;
  std::optional<std::filesystem::path> checkpoint;
};

class SessionServer {
 public:
  explicit SessionServer(ServeOptions opts);
  ~SessionServer();
  SessionServer(const SessionServer&) = delete;
  SessionServer& operator=(const SessionServer&) = delete;

  // Binds and listens; returns the bound port.
  std::uint16_t listen();
  // Blocks until stop() is called.
  void run();
  // Thread-safe.
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace bimag
