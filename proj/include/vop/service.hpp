#pragma once

// Live steering: a closed-loop simulation under a trained policy, advanced at
// a fixed tick rate, with objective updates applied at tick boundaries and
// frames pushed to any number of stream subscribers.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "vop/cartpole.hpp"
#include "vop/policy.hpp"

namespace vop {

struct Frame {
  std::uint64_t tick = 0;
  EnvState s;      // state after the step
  double a = 0.0;  // applied action
  double r = 0.0;  // reward of the successor state
  Objective omega;
};

nlohmann::ordered_json to_json(const Frame& f);

struct SessionState {
  EnvState state;
  Objective objective;
  std::uint64_t tick = 0;
  bool running = true;
  std::string policy_id;
};

nlohmann::ordered_json to_json(const SessionState& s);

/// Authoritative session. Requests enqueue commands; tick() drains the queue
/// and then advances the simulation by one env_step. All members are safe to
/// call from any thread.
class SteerSession {
 public:
  SteerSession(PolicyModel policy, PhysicsParams params, std::string policy_id,
               EnvState start = {0.0, -kPi, 0.0, 0.0}, Objective objective = {0.0, 1.0});

  /// Throws std::invalid_argument if the resulting objective leaves the box.
  void request_objective(std::optional<double> omega_x, std::optional<double> omega_theta);
  /// Missing coordinates fall back to the configured start; velocities reset
  /// to zero. Throws std::invalid_argument for x outside the track.
  void request_reset(std::optional<double> x, std::optional<double> theta);
  void set_running(bool running);

  /// One tick: applies queued commands in arrival order, then steps.
  Frame tick();
  SessionState snapshot() const;
  const ObjectiveBox& box() const { return policy_.box(); }

 private:
  struct Command {
    enum class Kind { objective, reset } kind;
    Objective objective;
    EnvState state;
  };

  PolicyModel policy_;
  PhysicsParams params_;
  EnvState start_;
  mutable std::mutex mutex_;
  SessionState state_;
  // The most recent accepted objective, including queued ones, so partial
  // updates compose in arrival order.
  Objective pending_objective_;
  std::vector<Command> queue_;
};

/// Fan-out of frames to stream subscribers. Every subscriber sees the same
/// ordered sequence from the point it subscribed.
class FrameBroadcaster {
 public:
  explicit FrameBroadcaster(std::size_t capacity = 4096) : capacity_(capacity) {}

  void publish(const Frame& f);
  /// Sequence number the next published frame will get.
  std::uint64_t next_sequence() const;
  /// Waits up to `timeout_ms` for frames at or after `seq`. Returns them and
  /// advances `seq`; empty on timeout or after close().
  std::vector<Frame> wait_from(std::uint64_t& seq, int timeout_ms);
  void close();
  bool closed() const;

 private:
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Frame> frames_;
  std::uint64_t first_seq_ = 0;
  std::size_t capacity_;
  bool closed_ = false;
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  /// 0 picks a free port.
  int port = 8080;
  /// Automatic ticks per second; 0 disables the clock (ticks only via POST /step).
  double tick_hz = 50.0;
};

class SteerService {
 public:
  SteerService(std::shared_ptr<SteerSession> session, ServiceOptions options);
  ~SteerService();
  SteerService(const SteerService&) = delete;
  SteerService& operator=(const SteerService&) = delete;

  /// Binds and starts serving; throws std::runtime_error if the port is busy.
  void start();
  void stop();
  int port() const { return bound_port_; }

  /// Advances n ticks synchronously and publishes their frames.
  std::vector<Frame> step(int n);

 private:
  void tick_loop();

  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::shared_ptr<SteerSession> session_;
  ServiceOptions options_;
  FrameBroadcaster frames_;
  std::mutex tick_mutex_;
  std::atomic<bool> stopping_{false};
  std::thread server_thread_;
  std::thread tick_thread_;
  int bound_port_ = 0;
};

}  // namespace vop
