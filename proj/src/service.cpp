#include "vop/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "httplib.h"

namespace vop {

nlohmann::ordered_json to_json(const Frame& f) {
  return {{"tick", f.tick},
          {"s", {f.s.x, f.s.theta, f.s.x_dot, f.s.theta_dot}},
          {"a", f.a},
          {"r", f.r},
          {"omega", {f.omega.omega_x, f.omega.omega_theta}}};
}

nlohmann::ordered_json to_json(const SessionState& s) {
  return {{"tick", s.tick},
          {"s", {s.state.x, s.state.theta, s.state.x_dot, s.state.theta_dot}},
          {"omega", {s.objective.omega_x, s.objective.omega_theta}},
          {"running", s.running},
          {"policy", s.policy_id}};
}

// ---------------------------------------------------------------------------

SteerSession::SteerSession(PolicyModel policy, PhysicsParams params, std::string policy_id,
                           EnvState start, Objective objective)
    : policy_(std::move(policy)), params_(params), start_(start) {
  params_.validate();
  if (!start.finite() || std::abs(start.x) > kXLimit) {
    throw std::invalid_argument("session start state outside the track");
  }
  if (!policy_.box().contains(objective)) {
    throw std::invalid_argument("session objective outside the training box");
  }
  start_.theta = wrap_angle(start.theta);
  state_.state = start_;
  state_.objective = objective;
  state_.policy_id = std::move(policy_id);
  pending_objective_ = objective;
}

void SteerSession::request_objective(std::optional<double> omega_x,
                                     std::optional<double> omega_theta) {
  std::lock_guard lock(mutex_);
  Objective next = pending_objective_;
  if (omega_x) next.omega_x = *omega_x;
  if (omega_theta) next.omega_theta = *omega_theta;
  if (!std::isfinite(next.omega_x) || !std::isfinite(next.omega_theta) ||
      !policy_.box().contains(next)) {
    const auto& b = policy_.box();
    throw std::invalid_argument(
        "objective outside the training box: omega_x in [" + std::to_string(b.x_lo) + ", " +
        std::to_string(b.x_hi) + "], omega_theta in [" + std::to_string(b.theta_lo) + ", " +
        std::to_string(b.theta_hi) + "]");
  }
  pending_objective_ = next;
  queue_.push_back(Command{Command::Kind::objective, next, {}});
}

void SteerSession::request_reset(std::optional<double> x, std::optional<double> theta) {
  EnvState s{x.value_or(start_.x), theta.value_or(start_.theta), 0.0, 0.0};
  if (!std::isfinite(s.x) || std::abs(s.x) > kXLimit) {
    throw std::invalid_argument("reset x must be within [-2.5, 2.5]");
  }
  if (!std::isfinite(s.theta)) throw std::invalid_argument("reset theta must be finite");
  s.theta = wrap_angle(s.theta);
  std::lock_guard lock(mutex_);
  queue_.push_back(Command{Command::Kind::reset, {}, s});
}

void SteerSession::set_running(bool running) {
  std::lock_guard lock(mutex_);
  state_.running = running;
}

Frame SteerSession::tick() {
  std::lock_guard lock(mutex_);
  for (const auto& c : queue_) {
    if (c.kind == Command::Kind::objective) {
      state_.objective = c.objective;
    } else {
      state_.state = c.state;
    }
  }
  queue_.clear();

  Frame f;
  f.omega = state_.objective;
  f.a = std::clamp(policy_.act(state_.state, f.omega), -kActionLimit, kActionLimit);
  f.s = env_step(state_.state, f.a, params_);
  f.r = reward(f.s, f.omega);
  state_.state = f.s;
  f.tick = ++state_.tick;
  return f;
}

SessionState SteerSession::snapshot() const {
  std::lock_guard lock(mutex_);
  return state_;
}

// ---------------------------------------------------------------------------

void FrameBroadcaster::publish(const Frame& f) {
  {
    std::lock_guard lock(mutex_);
    frames_.push_back(f);
    if (frames_.size() > capacity_) {
      frames_.pop_front();
      ++first_seq_;
    }
  }
  cv_.notify_all();
}

std::uint64_t FrameBroadcaster::next_sequence() const {
  std::lock_guard lock(mutex_);
  return first_seq_ + frames_.size();
}

std::vector<Frame> FrameBroadcaster::wait_from(std::uint64_t& seq, int timeout_ms) {
  std::unique_lock lock(mutex_);
  cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms),
               [&] { return closed_ || first_seq_ + frames_.size() > seq; });
  std::vector<Frame> out;
  if (closed_) return out;
  seq = std::max(seq, first_seq_);
  for (std::uint64_t i = seq; i < first_seq_ + frames_.size(); ++i) {
    out.push_back(frames_[static_cast<std::size_t>(i - first_seq_)]);
  }
  seq = first_seq_ + frames_.size();
  return out;
}

void FrameBroadcaster::close() {
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  cv_.notify_all();
}

bool FrameBroadcaster::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

// ---------------------------------------------------------------------------

namespace {

using json = nlohmann::json;

void reply(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void bad_request(httplib::Response& res, const std::string& message) {
  reply(res, 400, {{"error", message}});
}

// Parses an optional JSON object body with only the allowed numeric keys.
json parse_body(const httplib::Request& req, std::initializer_list<const char*> allowed) {
  if (req.body.empty()) return json::object();
  json doc = json::parse(req.body);
  if (!doc.is_object()) throw std::invalid_argument("request body must be a JSON object");
  for (const auto& item : doc.items()) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || item.key() == k;
    if (!ok) throw std::invalid_argument("unknown field '" + item.key() + "'");
  }
  return doc;
}

std::optional<double> number_field(const json& doc, const char* key) {
  const auto it = doc.find(key);
  if (it == doc.end()) return std::nullopt;
  if (!it->is_number()) throw std::invalid_argument(std::string("field '") + key + "' must be a number");
  return it->get<double>();
}

}  // namespace

struct SteerService::Impl {
  httplib::Server server;
};

SteerService::SteerService(std::shared_ptr<SteerSession> session, ServiceOptions options)
    : impl_(std::make_unique<Impl>()), session_(std::move(session)), options_(std::move(options)) {
  if (!session_) throw std::invalid_argument("SteerService needs a session");
  if (!(options_.tick_hz >= 0.0) || options_.tick_hz > 1000.0) {
    throw std::invalid_argument("tick_hz must be in [0, 1000]");
  }
  auto& srv = impl_->server;
  // Address reuse only, so a second server on a taken port fails to bind.
  srv.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });

  // Handlers report bad input as 400 with a message.
  auto guarded = [](auto fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const json::exception& e) {
        bad_request(res, std::string("malformed JSON: ") + e.what());
      } catch (const std::invalid_argument& e) {
        bad_request(res, e.what());
      }
    };
  };

  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    reply(res, 200, {{"status", "ok"}});
  });
  srv.Get("/session", [this](const httplib::Request&, httplib::Response& res) {
    reply(res, 200, to_json(session_->snapshot()));
  });
  srv.Post("/objective", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req, {"omega_x", "omega_theta"});
    session_->request_objective(number_field(body, "omega_x"), number_field(body, "omega_theta"));
    reply(res, 200, {{"accepted", true}});
  }));
  srv.Post("/reset", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req, {"x", "theta"});
    session_->request_reset(number_field(body, "x"), number_field(body, "theta"));
    reply(res, 200, {{"accepted", true}});
  }));
  srv.Post("/pause", [this](const httplib::Request&, httplib::Response& res) {
    session_->set_running(false);
    reply(res, 200, {{"running", false}});
  });
  srv.Post("/resume", [this](const httplib::Request&, httplib::Response& res) {
    session_->set_running(true);
    reply(res, 200, {{"running", true}});
  });
  srv.Post("/step", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req, {"n"});
    int n = 1;
    if (body.contains("n")) {
      if (!body["n"].is_number_integer()) throw std::invalid_argument("field 'n' must be an integer");
      n = body["n"].get<int>();
    }
    if (n < 1 || n > 100000) throw std::invalid_argument("field 'n' must be in [1, 100000]");
    auto frames = nlohmann::ordered_json::array();
    for (const auto& f : step(n)) frames.push_back(to_json(f));
    reply(res, 200, {{"frames", frames}});
  }));
  srv.Get("/stream", [this](const httplib::Request& req, httplib::Response& res) {
    long long limit = -1;
    if (req.has_param("max")) {
      try {
        limit = std::stoll(req.get_param_value("max"));
      } catch (const std::exception&) {
        bad_request(res, "query parameter 'max' must be an integer");
        return;
      }
    }
    auto seq = std::make_shared<std::uint64_t>(frames_.next_sequence());
    auto sent = std::make_shared<long long>(0);
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream", [this, seq, sent, limit](std::size_t, httplib::DataSink& sink) {
          if (stopping_) return false;
          for (const auto& f : frames_.wait_from(*seq, 200)) {
            const std::string msg = "data: " + to_json(f).dump() + "\n\n";
            if (!sink.write(msg.data(), msg.size())) return false;
            if (limit >= 0 && ++*sent >= limit) {
              sink.done();
              return true;
            }
          }
          if (frames_.closed()) {
            sink.done();
          }
          return true;
        });
  });
}

SteerService::~SteerService() { stop(); }

void SteerService::start() {
  auto& srv = impl_->server;
  if (options_.port == 0) {
    bound_port_ = srv.bind_to_any_port(options_.host);
    if (bound_port_ <= 0) throw std::runtime_error("cannot bind " + options_.host);
  } else {
    if (!srv.bind_to_port(options_.host, options_.port)) {
      throw std::runtime_error("cannot bind " + options_.host + ":" +
                               std::to_string(options_.port) + " (port busy?)");
    }
    bound_port_ = options_.port;
  }
  server_thread_ = std::thread([&srv] { srv.listen_after_bind(); });
  if (options_.tick_hz > 0.0) tick_thread_ = std::thread([this] { tick_loop(); });
  srv.wait_until_ready();
}

void SteerService::stop() {
  if (stopping_.exchange(true)) return;
  frames_.close();
  impl_->server.stop();
  if (tick_thread_.joinable()) tick_thread_.join();
  if (server_thread_.joinable()) server_thread_.join();
}

std::vector<Frame> SteerService::step(int n) {
  std::lock_guard lock(tick_mutex_);
  std::vector<Frame> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    out.push_back(session_->tick());
    frames_.publish(out.back());
  }
  return out;
}

void SteerService::tick_loop() {
  using clock = std::chrono::steady_clock;
  const auto period = std::chrono::duration_cast<clock::duration>(
      std::chrono::duration<double>(1.0 / options_.tick_hz));
  auto next = clock::now() + period;
  while (!stopping_) {
    std::this_thread::sleep_until(next);
    next += period;
    // After a stall, skip missed ticks rather than bursting to catch up.
    if (clock::now() > next + period) next = clock::now() + period;
    if (stopping_) break;
    if (!session_->snapshot().running) continue;
    std::lock_guard lock(tick_mutex_);
    frames_.publish(session_->tick());
  }
}

}  // namespace vop
