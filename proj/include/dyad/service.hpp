#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dyad/wire.hpp"

namespace dyad::service {

/// WebSocket framing (RFC 6455), text and control frames only.
namespace ws {
/// Base64 of SHA-1(key + the RFC 6455 GUID).
std::string accept_key(const std::string& client_key);

enum class Opcode : std::uint8_t { kContinuation = 0, kText = 1, kBinary = 2, kClose = 8, kPing = 9, kPong = 10 };

/// One frame with FIN set; masked when `mask` is given (client side).
std::string encode_frame(std::string_view payload, Opcode op, std::optional<std::uint32_t> mask = std::nullopt);

struct Frame {
  Opcode op = Opcode::kText;
  bool fin = true;
  std::string payload;
};

/// Incremental decoder; feed bytes, pop complete frames. Throws Error
/// ("malformed") on frames exceeding `max_payload`.
class FrameParser {
 public:
  explicit FrameParser(std::size_t max_payload = 1 << 24) : max_(max_payload) {}
  void feed(std::string_view bytes) { buf_.append(bytes); }
  std::optional<Frame> next();

 private:
  std::string buf_;
  std::size_t max_;
};
}  // namespace ws

struct ServerOptions {
  std::string host = "127.0.0.1";
  /// 0 picks a free port (see Server::port()).
  std::uint16_t port = 8765;
  std::uint64_t seed = 0;
  std::size_t steps = 4;
  double cfg_scale = -1.0;
  double heartbeat_seconds = 10.0;
  double stats_seconds = 1.0;
  std::size_t max_sessions = 8;
  /// Called with every line received and sent, prefixed by session id and
  /// direction; used for audit logs.
  std::function<void(const std::string& session, char direction, const std::string& line)> on_message;
};

/// Serves the wire protocol on one TCP port. A connection whose first line is
/// an HTTP upgrade request speaks WebSocket text frames; any other connection
/// speaks newline-delimited JSON. One thread and one stream per session.
class Server {
 public:
  Server(std::shared_ptr<const ModelBundle> model, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts accepting in a background thread.
  void start();
  /// Blocks until stop() is called.
  void wait();
  void stop();
  std::uint16_t port() const { return port_; }
  std::size_t sessions_started() const { return started_.load(); }

 private:
  void accept_loop();
  void serve(int fd, std::string session_id);

  std::shared_ptr<const ModelBundle> model_;
  ServerOptions options_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::atomic<std::size_t> active_{0}, started_{0};
  std::thread acceptor_;
  std::mutex mu_;
  std::vector<std::thread> workers_;
  std::vector<int> open_fds_;
};

/// Blocking newline-JSON client, used by tests and the bench tooling.
class LineClient {
 public:
  LineClient(const std::string& host, std::uint16_t port);
  ~LineClient();
  LineClient(const LineClient&) = delete;
  LineClient& operator=(const LineClient&) = delete;

  void send(const nlohmann::json& message);
  void send_raw(const std::string& line);
  /// Next message, or nullopt on timeout or when the server closed.
  std::optional<nlohmann::json> receive(double timeout_seconds = 5.0);

 private:
  int fd_ = -1;
  std::string buf_;
};

}  // namespace dyad::service
