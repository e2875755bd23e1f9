#include "dyad/service.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/evp.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "dyad/errors.hpp"

namespace dyad::service {

namespace ws {

std::string accept_key(const std::string& client_key) {
  const std::string src = client_key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(src.data(), src.size(), digest, &len, EVP_sha1(), nullptr) != 1) throw Error("internal", "SHA-1 failed");
  std::string out(4 * ((len + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), digest, static_cast<int>(len));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string encode_frame(std::string_view payload, Opcode op, std::optional<std::uint32_t> mask) {
  std::string f;
  f.push_back(static_cast<char>(0x80 | static_cast<std::uint8_t>(op)));
  const std::uint8_t mbit = mask ? 0x80 : 0x00;
  const std::size_t n = payload.size();
  if (n < 126) {
    f.push_back(static_cast<char>(mbit | n));
  } else if (n <= 0xFFFF) {
    f.push_back(static_cast<char>(mbit | 126));
    f.push_back(static_cast<char>(n >> 8));
    f.push_back(static_cast<char>(n & 0xFF));
  } else {
    f.push_back(static_cast<char>(mbit | 127));
    for (int i = 7; i >= 0; --i) f.push_back(static_cast<char>((static_cast<std::uint64_t>(n) >> (8 * i)) & 0xFF));
  }
  if (!mask) {
    f.append(payload);
    return f;
  }
  const std::uint8_t key[4] = {static_cast<std::uint8_t>(*mask >> 24), static_cast<std::uint8_t>(*mask >> 16),
                               static_cast<std::uint8_t>(*mask >> 8), static_cast<std::uint8_t>(*mask)};
  for (auto k : key) f.push_back(static_cast<char>(k));
  for (std::size_t i = 0; i < n; ++i) f.push_back(static_cast<char>(payload[i] ^ key[i % 4]));
  return f;
}

std::optional<Frame> FrameParser::next() {
  if (buf_.size() < 2) return std::nullopt;
  const auto b = [&](std::size_t i) { return static_cast<std::uint8_t>(buf_[i]); };
  Frame fr;
  fr.fin = b(0) & 0x80;
  fr.op = static_cast<Opcode>(b(0) & 0x0F);
  const bool masked = b(1) & 0x80;
  std::uint64_t n = b(1) & 0x7F;
  std::size_t pos = 2;
  if (n == 126) {
    if (buf_.size() < 4) return std::nullopt;
    n = (static_cast<std::uint64_t>(b(2)) << 8) | b(3);
    pos = 4;
  } else if (n == 127) {
    if (buf_.size() < 10) return std::nullopt;
    n = 0;
    for (std::size_t i = 0; i < 8; ++i) n = (n << 8) | b(2 + i);
    pos = 10;
  }
  if (n > max_) throw Error(wire::code::kMalformed, "websocket frame too large");
  std::uint8_t key[4] = {0, 0, 0, 0};
  if (masked) {
    if (buf_.size() < pos + 4) return std::nullopt;
    for (std::size_t i = 0; i < 4; ++i) key[i] = b(pos + i);
    pos += 4;
  }
  if (buf_.size() < pos + n) return std::nullopt;
  fr.payload = buf_.substr(pos, n);
  if (masked)
    for (std::size_t i = 0; i < n; ++i) fr.payload[i] = static_cast<char>(fr.payload[i] ^ key[i % 4]);
  buf_.erase(0, pos + n);
  return fr;
}

}  // namespace ws

namespace {

bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

std::string header_value(const std::string& request, const std::string& name) {
  std::string lower = request;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  std::string key = name;
  std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
  const auto p = lower.find("\r\n" + key + ":");
  if (p == std::string::npos) return {};
  auto s = p + key.size() + 3;
  const auto e = request.find("\r\n", s);
  while (s < e && request[s] == ' ') ++s;
  return request.substr(s, e - s);
}

}  // namespace

Server::Server(std::shared_ptr<const ModelBundle> model, ServerOptions options)
    : model_(std::move(model)), options_(std::move(options)) {
  if (!model_ || !model_->flow) throw DependencyError("server needs a model with a flow generator");
}

Server::~Server() { stop(); }

void Server::start() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw IoError("socket: " + std::string(std::strerror(errno)));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(options_.port);
  if (::inet_pton(AF_INET, options_.host.c_str(), &addr.sin_addr) != 1)
    throw ConfigError("serve.host must be an IPv4 address, got " + options_.host);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 16) < 0) {
    const std::string err = std::strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw IoError("cannot listen on " + options_.host + ":" + std::to_string(options_.port) + ": " + err);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void Server::wait() {
  if (acceptor_.joinable()) acceptor_.join();
}

void Server::stop() {
  if (!running_.exchange(false)) {
    wait();
    return;
  }
  if (listen_fd_ >= 0) ::shutdown(listen_fd_, SHUT_RDWR);
  {
    std::lock_guard lock(mu_);
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  wait();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(mu_);
    workers.swap(workers_);
  }
  for (auto& w : workers) w.join();
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
}

void Server::accept_loop() {
  std::size_t counter = 0;
  while (running_) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, 200);
    if (r <= 0 || !running_) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lock(mu_);
    open_fds_.push_back(fd);
    workers_.emplace_back([this, fd, id = "s" + std::to_string(++counter)] { serve(fd, id); });
  }
}

void Server::serve(int fd, std::string session_id) {
  using Clock = std::chrono::steady_clock;
  bool websocket = false, handshake_done = false;
  std::string buf;
  ws::FrameParser parser;

  auto emit = [&](const nlohmann::json& msg) {
    const std::string line = wire::encode(msg);
    if (options_.on_message) options_.on_message(session_id, '>', line);
    return websocket ? send_all(fd, ws::encode_frame(line, ws::Opcode::kText)) : send_all(fd, line + "\n");
  };

  const bool admitted = active_.fetch_add(1) < options_.max_sessions;
  std::unique_ptr<wire::Session> session;
  if (admitted) {
    wire::SessionOptions so;
    so.server_seed = options_.seed;
    so.id = session_id;
    so.steps = options_.steps;
    so.cfg_scale = options_.cfg_scale;
    so.stats_seconds = options_.stats_seconds;
    session = std::make_unique<wire::Session>(model_, so);
    ++started_;
  }

  auto last_rx = Clock::now();
  bool open = true;
  auto handle_line = [&](const std::string& line) {
    if (line.empty()) return;
    if (options_.on_message) options_.on_message(session_id, '<', line);
    if (!session) {
      emit(wire::error_message(wire::code::kBusy, "server is at its session limit"));
      open = false;
      return;
    }
    const auto reply = session->handle(line);
    for (const auto& m : reply.messages)
      if (!emit(m)) open = false;
    if (reply.close) open = false;
  };

  char chunk[65536];
  while (open && running_) {
    const double idle = std::chrono::duration<double>(Clock::now() - last_rx).count();
    if (idle > options_.heartbeat_seconds) {
      emit(wire::error_message(wire::code::kHeartbeat, "no message for " + std::to_string(options_.heartbeat_seconds) + " s"));
      break;
    }
    const int wait_ms = static_cast<int>(std::clamp(std::min(options_.heartbeat_seconds - idle, options_.stats_seconds) * 1000.0, 1.0, 200.0));
    pollfd p{fd, POLLIN, 0};
    const int r = ::poll(&p, 1, wait_ms);
    if (r > 0) {
      const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
      if (n <= 0) break;
      last_rx = Clock::now();
      if (!handshake_done) {
        buf.append(chunk, static_cast<std::size_t>(n));
        if (buf.size() >= 4 && buf.compare(0, 4, "GET ") == 0) {
          const auto end = buf.find("\r\n\r\n");
          if (end == std::string::npos) continue;
          const std::string request = buf.substr(0, end + 2);
          const std::string key = header_value(request, "Sec-WebSocket-Key");
          if (key.empty()) {
            send_all(fd, "HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\n\r\n");
            break;
          }
          send_all(fd, "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                       "Sec-WebSocket-Accept: " + ws::accept_key(key) + "\r\n\r\n");
          websocket = true;
          parser.feed(std::string_view(buf).substr(end + 4));
          buf.clear();
        } else if (buf.size() < 4 && std::string_view("GET ").starts_with(buf)) {
          continue;
        }
        handshake_done = true;
      } else if (websocket) {
        parser.feed(std::string_view(chunk, static_cast<std::size_t>(n)));
      } else {
        buf.append(chunk, static_cast<std::size_t>(n));
      }
      try {
        if (websocket) {
          while (open) {
            auto f = parser.next();
            if (!f) break;
            if (f->op == ws::Opcode::kClose) {
              send_all(fd, ws::encode_frame(f->payload.substr(0, 2), ws::Opcode::kClose));
              open = false;
            } else if (f->op == ws::Opcode::kPing) {
              send_all(fd, ws::encode_frame(f->payload, ws::Opcode::kPong));
            } else if (f->op == ws::Opcode::kText) {
              handle_line(f->payload);
            } else if (f->op != ws::Opcode::kPong) {
              emit(wire::error_message(wire::code::kMalformed, "only text frames are accepted"));
            }
          }
        } else {
          std::size_t nl;
          while (open && (nl = buf.find('\n')) != std::string::npos) {
            std::string line = buf.substr(0, nl);
            buf.erase(0, nl + 1);
            if (!line.empty() && line.back() == '\r') line.pop_back();
            handle_line(line);
          }
        }
      } catch (const Error& e) {
        emit(wire::error_message(e.code(), e.what()));
        open = false;
      }
    } else if (r < 0 && errno != EINTR) {
      break;
    }
    if (session && open)
      if (auto stats = session->poll_stats()) open = emit(*stats);
  }
  {
    std::lock_guard lock(mu_);
    open_fds_.erase(std::remove(open_fds_.begin(), open_fds_.end(), fd), open_fds_.end());
  }
  ::close(fd);
  active_.fetch_sub(1);
}

LineClient::LineClient(const std::string& host, std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
  if (fd_ < 0 || ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
    if (fd_ >= 0) ::close(fd_);
    throw IoError("cannot connect to " + host + ":" + std::to_string(port));
  }
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

LineClient::~LineClient() {
  if (fd_ >= 0) ::close(fd_);
}

void LineClient::send(const nlohmann::json& message) { send_raw(wire::encode(message)); }

void LineClient::send_raw(const std::string& line) {
  if (!send_all(fd_, line + "\n")) throw IoError("connection closed");
}

std::optional<nlohmann::json> LineClient::receive(double timeout_seconds) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
  char chunk[65536];
  while (true) {
    const auto nl = buf_.find('\n');
    if (nl != std::string::npos) {
      const auto line = buf_.substr(0, nl);
      buf_.erase(0, nl + 1);
      return nlohmann::json::parse(line);
    }
    const auto left = std::chrono::duration<double>(deadline - std::chrono::steady_clock::now()).count();
    if (left <= 0) return std::nullopt;
    pollfd p{fd_, POLLIN, 0};
    if (::poll(&p, 1, static_cast<int>(left * 1000) + 1) <= 0) continue;
    const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n <= 0) return std::nullopt;
    buf_.append(chunk, static_cast<std::size_t>(n));
  }
}

}  // namespace dyad::service
