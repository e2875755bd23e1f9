#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <thread>

#include "doctest.h"

#include "dyad/errors.hpp"
#include "dyad/service.hpp"
#include "fixtures.hpp"

using namespace dyad;
using namespace dyad::wire;
using dyad::geom::Vec2;
using dyad::testing::random_bundle;
using dyad::testing::tiny_bundle;
using nlohmann::json;

namespace {

std::string frame_line(const flow::ConditioningBundle& b, std::size_t f, std::int64_t t,
                       std::optional<double> gaze = std::nullopt) {
  return encode(user_frame_message(t, Vec2(b.user_pos(f, 0), b.user_pos(f, 1)),
                                   std::span<const float>(b.audio_agent.row(f), 3),
                                   std::span<const float>(b.audio_user.row(f), 3), gaze));
}

Session ready_session(std::shared_ptr<const ModelBundle> m, const std::string& id = "a") {
  SessionOptions o;
  o.server_seed = 9;
  o.id = id;
  Session s(std::move(m), o);
  const auto r = s.handle(encode(init_message()));
  REQUIRE(r.messages.size() == 1);
  REQUIRE(r.messages[0]["type"] == "ready");
  return s;
}

std::vector<json> chunks_of(Session& s, const flow::ConditioningBundle& b, std::size_t frames) {
  std::vector<json> out;
  for (std::size_t f = 0; f < frames; ++f)
    for (auto& m : s.handle(frame_line(b, f, static_cast<std::int64_t>(f))).messages) out.push_back(m);
  return out;
}

}  // namespace

TEST_CASE("message parsing") {
  CHECK(std::holds_alternative<Init>(parse_client(R"({"type":"init","version":1})", 3)));
  const auto f = std::get<UserFrame>(
      parse_client(R"({"type":"user_frame","t":5,"p":[1,2],"a":[0,0,1],"b":[1,1,1],"gaze":0.5})", 3));
  CHECK(f.t == 5);
  CHECK(f.p.y() == 2.0);
  CHECK(*f.gaze == 0.5);
  CHECK_FALSE(std::get<UserFrame>(parse_client(R"({"type":"user_frame","t":5,"p":[1,2],"a":[0,0,1],"b":[1,1,1]})", 3)).gaze);
  CHECK_FALSE(std::get<SetGaze>(parse_client(R"({"type":"set_gaze","g":null})", 3)).g);
  CHECK(std::holds_alternative<Reset>(parse_client(R"({"type":"reset"})", 3)));

  auto code_of = [](const std::string& line) {
    try {
      parse_client(line, 3);
    } catch (const Error& e) {
      return e.code();
    }
    return std::string("ok");
  };
  CHECK(code_of("not json") == code::kMalformed);
  CHECK(code_of("[1,2]") == code::kMalformed);
  CHECK(code_of(R"({"t":1})") == code::kMalformed);
  CHECK(code_of(R"({"type":"dance"})") == code::kUnknownType);
  CHECK(code_of(R"({"type":"user_frame","t":1.5,"p":[1,2],"a":[0,0,1],"b":[1,1,1]})") == code::kMalformed);
  CHECK(code_of(R"({"type":"user_frame","t":1,"p":[1],"a":[0,0,1],"b":[1,1,1]})") == code::kMalformed);
  CHECK(code_of(R"({"type":"user_frame","t":1,"p":[1,2],"a":[0,0],"b":[1,1,1]})") == code::kMalformed);
  CHECK(code_of(R"({"type":"user_frame","t":1,"p":[1,"x"],"a":[0,0,1],"b":[1,1,1]})") == code::kMalformed);
  CHECK(code_of(R"({"type":"user_frame","t":1,"p":[1,2],"a":[0,0,1],"b":[1,1,1],"gaze":2})") == code::kMalformed);
  CHECK(code_of(R"({"type":"set_gaze"})") == code::kMalformed);
  CHECK(code_of(R"({"type":"init"})") == code::kMalformed);

  // Round trip of the client helpers.
  const float a[3] = {1, 2, 3};
  const auto line = encode(user_frame_message(3, Vec2(0.5, -1), a, a, 0.25));
  CHECK(line.find('\n') == std::string::npos);
  CHECK(std::get<UserFrame>(parse_client(line, 3)).a[2] == 3.0f);
}

TEST_CASE("session protocol") {
  std::shared_ptr<const ModelBundle> model = tiny_bundle();
  const auto b = random_bundle(40, 2);

  SUBCASE("frames before init are refused") {
    SessionOptions o;
    Session s(model, o);
    const auto r = s.handle(frame_line(b, 0, 0));
    CHECK(r.messages.at(0)["code"] == code::kNotInitialized);
    CHECK_FALSE(r.close);
  }
  SUBCASE("version mismatch closes the session") {
    SessionOptions o;
    Session s(model, o);
    const auto r = s.handle(encode(init_message(2)));
    CHECK(r.messages.at(0)["code"] == code::kVersion);
    CHECK(r.close);
  }
  SUBCASE("ready describes the stream") {
    SessionOptions o;
    o.id = "x7";
    Session s(model, o);
    const auto m = s.handle(encode(init_message())).messages.at(0);
    CHECK(m["s"] == 4);
    CHECK(m["session"] == "x7");
    CHECK(m["skeleton"]["frame_dim"] == 216);
    CHECK(m["skeleton"]["joints"].size() == 6);
  }
  SUBCASE("four frames give one chunk of four frames") {
    auto s = ready_session(model);
    for (std::size_t f = 0; f < 3; ++f) CHECK(s.handle(frame_line(b, f, 10 + f)).messages.empty());
    const auto r = s.handle(frame_line(b, 3, 13));
    REQUIRE(r.messages.size() == 1);
    CHECK(r.messages[0]["type"] == "pose_chunk");
    CHECK(r.messages[0]["t0"] == 10);
    CHECK(r.messages[0]["n"] == 4);
    CHECK(r.messages[0]["frames"].size() == 4 * 216);
  }
  SUBCASE("non-monotonic timestamps are rejected without losing the session") {
    auto s = ready_session(model);
    s.handle(frame_line(b, 0, 5));
    auto r = s.handle(frame_line(b, 1, 5));
    CHECK(r.messages.at(0)["code"] == code::kNonmonotonic);
    r = s.handle(frame_line(b, 1, 4));
    CHECK(r.messages.at(0)["code"] == code::kNonmonotonic);
    CHECK(s.handle("garbage").messages.at(0)["code"] == code::kMalformed);
    CHECK(s.handle(R"({"type":"wave"})").messages.at(0)["code"] == code::kUnknownType);
    for (std::size_t f = 1; f < 4; ++f) s.handle(frame_line(b, f, 5 + f));
    // The chunk arrived with the fourth accepted frame.
  }
  SUBCASE("stream output matches offline generation with the session seed") {
    auto s = ready_session(model, "abc");
    const auto msgs = chunks_of(s, b, 40);
    REQUIRE(msgs.size() == 10);
    stream::StreamOptions so;
    so.seed = session_seed(9, "abc");
    const auto off = stream::run_offline(model, b, so);
    for (std::size_t n = 0; n < msgs.size(); ++n) {
      CHECK(msgs[n]["t0"] == 4 * n);
      const auto frames = msgs[n]["frames"].get<std::vector<float>>();
      for (std::size_t i = 0; i < frames.size(); ++i) CHECK(frames[i] == off.values()[4 * n * 216 + i]);
    }
  }
  SUBCASE("set_gaze takes effect on the next chunk; reset restarts the stream") {
    auto s = ready_session(model);
    auto b2 = b;
    const auto plain = chunks_of(s, b, 8);
    s.handle(encode(reset_message()));
    auto again = chunks_of(s, b, 8);
    CHECK(again == plain);
    s.handle(encode(reset_message()));
    s.handle(encode(set_gaze_message(0.9)));
    auto steered = chunks_of(s, b, 8);
    CHECK(steered[0]["frames"] != plain[0]["frames"]);
    b2.set_gaze_target(0.9);
    stream::StreamOptions so;
    so.seed = session_seed(9, "a");
    const auto off = stream::run_offline(model, b2, so);
    const auto frames = steered[1]["frames"].get<std::vector<float>>();
    for (std::size_t i = 0; i < frames.size(); ++i) CHECK(frames[i] == off.values()[4 * 216 + i]);
  }
  SUBCASE("stats report emitted frames per second") {
    SessionOptions o;
    o.stats_seconds = 1.0;
    Session s(model, o);
    const auto t0 = Session::Clock::now();
    s.handle(encode(init_message()), t0);
    CHECK_FALSE(s.poll_stats(t0));
    for (std::size_t f = 0; f < 8; ++f) s.handle(frame_line(b, f, f), t0);
    CHECK_FALSE(s.poll_stats(t0 + std::chrono::milliseconds(500)));
    const auto st = s.poll_stats(t0 + std::chrono::seconds(2));
    REQUIRE(st);
    CHECK((*st)["fps"].get<double>() == doctest::Approx(4.0));
    CHECK((*st)["latency_ms"].get<double>() >= 0.0);
  }
}

TEST_CASE("websocket framing") {
  CHECK(service::ws::accept_key("dGhlIHNhbXBsZSBub25jZQ==") == "s3pPLMBiTxaQ9kYGzzhZRbK+xOo=");
  for (std::size_t n : {0u, 5u, 125u, 126u, 300u, 70000u}) {
    const std::string payload(n, 'x');
    service::ws::FrameParser p;
    const auto bytes = service::ws::encode_frame(payload, service::ws::Opcode::kText, 0x12345678u);
    p.feed(std::string_view(bytes).substr(0, bytes.size() / 2));
    if (n > 4) CHECK_FALSE(p.next());
    p.feed(std::string_view(bytes).substr(bytes.size() / 2));
    const auto f = p.next();
    REQUIRE(f);
    CHECK(f->payload == payload);
    CHECK(f->op == service::ws::Opcode::kText);
    CHECK_FALSE(p.next());
  }
  service::ws::FrameParser small(10);
  small.feed(service::ws::encode_frame(std::string(11, 'y'), service::ws::Opcode::kText));
  CHECK_THROWS_AS(small.next(), Error);
}

namespace {

int raw_connect(std::uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  return fd;
}

std::string raw_read(int fd, double seconds = 5.0) {
  pollfd p{fd, POLLIN, 0};
  if (::poll(&p, 1, static_cast<int>(seconds * 1000)) <= 0) return {};
  char buf[65536];
  const ssize_t n = ::recv(fd, buf, sizeof buf, 0);
  return n > 0 ? std::string(buf, static_cast<std::size_t>(n)) : std::string();
}

}  // namespace

TEST_CASE("server: concurrent sessions, websocket, heartbeat, limits") {
  std::shared_ptr<const ModelBundle> model = tiny_bundle();
  const auto b = random_bundle(24, 3);
  service::ServerOptions so;
  so.port = 0;
  so.seed = 9;
  so.heartbeat_seconds = 1.5;
  so.max_sessions = 2;
  std::mutex log_mu;
  std::vector<std::string> log;
  so.on_message = [&](const std::string& id, char dir, const std::string& line) {
    std::lock_guard lock(log_mu);
    log.push_back(id + dir + line);
  };
  service::Server server(model, so);
  server.start();
  REQUIRE(server.port() != 0);

  SUBCASE("two interleaved sessions each match their solo run") {
    service::LineClient c1("127.0.0.1", server.port()), c2("127.0.0.1", server.port());
    c1.send(init_message());
    c2.send(init_message());
    const auto r1 = c1.receive(), r2 = c2.receive();
    REQUIRE(r1);
    REQUIRE(r2);
    std::vector<json> got1, got2;
    for (std::size_t f = 0; f < 24; ++f) {
      c1.send_raw(frame_line(b, f, f));
      c2.send_raw(frame_line(b, f, f));
      if (f % 4 == 3) {
        auto m1 = c1.receive();
        auto m2 = c2.receive();
        while (m1 && (*m1)["type"] == "stats") m1 = c1.receive();
        while (m2 && (*m2)["type"] == "stats") m2 = c2.receive();
        REQUIRE(m1);
        REQUIRE(m2);
        got1.push_back(*m1);
        got2.push_back(*m2);
      }
    }
    auto solo = [&](const std::string& id) {
      SessionOptions o;
      o.server_seed = 9;
      o.id = id;
      Session s(model, o);
      s.handle(encode(init_message()));
      return chunks_of(s, b, 24);
    };
    CHECK(got1 == solo((*r1)["session"]));
    CHECK(got2 == solo((*r2)["session"]));
    CHECK(got1 != got2);

    // A third connection exceeds the limit.
    service::LineClient c3("127.0.0.1", server.port());
    c3.send(init_message());
    const auto busy = c3.receive();
    REQUIRE(busy);
    CHECK((*busy)["code"] == code::kBusy);
  }
  SUBCASE("websocket transport") {
    const int fd = raw_connect(server.port());
    const std::string req =
        "GET / HTTP/1.1\r\nHost: x\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
        "Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n";
    ::send(fd, req.data(), req.size(), 0);
    std::string resp = raw_read(fd);
    CHECK(resp.find("101 Switching Protocols") != std::string::npos);
    CHECK(resp.find("s3pPLMBiTxaQ9kYGzzhZRbK+xOo=") != std::string::npos);
    service::ws::FrameParser parser;
    parser.feed(resp.substr(resp.find("\r\n\r\n") + 4));
    auto send_ws = [&](const std::string& text) {
      const auto f = service::ws::encode_frame(text, service::ws::Opcode::kText, 0xA1B2C3D4u);
      ::send(fd, f.data(), f.size(), 0);
    };
    auto next = [&]() -> std::optional<service::ws::Frame> {
      for (int i = 0; i < 50; ++i) {
        if (auto f = parser.next()) return f;
        const auto more = raw_read(fd);
        if (more.empty()) return std::nullopt;
        parser.feed(more);
      }
      return std::nullopt;
    };
    send_ws(encode(init_message()));
    auto f = next();
    REQUIRE(f);
    CHECK(json::parse(f->payload)["type"] == "ready");
    for (std::size_t i = 0; i < 4; ++i) send_ws(frame_line(b, i, i));
    f = next();
    REQUIRE(f);
    CHECK(json::parse(f->payload)["type"] == "pose_chunk");
    const auto ping = service::ws::encode_frame("hb", service::ws::Opcode::kPing, 1u);
    ::send(fd, ping.data(), ping.size(), 0);
    f = next();
    REQUIRE(f);
    CHECK(f->op == service::ws::Opcode::kPong);
    CHECK(f->payload == "hb");
    ::close(fd);
  }
  SUBCASE("idle sessions time out") {
    service::LineClient c("127.0.0.1", server.port());
    c.send(init_message());
    REQUIRE(c.receive());
    const auto m = c.receive(4.0);
    REQUIRE(m);
    CHECK((*m)["code"] == code::kHeartbeat);
    CHECK_FALSE(c.receive(1.0));
  }
  server.stop();

  // Wire-level causality audit: every emitted pose frame index is covered by
  // conditioning received earlier on the same session.
  std::map<std::string, std::int64_t> latest;
  for (const auto& entry : log) {
    const auto sep = entry.find_first_of("<>");
    const std::string id = entry.substr(0, sep);
    const auto msg = json::parse(entry.substr(sep + 1));
    if (entry[sep] == '<' && msg.value("type", "") == "user_frame") latest[id] = msg["t"];
    if (entry[sep] == '>' && msg["type"] == "pose_chunk") {
      const std::int64_t last = msg["t0"].get<std::int64_t>() + msg["n"].get<std::int64_t>() - 1;
      CHECK(latest.count(id));
      CHECK(last <= latest[id]);
    }
  }
}
