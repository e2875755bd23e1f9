#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "dyad/stream.hpp"

namespace dyad::wire {

using diff::NdArray;

/// One JSON object per line, discriminated by "type".
///   client: init {version}, user_frame {t, p:[x,z], a:[D_a], b:[D_a], gaze},
///           set_gaze {g}, reset
///   server: ready {version, session, skeleton, s, fps, audio_dim},
///           pose_chunk {t0, n, frames}, stats {fps, latency_ms},
///           error {code, msg}
inline constexpr int kProtocolVersion = 1;

struct Init {
  int version = 0;
};
struct UserFrame {
  std::int64_t t = 0;
  geom::Vec2 p{0, 0};
  std::vector<float> a, b;
  std::optional<double> gaze;
};
struct SetGaze {
  std::optional<double> g;
};
struct Reset {};
using ClientMessage = std::variant<Init, UserFrame, SetGaze, Reset>;

/// Error codes carried by `error` replies.
namespace code {
inline constexpr const char* kMalformed = "malformed";
inline constexpr const char* kUnknownType = "unknown_type";
inline constexpr const char* kNonmonotonic = "nonmonotonic_t";
inline constexpr const char* kNotInitialized = "not_initialized";
inline constexpr const char* kVersion = "version_mismatch";
inline constexpr const char* kBusy = "busy";
inline constexpr const char* kHeartbeat = "heartbeat_timeout";
inline constexpr const char* kInternal = "internal";
}  // namespace code

/// Throws Error with code kMalformed or kUnknownType.
ClientMessage parse_client(std::string_view line, std::size_t audio_dim);

nlohmann::json init_message(int version = kProtocolVersion);
nlohmann::json user_frame_message(std::int64_t t, const geom::Vec2& p, std::span<const float> a,
                                  std::span<const float> b, std::optional<double> gaze = std::nullopt);
nlohmann::json set_gaze_message(std::optional<double> g);
nlohmann::json reset_message();

nlohmann::json ready_message(const ModelBundle& model, const std::string& session);
nlohmann::json pose_chunk_message(std::int64_t t0, const NdArray<float>& frames);
nlohmann::json stats_message(double fps, double latency_ms);
nlohmann::json error_message(const std::string& code, const std::string& msg);

/// Compact single-line encoding (no trailing newline).
std::string encode(const nlohmann::json& message);

struct SessionOptions {
  std::uint64_t server_seed = 0;
  std::string id = "session";
  std::size_t steps = 4;
  double cfg_scale = -1.0;
  double stats_seconds = 1.0;
};

/// Per-session seed: mix of the server seed and the session id.
std::uint64_t session_seed(std::uint64_t server_seed, const std::string& id);

/// Transport-independent protocol state for one connection.
class Session {
 public:
  using Clock = std::chrono::steady_clock;

  Session(std::shared_ptr<const ModelBundle> model, SessionOptions options);

  struct Reply {
    std::vector<nlohmann::json> messages;
    bool close = false;
  };
  /// Handles one client line. Malformed input yields an `error` reply and
  /// keeps the session; a version mismatch in `init` closes it.
  Reply handle(std::string_view line, Clock::time_point now = Clock::now());
  /// A `stats` message when the reporting interval has elapsed.
  std::optional<nlohmann::json> poll_stats(Clock::time_point now = Clock::now());

  bool initialized() const { return initialized_; }
  const std::string& id() const { return options_.id; }
  std::optional<double> gaze_target() const { return gaze_; }

 private:
  void restart();

  std::shared_ptr<const ModelBundle> model_;
  SessionOptions options_;
  std::unique_ptr<stream::StreamState> stream_;
  bool initialized_ = false;
  std::optional<std::int64_t> last_t_;
  std::deque<std::int64_t> pending_t_;  // client timestamps of frames not yet emitted
  std::optional<double> gaze_;
  Clock::time_point stats_since_;
  std::size_t stats_frames_ = 0;
  double stats_latency_ = 0;
  std::size_t stats_chunks_ = 0;
  bool stats_started_ = false;
};

}  // namespace dyad::wire
