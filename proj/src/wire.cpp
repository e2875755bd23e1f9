#include "dyad/wire.hpp"

#include <cmath>

#include "dyad/errors.hpp"

namespace dyad::wire {

namespace {

[[noreturn]] void malformed(const std::string& msg) { throw Error(code::kMalformed, msg); }

double finite_number(const nlohmann::json& j, const char* what) {
  if (!j.is_number()) malformed(std::string(what) + " must be a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) malformed(std::string(what) + " must be finite");
  return v;
}

std::vector<float> vector_field(const nlohmann::json& msg, const char* key, std::size_t n) {
  if (!msg.contains(key) || !msg[key].is_array()) malformed(std::string("user_frame.") + key + " must be an array");
  const auto& a = msg[key];
  if (a.size() != n)
    malformed(std::string("user_frame.") + key + " has " + std::to_string(a.size()) + " entries, expected " +
              std::to_string(n));
  std::vector<float> out;
  for (const auto& v : a) out.push_back(static_cast<float>(finite_number(v, key)));
  return out;
}

std::optional<double> gaze_field(const nlohmann::json& msg, const char* key) {
  if (!msg.contains(key) || msg[key].is_null()) return std::nullopt;
  const double g = finite_number(msg[key], key);
  if (g < -1.0 || g > 1.0) malformed(std::string(key) + " must lie in [-1, 1]");
  return g;
}

}  // namespace

ClientMessage parse_client(std::string_view line, std::size_t audio_dim) {
  const auto msg = nlohmann::json::parse(line, nullptr, false);
  if (msg.is_discarded() || !msg.is_object()) malformed("message is not a JSON object");
  if (!msg.contains("type") || !msg["type"].is_string()) malformed("message lacks a string 'type'");
  const std::string type = msg["type"];
  if (type == "init") {
    if (!msg.contains("version") || !msg["version"].is_number_integer()) malformed("init.version must be an integer");
    return Init{msg["version"].get<int>()};
  }
  if (type == "user_frame") {
    if (!msg.contains("t") || !msg["t"].is_number_integer()) malformed("user_frame.t must be an integer");
    UserFrame f;
    f.t = msg["t"].get<std::int64_t>();
    const auto p = vector_field(msg, "p", 2);
    f.p = geom::Vec2(p[0], p[1]);
    f.a = vector_field(msg, "a", audio_dim);
    f.b = vector_field(msg, "b", audio_dim);
    f.gaze = gaze_field(msg, "gaze");
    return f;
  }
  if (type == "set_gaze") {
    if (!msg.contains("g")) malformed("set_gaze.g is required (number or null)");
    return SetGaze{gaze_field(msg, "g")};
  }
  if (type == "reset") return Reset{};
  throw Error(code::kUnknownType, "unknown message type '" + type + "'");
}

nlohmann::json init_message(int version) { return {{"type", "init"}, {"version", version}}; }

nlohmann::json user_frame_message(std::int64_t t, const geom::Vec2& p, std::span<const float> a,
                                  std::span<const float> b, std::optional<double> gaze) {
  return {{"type", "user_frame"},
          {"t", t},
          {"p", {p.x(), p.y()}},
          {"a", std::vector<float>(a.begin(), a.end())},
          {"b", std::vector<float>(b.begin(), b.end())},
          {"gaze", gaze ? nlohmann::json(*gaze) : nlohmann::json(nullptr)}};
}

nlohmann::json set_gaze_message(std::optional<double> g) {
  return {{"type", "set_gaze"}, {"g", g ? nlohmann::json(*g) : nlohmann::json(nullptr)}};
}

nlohmann::json reset_message() { return {{"type", "reset"}}; }

nlohmann::json ready_message(const ModelBundle& model, const std::string& session) {
  return {{"type", "ready"},
          {"version", kProtocolVersion},
          {"session", session},
          {"skeleton",
           {{"joints", model.skeleton->joints},
            {"vertices_per_joint", geom::kIcoVertices},
            {"frame_dim", model.skeleton->flat_dim()}}},
          {"s", model.stride()},
          {"fps", model.fps},
          {"audio_dim", model.flow ? model.flow->config().audio_dim : 0}};
}

nlohmann::json pose_chunk_message(std::int64_t t0, const NdArray<float>& frames) {
  return {{"type", "pose_chunk"},
          {"t0", t0},
          {"n", frames.rows()},
          {"frames", std::vector<float>(frames.values().begin(), frames.values().end())}};
}

nlohmann::json stats_message(double fps, double latency_ms) {
  return {{"type", "stats"}, {"fps", fps}, {"latency_ms", latency_ms}};
}

nlohmann::json error_message(const std::string& c, const std::string& msg) {
  return {{"type", "error"}, {"code", c}, {"msg", msg}};
}

std::string encode(const nlohmann::json& message) { return message.dump(); }

std::uint64_t session_seed(std::uint64_t server_seed, const std::string& id) {
  return mix_seed(server_seed, stable_hash(id));
}

Session::Session(std::shared_ptr<const ModelBundle> model, SessionOptions options)
    : model_(std::move(model)), options_(std::move(options)) {
  if (!model_ || !model_->flow) throw DependencyError("session needs a model with a flow generator");
  restart();
}

void Session::restart() {
  stream::StreamOptions so;
  so.seed = session_seed(options_.server_seed, options_.id);
  so.steps = options_.steps;
  so.cfg_scale = options_.cfg_scale;
  stream_ = std::make_unique<stream::StreamState>(model_, so);
  last_t_.reset();
  pending_t_.clear();
}

Session::Reply Session::handle(std::string_view line, Clock::time_point now) {
  Reply r;
  try {
    const auto msg = parse_client(line, model_->flow->config().audio_dim);
    if (const auto* init = std::get_if<Init>(&msg)) {
      if (init->version != kProtocolVersion) {
        r.messages.push_back(error_message(code::kVersion, "server speaks protocol version " +
                                                               std::to_string(kProtocolVersion) + ", client sent " +
                                                               std::to_string(init->version)));
        r.close = true;
        return r;
      }
      initialized_ = true;
      r.messages.push_back(ready_message(*model_, options_.id));
      return r;
    }
    if (!initialized_) {
      r.messages.push_back(error_message(code::kNotInitialized, "send init first"));
      return r;
    }
    if (const auto* g = std::get_if<SetGaze>(&msg)) {
      gaze_ = g->g;
      return r;
    }
    if (std::holds_alternative<Reset>(msg)) {
      restart();
      r.messages.push_back(ready_message(*model_, options_.id));
      return r;
    }
    const auto& f = std::get<UserFrame>(msg);
    if (last_t_ && f.t <= *last_t_) {
      r.messages.push_back(error_message(code::kNonmonotonic, "t=" + std::to_string(f.t) + " does not follow t=" +
                                                                  std::to_string(*last_t_)));
      return r;
    }
    stream_->push_frame(f.p, f.a, f.b, f.gaze ? f.gaze : gaze_);
    last_t_ = f.t;
    pending_t_.push_back(f.t);
    if (!stats_started_) {
      stats_started_ = true;
      stats_since_ = now;
    }
    while (stream_->chunk_ready()) {
      const auto chunk = stream_->generate_chunk();
      r.messages.push_back(pose_chunk_message(pending_t_.front(), chunk.frames));
      for (std::size_t i = 0; i < chunk.frames.rows(); ++i) pending_t_.pop_front();
      stats_frames_ += chunk.frames.rows();
      stats_latency_ += chunk.latency_ms;
      ++stats_chunks_;
    }
  } catch (const Error& e) {
    const bool known = e.code() == code::kUnknownType || e.code() == code::kMalformed;
    r.messages.push_back(error_message(known ? e.code() : code::kMalformed, e.what()));
  } catch (const std::exception& e) {
    r.messages.push_back(error_message(code::kInternal, e.what()));
  }
  return r;
}

std::optional<nlohmann::json> Session::poll_stats(Clock::time_point now) {
  if (!stats_started_) return std::nullopt;
  const double dt = std::chrono::duration<double>(now - stats_since_).count();
  if (dt < options_.stats_seconds) return std::nullopt;
  auto msg = stats_message(static_cast<double>(stats_frames_) / dt,
                           stats_chunks_ ? stats_latency_ / static_cast<double>(stats_chunks_) : 0.0);
  stats_since_ = now;
  stats_frames_ = 0;
  stats_chunks_ = 0;
  stats_latency_ = 0;
  return msg;
}

}  // namespace dyad::wire
