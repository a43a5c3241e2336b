#pragma once

// Live sessions over the framed byte stream.
//
// Client to server: AUDIO_IN (s16le mono 16 kHz PCM) and CONTROL (JSON).
//   {"op":"configure","seed":N}  before any audio; reseeds backend jitter
//   {"op":"advance","ms":N}      runs the session clock forward N ms
//   {"op":"end"}                 drains the session, answered by end_ack
// Server to client:
//   STATE         controller state name, one frame per transition, plus the
//                 initial state when the session opens
//   TEXT_PARTIAL  {"spec_id","text","at_ms"}
//   AUDIO_OUT     u64 BE at_ms, u32 BE chunk index, then s16le PCM
//   TOOL_CALL     {"call_id","name","args","at_ms"}
//   TOOL_RESULT   {"call_id","payload","is_error","at_ms"}
//   METRICS       {"type":"latency"|"error"|"drop", ...}
//   CONTROL       {"op":"end_ack","at_ms"} or {"op":"error","message"}
// Anything else from a client is malformed: the server replies with an error
// CONTROL frame and closes.
//
// The session clock is media time: it moves with the audio the client sends
// and with advance requests, never with the wall clock.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "steporch/backends.hpp"
#include "steporch/config.hpp"
#include "steporch/errors.hpp"
#include "steporch/frame.hpp"
#include "steporch/http_backends.hpp"
#include "steporch/pipeline.hpp"

namespace steporch {

inline constexpr std::size_t kOutboundWindow = 64;
inline constexpr int kEndLingerMs = 2000;
inline constexpr std::size_t kAudioOutHeaderBytes = 12;

// --- payload helpers --------------------------------------------------------

inline Frame json_frame(FrameType type, const nlohmann::json& j) { return Frame(type, j.dump()); }

inline Frame control_error(const std::string& message) {
  return json_frame(FrameType::Control, {{"op", "error"}, {"message", message}});
}

inline Frame audio_out_frame(std::int64_t at_ms, const AudioChunk& chunk) {
  std::vector<std::uint8_t> p;
  p.reserve(kAudioOutHeaderBytes + chunk.pcm.size() * 2);
  const auto at = static_cast<std::uint64_t>(at_ms);
  for (int s = 56; s >= 0; s -= 8) p.push_back(static_cast<std::uint8_t>(at >> s));
  const auto idx = static_cast<std::uint32_t>(chunk.index);
  for (int s = 24; s >= 0; s -= 8) p.push_back(static_cast<std::uint8_t>(idx >> s));
  for (const auto v : chunk.pcm) {
    const auto u = static_cast<std::uint16_t>(v);
    p.push_back(static_cast<std::uint8_t>(u & 0xff));
    p.push_back(static_cast<std::uint8_t>(u >> 8));
  }
  return Frame(FrameType::AudioOut, std::move(p));
}

struct AudioOutPayload {
  std::int64_t at_ms = 0;
  std::uint32_t chunk_index = 0;
  std::vector<std::int16_t> pcm;
};

inline AudioOutPayload parse_audio_out(const Frame& f) {
  if (f.type != static_cast<std::uint8_t>(FrameType::AudioOut) || f.payload.size() < kAudioOutHeaderBytes ||
      (f.payload.size() - kAudioOutHeaderBytes) % 2 != 0) {
    throw FrameError("AUDIO_OUT: malformed payload");
  }
  AudioOutPayload out;
  std::uint64_t at = 0;
  for (std::size_t i = 0; i < 8; ++i) at = (at << 8) | f.payload[i];
  out.at_ms = static_cast<std::int64_t>(at);
  for (std::size_t i = 8; i < 12; ++i) out.chunk_index = (out.chunk_index << 8) | f.payload[i];
  for (std::size_t i = kAudioOutHeaderBytes; i < f.payload.size(); i += 2) {
    out.pcm.push_back(static_cast<std::int16_t>(f.payload[i] | (f.payload[i + 1] << 8)));
  }
  return out;
}

inline Frame audio_in_frame(std::span<const std::int16_t> pcm) {
  std::vector<std::uint8_t> p;
  p.reserve(pcm.size() * 2);
  for (const auto v : pcm) {
    const auto u = static_cast<std::uint16_t>(v);
    p.push_back(static_cast<std::uint8_t>(u & 0xff));
    p.push_back(static_cast<std::uint8_t>(u >> 8));
  }
  return Frame(FrameType::AudioIn, std::move(p));
}

// --- backends ---------------------------------------------------------------

using BackendFactory = std::function<PipelineBackends(const SessionConfig&)>;

// Mock mode has no scripts: chat answers "Response N.", no tools exist, and
// TTS renders audible PCM so clients have something to play.
inline PipelineBackends make_session_backends(const SessionConfig& c) {
  const BackendLatencies lat = c.latency.reseeded(c.seed);
  if (c.backend_mode == "http") {
    auto ep = std::make_shared<HttpEndpoint>(c.http);
    return {std::make_shared<HttpChatBackend>(ep), std::make_shared<HttpAsrBackend>(ep),
            std::make_shared<HttpTtsBackend>(ep), std::make_shared<HttpToolExecutor>(ep, lat.tool_timeout_ms)};
  }
  return {std::make_shared<ScriptedChatBackend>(std::vector<std::string>{}, lat.chat),
          std::make_shared<ScriptedAsrBackend>(std::vector<std::string>{}, lat.asr),
          std::make_shared<MockTtsBackend>(lat.tts, true),
          std::make_shared<ScriptedToolExecutor>(lat.tool_timeout_ms)};
}

// --- session ----------------------------------------------------------------

class FrameSink {
 public:
  virtual ~FrameSink() = default;
  virtual void send(Frame frame) = 0;
};

class CollectingSink : public FrameSink {
 public:
  void send(Frame frame) override { frames.push_back(std::move(frame)); }
  std::vector<Frame> frames;
};

// Transport-free session: frames in, frames out through the sink.
class GatewaySession : private PipelineObserver {
 public:
  enum class Verdict { Continue, Ended, Close };

  GatewaySession(SessionConfig config, FrameSink& sink, BackendFactory factory = make_session_backends)
      : config_(std::move(config)), sink_(sink), factory_(std::move(factory)) {
    config_.validate();
    build();
    sink_.send(Frame(FrameType::State, to_string(pipe_->state())));
  }

  Verdict handle(const Frame& f) {
    if (closed_) return Verdict::Close;
    try {
      if (!f.known()) return fail(std::string("unknown frame type 0x") + hex(f.type));
      switch (f.kind()) {
        case FrameType::AudioIn: return on_audio(f);
        case FrameType::Control: return on_control(f);
        default: return fail(std::string(frame_type_name(f.type)) + " is not accepted from clients");
      }
    } catch (const Error& e) {
      return fail(e.what());
    }
  }

  bool ended() const noexcept { return ended_; }
  bool closed() const noexcept { return closed_; }
  const DuplexPipeline& pipeline() const { return *pipe_; }

 private:
  static std::string hex(std::uint8_t v) {
    static const char* d = "0123456789abcdef";
    return {d[v >> 4], d[v & 15]};
  }

  void build() {
    PipelineConfig pc;
    pc.vad = config_.vad;
    pc.controller = {config_.speculation, config_.budget, config_.system_prompt};
    pipe_ = std::make_unique<DuplexPipeline>(pc, factory_(config_), static_cast<PipelineObserver*>(this));
  }

  Verdict fail(const std::string& message) {
    sink_.send(control_error(message));
    closed_ = true;
    return Verdict::Close;
  }

  Verdict on_audio(const Frame& f) {
    if (ended_) return fail("AUDIO_IN after end");
    if (f.payload.size() % 2 != 0) return fail("AUDIO_IN payload has an odd byte count");
    std::vector<std::int16_t> pcm(f.payload.size() / 2);
    for (std::size_t i = 0; i < pcm.size(); ++i) {
      pcm[i] = static_cast<std::int16_t>(f.payload[2 * i] | (f.payload[2 * i + 1] << 8));
    }
    audio_seen_ = audio_seen_ || !pcm.empty();
    pipe_->push_pcm(pcm);
    return Verdict::Continue;
  }

  Verdict on_control(const Frame& f) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f.text());
    } catch (const nlohmann::json::parse_error&) {
      return fail("CONTROL payload is not JSON");
    }
    if (!j.is_object() || !j.contains("op") || !j["op"].is_string()) return fail("CONTROL needs a string \"op\"");
    const auto op = j["op"].get<std::string>();
    if (ended_) return fail("CONTROL " + op + " after end");
    if (op == "end") {
      pipe_->drain();
      ended_ = true;
      sink_.send(json_frame(FrameType::Control, {{"op", "end_ack"}, {"at_ms", pipe_->now()}}));
      return Verdict::Ended;
    }
    if (op == "advance") {
      if (!j.contains("ms") || !j["ms"].is_number_integer() || j["ms"].get<std::int64_t>() < 0) {
        return fail("advance needs a non-negative integer \"ms\"");
      }
      pipe_->advance_to(pipe_->now() + j["ms"].get<std::int64_t>());
      return Verdict::Continue;
    }
    if (op == "configure") {
      if (audio_seen_) return fail("configure must precede audio");
      if (!j.contains("seed") || !j["seed"].is_number_unsigned()) return fail("configure needs an unsigned \"seed\"");
      config_.seed = j["seed"].get<std::uint64_t>();
      build();
      return Verdict::Continue;
    }
    return fail("unknown CONTROL op \"" + op + "\"");
  }

  // Pipeline output.
  void on_state(ControllerState s, std::int64_t) override { sink_.send(Frame(FrameType::State, to_string(s))); }
  void on_event(const ControllerEvent& ev) override {
    if (ev.kind == EventKind::VadEndOfSpeech) last_end_of_speech_ = ev.at_ms;
  }
  void on_text_partial(SpecId spec, const std::string& text, std::int64_t at) override {
    sink_.send(json_frame(FrameType::TextPartial, {{"spec_id", spec}, {"text", text}, {"at_ms", at}}));
  }
  void on_audio_out(SpecId spec, const AudioChunk& chunk, std::int64_t at) override {
    if (chunk.index == 0 && last_end_of_speech_) {
      sink_.send(json_frame(FrameType::Metrics, {{"type", "latency"},
                                                 {"spec_id", spec},
                                                 {"end_of_speech_ms", *last_end_of_speech_},
                                                 {"first_audio_ms", at},
                                                 {"latency_ms", at - *last_end_of_speech_}}));
    }
    sink_.send(audio_out_frame(at, chunk));
  }
  void on_tool_call(const ToolCallDirective& call, std::int64_t at) override {
    sink_.send(json_frame(FrameType::ToolCall,
                          {{"call_id", call.call_id}, {"name", call.name}, {"args", call.args}, {"at_ms", at}}));
  }
  void on_tool_result(CallId call, const std::string& payload, bool error, std::int64_t at) override {
    sink_.send(json_frame(FrameType::ToolResult,
                          {{"call_id", call}, {"payload", payload}, {"is_error", error}, {"at_ms", at}}));
  }
  void on_backend_error(const std::string& what, std::int64_t at) override {
    sink_.send(json_frame(FrameType::Metrics, {{"type", "error"}, {"message", what}, {"at_ms", at}}));
  }

  SessionConfig config_;
  FrameSink& sink_;
  BackendFactory factory_;
  std::unique_ptr<DuplexPipeline> pipe_;
  std::optional<std::int64_t> last_end_of_speech_;
  bool audio_seen_ = false;
  bool ended_ = false;
  bool closed_ = false;
};

// --- outbound window --------------------------------------------------------

// At most `capacity` frames wait for the socket. A full window evicts its
// oldest AUDIO_OUT; with no audio to evict the producer blocks. The consumer
// sees a METRICS drop record ahead of the first frame after any eviction.
class OutboundQueue {
 public:
  explicit OutboundQueue(std::size_t capacity = kOutboundWindow) : capacity_(capacity) {
    if (capacity_ == 0) throw ParameterError("outbound queue capacity must be positive");
  }

  void push(Frame f) {
    std::unique_lock lk(mu_);
    while (!closed_ && q_.size() >= capacity_) {
      auto it = std::find_if(q_.begin(), q_.end(), [](const Frame& x) {
        return x.type == static_cast<std::uint8_t>(FrameType::AudioOut);
      });
      if (it != q_.end()) {
        q_.erase(it);
        ++pending_drops_;
        ++total_drops_;
        break;
      }
      space_.wait(lk);
    }
    if (closed_) return;
    q_.push_back(std::move(f));
    peak_ = std::max(peak_, q_.size());
    ready_.notify_one();
  }

  // Blocks until a frame is available; empty once closed and drained.
  std::optional<Frame> pop() {
    std::unique_lock lk(mu_);
    ready_.wait(lk, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return std::nullopt;
    if (pending_drops_ > 0) {
      Frame m = json_frame(FrameType::Metrics,
                           {{"type", "drop"}, {"dropped", pending_drops_}, {"total_dropped", total_drops_}});
      pending_drops_ = 0;
      return m;
    }
    Frame f = std::move(q_.front());
    q_.pop_front();
    space_.notify_one();
    return f;
  }

  // Stops accepting frames; what is queued can still be popped.
  void close() {
    std::lock_guard lk(mu_);
    closed_ = true;
    ready_.notify_all();
    space_.notify_all();
  }

  // Discards everything and wakes all waiters.
  void abandon() {
    std::lock_guard lk(mu_);
    closed_ = true;
    q_.clear();
    ready_.notify_all();
    space_.notify_all();
  }

  std::size_t size() const {
    std::lock_guard lk(mu_);
    return q_.size();
  }
  std::size_t peak() const {
    std::lock_guard lk(mu_);
    return peak_;
  }
  std::uint64_t total_drops() const {
    std::lock_guard lk(mu_);
    return total_drops_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable ready_, space_;
  std::deque<Frame> q_;
  bool closed_ = false;
  std::uint64_t pending_drops_ = 0;
  std::uint64_t total_drops_ = 0;
  std::size_t peak_ = 0;
};

class QueueSink : public FrameSink {
 public:
  explicit QueueSink(OutboundQueue& q) : q_(q) {}
  void send(Frame frame) override { q_.push(std::move(frame)); }

 private:
  OutboundQueue& q_;
};

// --- sockets ----------------------------------------------------------------

namespace net {

inline bool send_all(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    off += static_cast<std::size_t>(n);
  }
  return true;
}

// >0 bytes read, 0 orderly close, -1 error, -2 timeout.
inline long recv_some(int fd, std::uint8_t* buf, std::size_t cap, int timeout_ms) {
  pollfd p{fd, POLLIN, 0};
  for (;;) {
    const int r = ::poll(&p, 1, timeout_ms);
    if (r < 0 && errno == EINTR) continue;
    if (r < 0) return -1;
    if (r == 0) return -2;
    break;
  }
  for (;;) {
    const auto n = ::recv(fd, buf, cap, 0);
    if (n < 0 && errno == EINTR) continue;
    return n < 0 ? -1 : static_cast<long>(n);
  }
}

}  // namespace net

class GatewayServer {
 public:
  explicit GatewayServer(SessionConfig config, BackendFactory factory = make_session_backends)
      : config_(std::move(config)), factory_(std::move(factory)) {
    config_.validate();
  }

  GatewayServer(const GatewayServer&) = delete;
  GatewayServer& operator=(const GatewayServer&) = delete;
  ~GatewayServer() { stop(); }

  // Port 0 binds an ephemeral port; see port().
  void start(std::uint16_t port, const std::string& host = "127.0.0.1") {
    if (running_) throw LifecycleError("gateway: already running");
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error(std::string("gateway: socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      close_listen();
      throw ValidationError("gateway: bad host " + host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 16) < 0) {
      const std::string why = std::strerror(errno);
      close_listen();
      throw Error("gateway: cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  std::uint16_t port() const noexcept { return port_; }
  bool running() const noexcept { return running_; }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    if (accept_thread_.joinable()) accept_thread_.join();
    close_listen();
    std::list<std::shared_ptr<Connection>> conns;
    {
      std::lock_guard lk(mu_);
      conns.swap(connections_);
    }
    for (auto& c : conns) {
      ::shutdown(c->fd, SHUT_RDWR);
      c->queue.abandon();
    }
    for (auto& c : conns) {
      if (c->reader.joinable()) c->reader.join();
    }
  }

  std::size_t sessions_served() const noexcept { return served_; }

 private:
  struct Connection {
    int fd = -1;
    OutboundQueue queue;
    std::thread reader;
    std::atomic<bool> done{false};
  };

  void close_listen() {
    if (listen_fd_ >= 0) ::close(listen_fd_);
    listen_fd_ = -1;
  }

  void accept_loop() {
    while (running_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        break;
      }
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto conn = std::make_shared<Connection>();
      conn->fd = fd;
      std::lock_guard lk(mu_);
      reap();
      connections_.push_back(conn);
      conn->reader = std::thread([this, conn] { serve(*conn); });
      ++served_;
    }
  }

  // Joins finished connections. Caller holds mu_.
  void reap() {
    for (auto it = connections_.begin(); it != connections_.end();) {
      if ((*it)->done) {
        if ((*it)->reader.joinable()) (*it)->reader.join();
        it = connections_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void serve(Connection& c) {
    std::thread writer([&c] {
      while (auto f = c.queue.pop()) {
        if (!net::send_all(c.fd, encode_frame(*f))) {
          c.queue.abandon();
          return;
        }
      }
    });
    run_session(c);
    c.queue.close();
    writer.join();
    ::shutdown(c.fd, SHUT_RDWR);
    ::close(c.fd);
    c.done = true;
  }

  void run_session(Connection& c) {
    QueueSink sink(c.queue);
    std::optional<GatewaySession> session;
    try {
      session.emplace(config_, sink, factory_);
    } catch (const Error& e) {
      sink.send(control_error(e.what()));
      return;
    }
    FrameDecoder decoder;
    std::vector<std::uint8_t> buf(64 * 1024);
    for (;;) {
      const int timeout = session->ended() ? kEndLingerMs : -1;
      const long n = net::recv_some(c.fd, buf.data(), buf.size(), timeout);
      if (n <= 0) return;  // closed, failed, or linger expired
      std::vector<Frame> frames;
      try {
        frames = decoder.feed({buf.data(), static_cast<std::size_t>(n)});
      } catch (const FrameError& e) {
        sink.send(control_error(e.what()));
        return;
      }
      for (const auto& f : frames) {
        if (session->handle(f) == GatewaySession::Verdict::Close) return;
      }
    }
  }

  SessionConfig config_;
  BackendFactory factory_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::atomic<std::size_t> served_{0};
  std::thread accept_thread_;
  std::mutex mu_;
  std::list<std::shared_ptr<Connection>> connections_;
};

// Minimal blocking client, used by the tests and handy for scripting.
class GatewayClient {
 public:
  GatewayClient(const std::string& host, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error(std::string("client: socket: ") + std::strerror(errno));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw Error("client: connect: " + why);
    }
  }
  GatewayClient(const GatewayClient&) = delete;
  GatewayClient& operator=(const GatewayClient&) = delete;
  ~GatewayClient() { close(); }

  bool send(const Frame& f) { return fd_ >= 0 && net::send_all(fd_, encode_frame(f)); }

  // Next frame, or nullopt on close or timeout.
  std::optional<Frame> recv(int timeout_ms = 5000) {
    for (;;) {
      if (!pending_.empty()) {
        Frame f = std::move(pending_.front());
        pending_.pop_front();
        return f;
      }
      if (fd_ < 0) return std::nullopt;
      std::uint8_t buf[8192];
      const long n = net::recv_some(fd_, buf, sizeof buf, timeout_ms);
      if (n <= 0) {
        if (n != -2) eof_ = true;
        return std::nullopt;
      }
      for (auto& f : decoder_.feed({buf, static_cast<std::size_t>(n)})) pending_.push_back(std::move(f));
    }
  }

  // Reads until the server closes the connection.
  std::vector<Frame> recv_all(int timeout_ms = 5000) {
    std::vector<Frame> out;
    while (auto f = recv(timeout_ms)) out.push_back(std::move(*f));
    return out;
  }

  bool saw_eof() const noexcept { return eof_; }

  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
  FrameDecoder decoder_;
  std::deque<Frame> pending_;
  bool eof_ = false;
};

}  // namespace steporch
