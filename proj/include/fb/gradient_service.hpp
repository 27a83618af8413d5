#pragma once

// Gradient-service wire protocol: plugs real out-of-process encoders into the
// attack loop. One message = 8-byte little-endian unsigned total length, then
// a UTF-8 JSON header line (newline-terminated), then raw little-endian
// float32 tensor payloads in header-declared order.
//
// Requests:
//   {"op":"info","request_id":id}
//   {"op":"forward","shape":[h,w,c],"request_id":id}        + image payload
//   {"op":"vjp","shape":[h,w,c],"embedding_dim":n,
//    "request_id":id}                                       + image, cotangent
// Responses mirror the op; errors use
//   {"error":"SHAPE_MISMATCH"|"INTERNAL"|"UNSUPPORTED_OP","message":m,
//    "request_id":id}

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fb/encoder.hpp"
#include "fb/errors.hpp"
#include "fb/tensor.hpp"

namespace fb {
namespace wire {

inline void write_full(int fd, const void* buf, std::size_t n) {
  const char* p = static_cast<const char*>(buf);
  while (n > 0) {
    const ssize_t w = ::write(fd, p, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw EncoderUnavailableError("write failed: " +
                                    std::string(std::strerror(errno)));
    }
    p += w;
    n -= static_cast<std::size_t>(w);
  }
}

// Returns false on clean EOF at a message boundary.
inline bool read_full(int fd, void* buf, std::size_t n, bool eof_ok = false) {
  char* p = static_cast<char*>(buf);
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::read(fd, p + got, n - got);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw EncoderUnavailableError("read failed: " +
                                    std::string(std::strerror(errno)));
    }
    if (r == 0) {
      if (eof_ok && got == 0) return false;
      throw EncoderUnavailableError("unexpected EOF on gradient service");
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

struct Message {
  nlohmann::json header;
  std::vector<char> payload;  // everything after the header line
};

inline void send_message(int fd, const nlohmann::json& header,
                         const std::vector<const std::vector<float>*>& tensors) {
  std::string head = header.dump();
  head.push_back('\n');
  std::uint64_t total = head.size();
  for (const auto* t : tensors) total += t->size() * sizeof(float);
  unsigned char len[8];
  for (int i = 0; i < 8; ++i) {
    len[i] = static_cast<unsigned char>((total >> (8 * i)) & 0xff);
  }
  write_full(fd, len, 8);
  write_full(fd, head.data(), head.size());
  for (const auto* t : tensors) {
    write_full(fd, t->data(), t->size() * sizeof(float));
  }
}

// Returns false on clean EOF before a length prefix.
inline bool recv_message(int fd, Message& out) {
  unsigned char len[8];
  if (!read_full(fd, len, 8, /*eof_ok=*/true)) return false;
  std::uint64_t total = 0;
  for (int i = 0; i < 8; ++i) {
    total |= static_cast<std::uint64_t>(len[i]) << (8 * i);
  }
  if (total == 0 || total > (1ull << 32)) {
    throw EncoderUnavailableError("implausible message length");
  }
  std::vector<char> buf(static_cast<std::size_t>(total));
  read_full(fd, buf.data(), buf.size());
  const auto nl = std::find(buf.begin(), buf.end(), '\n');
  if (nl == buf.end()) {
    throw EncoderUnavailableError("malformed message: missing header line");
  }
  try {
    out.header = nlohmann::json::parse(buf.begin(), nl);
  } catch (const nlohmann::json::exception& e) {
    throw EncoderUnavailableError(std::string("malformed header: ") + e.what());
  }
  out.payload.assign(nl + 1, buf.end());
  return true;
}

inline std::vector<float> tensor_to_f32(const Tensor3& t) {
  std::vector<float> out(t.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(t.data()[i]);
  }
  return out;
}

inline std::vector<float> doubles_to_f32(const std::vector<double>& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(v[i]);
  }
  return out;
}

}  // namespace wire

// Serves an in-process oracle over a pair of file descriptors (socket or
// pipe ends). Runs until EOF. Remote oracles run at single precision by
// protocol.
class GradientService {
 public:
  explicit GradientService(const EncoderOracle& oracle) : oracle_(oracle) {}

  void serve_fd(int in_fd, int out_fd) const {
    wire::Message msg;
    while (wire::recv_message(in_fd, msg)) {
      handle(msg, out_fd);
    }
  }

  // Accept loop on a listening socket; one connection served at a time per
  // thread. Stops when `stop` becomes true (checked between connections).
  void serve_listener(int listen_fd, std::atomic<bool>* stop = nullptr) const {
    while (!stop || !stop->load()) {
      const int conn = ::accept(listen_fd, nullptr, nullptr);
      if (conn < 0) {
        if (errno == EINTR) continue;
        break;
      }
      try {
        serve_fd(conn, conn);
      } catch (const std::exception&) {
        // Connection-level failure; keep accepting.
      }
      ::close(conn);
    }
  }

 private:
  void reply_error(int fd, const std::string& code, const std::string& message,
                   const nlohmann::json& req) const {
    nlohmann::json h{{"error", code}, {"message", message}};
    if (req.contains("request_id")) h["request_id"] = req["request_id"];
    wire::send_message(fd, h, {});
  }

  void handle(const wire::Message& msg, int out_fd) const {
    const nlohmann::json& req = msg.header;
    const std::string op = req.value("op", "");
    try {
      if (op == "info") {
        const InputSpec spec = oracle_.expected_input();
        nlohmann::json h{{"op", "info"},
                         {"encoder_id", oracle_.encoder_id()},
                         {"embedding_dim", 0}};
        if (spec.any_shape) {
          h["expected_input"] = "any";
        } else {
          h["expected_input"] = {spec.shape.height, spec.shape.width,
                                 spec.shape.channels};
          h["embedding_dim"] =
              oracle_.embedding_dim(spec.shape.height, spec.shape.width);
        }
        h["channels"] = spec.shape.channels;
        if (req.contains("request_id")) h["request_id"] = req["request_id"];
        wire::send_message(out_fd, h, {});
        return;
      }
      if (op != "forward" && op != "vjp") {
        reply_error(out_fd, "UNSUPPORTED_OP", "unknown op: " + op, req);
        return;
      }
      const auto shape = req.at("shape");
      const int h = shape.at(0).get<int>();
      const int w = shape.at(1).get<int>();
      const int c = shape.at(2).get<int>();
      if (h <= 0 || w <= 0 || c <= 0) {
        reply_error(out_fd, "SHAPE_MISMATCH", "non-positive dims", req);
        return;
      }
      const std::size_t img_floats =
          static_cast<std::size_t>(h) * w * static_cast<std::size_t>(c);
      const std::size_t img_bytes = img_floats * sizeof(float);

      if (op == "forward") {
        if (msg.payload.size() != img_bytes) {
          reply_error(out_fd, "SHAPE_MISMATCH",
                      "payload does not match declared shape", req);
          return;
        }
        Tensor3 x(h, w, c);
        const float* src = reinterpret_cast<const float*>(msg.payload.data());
        for (std::size_t i = 0; i < img_floats; ++i) {
          x.data()[i] = static_cast<double>(src[i]);
        }
        EmbeddingVector e;
        try {
          e = oracle_.forward(x);
        } catch (const std::invalid_argument& ex) {
          reply_error(out_fd, "SHAPE_MISMATCH", ex.what(), req);
          return;
        }
        nlohmann::json rh{{"op", "forward"},
                          {"embedding_dim", e.data.size()},
                          {"encoder_id", e.encoder_id}};
        if (req.contains("request_id")) rh["request_id"] = req["request_id"];
        const std::vector<float> payload = wire::doubles_to_f32(e.data);
        wire::send_message(out_fd, rh, {&payload});
        return;
      }

      // vjp
      const std::size_t n = req.at("embedding_dim").get<std::size_t>();
      if (msg.payload.size() != img_bytes + n * sizeof(float)) {
        reply_error(out_fd, "SHAPE_MISMATCH",
                    "payload does not match declared shapes", req);
        return;
      }
      Tensor3 x(h, w, c);
      const float* src = reinterpret_cast<const float*>(msg.payload.data());
      for (std::size_t i = 0; i < img_floats; ++i) {
        x.data()[i] = static_cast<double>(src[i]);
      }
      std::vector<double> cot(n);
      for (std::size_t i = 0; i < n; ++i) {
        cot[i] = static_cast<double>(src[img_floats + i]);
      }
      Tensor3 g;
      try {
        g = oracle_.vjp(x, cot);
      } catch (const std::invalid_argument& ex) {
        reply_error(out_fd, "SHAPE_MISMATCH", ex.what(), req);
        return;
      }
      nlohmann::json rh{{"op", "vjp"}, {"shape", {h, w, c}}};
      if (req.contains("request_id")) rh["request_id"] = req["request_id"];
      const std::vector<float> payload = wire::tensor_to_f32(g);
      wire::send_message(out_fd, rh, {&payload});
    } catch (const std::exception& ex) {
      reply_error(out_fd, "INTERNAL", ex.what(), req);
    }
  }

  const EncoderOracle& oracle_;
};

namespace detail {

inline int connect_tcp(const std::string& host, const std::string& port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0 || !res) {
    throw EncoderUnavailableError("cannot resolve " + host + ":" + port);
  }
  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  freeaddrinfo(res);
  if (fd < 0) {
    throw EncoderUnavailableError("cannot connect to " + host + ":" + port);
  }
  return fd;
}

inline int connect_unix(const std::string& path) {
  const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (fd < 0) throw EncoderUnavailableError("socket() failed");
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (path.size() >= sizeof(addr.sun_path)) {
    ::close(fd);
    throw EncoderUnavailableError("unix socket path too long");
  }
  std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw EncoderUnavailableError("cannot connect to unix socket " + path);
  }
  return fd;
}

}  // namespace detail

// Client side of the protocol; implements EncoderOracle over a connection.
// Requests are serialized per connection; open several clients for
// parallelism. Address forms: "host:port", "unix:/path", or an already
// connected descriptor pair.
class RemoteEncoderOracle : public EncoderOracle {
 public:
  explicit RemoteEncoderOracle(const std::string& address) {
    if (address.rfind("unix:", 0) == 0) {
      in_fd_ = out_fd_ = detail::connect_unix(address.substr(5));
      owns_ = true;
    } else {
      const std::size_t colon = address.find_last_of(':');
      if (colon == std::string::npos) {
        throw EncoderUnavailableError("bad gradient service address: " +
                                      address);
      }
      in_fd_ = out_fd_ =
          detail::connect_tcp(address.substr(0, colon), address.substr(colon + 1));
      owns_ = true;
    }
    fetch_info();
  }

  // Attach to an existing duplex channel (tests, spawned subprocesses).
  RemoteEncoderOracle(int in_fd, int out_fd, bool take_ownership)
      : in_fd_(in_fd), out_fd_(out_fd), owns_(take_ownership) {
    fetch_info();
  }

  ~RemoteEncoderOracle() override {
    if (owns_) {
      if (out_fd_ != in_fd_) ::close(out_fd_);
      ::close(in_fd_);
    }
  }
  RemoteEncoderOracle(const RemoteEncoderOracle&) = delete;
  RemoteEncoderOracle& operator=(const RemoteEncoderOracle&) = delete;

  const std::string& encoder_id() const override { return encoder_id_; }
  InputSpec expected_input() const override { return spec_; }

  int embedding_dim(int height, int width) const override {
    if (fixed_dim_ > 0) return fixed_dim_;
    const auto key = std::pair<int, int>{height, width};
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = dim_cache_.find(key);
      if (it != dim_cache_.end()) return it->second;
    }
    Tensor3 zeros(height, width,
                  spec_.shape.channels > 0 ? spec_.shape.channels : 3, 0.0);
    return static_cast<int>(forward(zeros).data.size());
  }

  EmbeddingVector forward(const Tensor3& x) const override {
    std::lock_guard<std::mutex> lock(mu_);
    nlohmann::json h{{"op", "forward"},
                     {"shape", {x.height(), x.width(), x.channels()}},
                     {"request_id", next_id()}};
    const std::vector<float> img = wire::tensor_to_f32(x);
    wire::send_message(out_fd_, h, {&img});
    wire::Message resp;
    if (!wire::recv_message(in_fd_, resp)) {
      throw EncoderUnavailableError("gradient service closed the connection");
    }
    raise_if_error(resp.header);
    const std::size_t n = resp.header.at("embedding_dim").get<std::size_t>();
    if (resp.payload.size() != n * sizeof(float)) {
      throw EncoderUnavailableError("forward payload length mismatch");
    }
    EmbeddingVector e;
    e.encoder_id = encoder_id_;
    e.data.resize(n);
    const float* src = reinterpret_cast<const float*>(resp.payload.data());
    for (std::size_t i = 0; i < n; ++i) e.data[i] = static_cast<double>(src[i]);
    dim_cache_[{x.height(), x.width()}] = static_cast<int>(n);
    return e;
  }

  Tensor3 vjp(const Tensor3& x,
              const std::vector<double>& cotangent) const override {
    std::lock_guard<std::mutex> lock(mu_);
    nlohmann::json h{{"op", "vjp"},
                     {"shape", {x.height(), x.width(), x.channels()}},
                     {"embedding_dim", cotangent.size()},
                     {"request_id", next_id()}};
    const std::vector<float> img = wire::tensor_to_f32(x);
    const std::vector<float> cot = wire::doubles_to_f32(cotangent);
    wire::send_message(out_fd_, h, {&img, &cot});
    wire::Message resp;
    if (!wire::recv_message(in_fd_, resp)) {
      throw EncoderUnavailableError("gradient service closed the connection");
    }
    raise_if_error(resp.header);
    const std::size_t n = x.size();
    if (resp.payload.size() != n * sizeof(float)) {
      throw EncoderUnavailableError("vjp payload length mismatch");
    }
    Tensor3 g(x.height(), x.width(), x.channels());
    const float* src = reinterpret_cast<const float*>(resp.payload.data());
    for (std::size_t i = 0; i < n; ++i) g.data()[i] = static_cast<double>(src[i]);
    return g;
  }

 private:
  static void raise_if_error(const nlohmann::json& h) {
    if (!h.contains("error")) return;
    const std::string code = h["error"].get<std::string>();
    const std::string message = h.value("message", "");
    if (code == "SHAPE_MISMATCH") throw std::invalid_argument(message);
    throw EncoderUnavailableError(code + ": " + message);
  }

  std::string next_id() const {
    return "r" + std::to_string(++request_counter_);
  }

  void fetch_info() {
    std::lock_guard<std::mutex> lock(mu_);
    nlohmann::json h{{"op", "info"}, {"request_id", next_id()}};
    wire::send_message(out_fd_, h, {});
    wire::Message resp;
    if (!wire::recv_message(in_fd_, resp)) {
      throw EncoderUnavailableError("gradient service closed the connection");
    }
    raise_if_error(resp.header);
    encoder_id_ = resp.header.at("encoder_id").get<std::string>();
    const auto& exp = resp.header.at("expected_input");
    if (exp.is_string() && exp.get<std::string>() == "any") {
      spec_.any_shape = true;
      spec_.shape.channels = resp.header.value("channels", 3);
    } else {
      spec_.any_shape = false;
      spec_.shape.height = exp.at(0).get<int>();
      spec_.shape.width = exp.at(1).get<int>();
      spec_.shape.channels = exp.at(2).get<int>();
    }
    fixed_dim_ = resp.header.value("embedding_dim", 0);
  }

  int in_fd_ = -1;
  int out_fd_ = -1;
  bool owns_ = false;
  std::string encoder_id_;
  InputSpec spec_;
  int fixed_dim_ = 0;
  mutable std::mutex mu_;
  mutable std::uint64_t request_counter_ = 0;
  mutable std::map<std::pair<int, int>, int> dim_cache_;
};

// Spawn `argv` as a child process and speak the protocol over its stdio.
// Returns the oracle plus the child pid for reaping.
struct SpawnedOracle {
  std::unique_ptr<RemoteEncoderOracle> oracle;
  pid_t pid = -1;

  SpawnedOracle() = default;
  SpawnedOracle(SpawnedOracle&& o) noexcept
      : oracle(std::move(o.oracle)), pid(o.pid) {
    o.pid = -1;
  }
  SpawnedOracle& operator=(SpawnedOracle&& o) noexcept {
    if (this != &o) {
      reap();
      oracle = std::move(o.oracle);
      pid = o.pid;
      o.pid = -1;
    }
    return *this;
  }

  ~SpawnedOracle() { reap(); }

 private:
  void reap() {
    oracle.reset();  // closes pipes first so the child sees EOF
    if (pid > 0) {
      int status = 0;
      ::waitpid(pid, &status, 0);
      pid = -1;
    }
  }
};

inline SpawnedOracle spawn_gradient_service(
    const std::vector<std::string>& argv) {
  int to_child[2];
  int from_child[2];
  if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) {
    throw EncoderUnavailableError("pipe() failed");
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw EncoderUnavailableError("fork() failed");
  if (pid == 0) {
    ::dup2(to_child[0], 0);
    ::dup2(from_child[1], 1);
    ::close(to_child[0]);
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::close(from_child[1]);
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  SpawnedOracle out;
  out.pid = pid;
  out.oracle = std::make_unique<RemoteEncoderOracle>(from_child[0],
                                                     to_child[1], true);
  return out;
}

}  // namespace fb
