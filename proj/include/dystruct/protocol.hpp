#pragma once

// Line-delimited JSON protocol for attaching an external denoiser as a
// subprocess (or any byte stream). One request per line, one response per
// line, strictly ordered.
//
//   request  {"v":1,"prompt":[ids],"cells":[{"t":id}|null,...],"query":[pos,...]}
//   response {"v":1,"preds":[{"pos":p,"topk":[[id,prob],...],"tail":m,"hidden":[f32...]?},...]}
//   error    {"v":1,"error":"msg"}
//
// The handshake is a {"v":1,"hello":true} request answered with
// {"v":1,"descriptor":{...}}; it reports the vocabulary, the hidden dimension
// (absent when the model exposes no hidden states) and whether the model is
// deterministic.

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dystruct/core.hpp"
#include "dystruct/denoiser.hpp"

namespace dystruct {

inline constexpr int kProtocolVersion = 1;

// ============================================================================
// Message encoding
// ============================================================================

namespace wire {

using json = nlohmann::json;

inline std::string encode_hello() {
  json j;
  j["v"] = kProtocolVersion;
  j["hello"] = true;
  return j.dump();
}

inline std::string encode_predict_request(std::span<const TokenId> prompt,
                                          std::span<const Cell> cells,
                                          std::span<const int> positions) {
  json j;
  j["v"] = kProtocolVersion;
  j["prompt"] = std::vector<TokenId>(prompt.begin(), prompt.end());
  json jcells = json::array();
  for (const Cell& c : cells) {
    if (c.committed()) {
      jcells.push_back(json{{"t", c.token}});
    } else {
      jcells.push_back(nullptr);
    }
  }
  j["cells"] = std::move(jcells);
  j["query"] = std::vector<int>(positions.begin(), positions.end());
  return j.dump();
}

inline std::string encode_error(const std::string& msg) {
  json j;
  j["v"] = kProtocolVersion;
  j["error"] = msg;
  return j.dump();
}

inline std::string encode_descriptor(const DenoiserDescriptor& d) {
  json j;
  j["v"] = kProtocolVersion;
  json desc;
  desc["vocab"] = d.vocab.size;
  desc["mask_id"] = d.vocab.mask_id;
  desc["eos_id"] = d.vocab.eos_id;
  if (d.hidden_dim) {
    desc["hidden_dim"] = *d.hidden_dim;
  } else {
    desc["hidden_dim"] = nullptr;
  }
  desc["deterministic"] = d.deterministic;
  j["descriptor"] = std::move(desc);
  return j.dump();
}

inline std::string encode_predictions(std::span<const Prediction> preds) {
  json j;
  j["v"] = kProtocolVersion;
  json arr = json::array();
  for (const Prediction& p : preds) {
    json jp;
    jp["pos"] = p.position;
    json topk = json::array();
    for (const auto& [id, prob] : p.dist.topk) topk.push_back(json::array({id, prob}));
    jp["topk"] = std::move(topk);
    jp["tail"] = p.dist.tail;
    if (p.hidden) jp["hidden"] = *p.hidden;
    arr.push_back(std::move(jp));
  }
  j["preds"] = std::move(arr);
  return j.dump();
}

inline json parse_line(const std::string& line) {
  json j = json::parse(line, nullptr, false);
  require(!j.is_discarded() && j.is_object(), Errc::protocol_error,
          "protocol: response is not a JSON object: " + line.substr(0, 120));
  return j;
}

}  // namespace wire

// ============================================================================
// Transports
// ============================================================================

class LineTransport {
 public:
  virtual ~LineTransport() = default;
  virtual void write_line(const std::string& line) = 0;
  /// Next line without the trailing newline; nullopt on clean EOF.
  virtual std::optional<std::string> read_line() = 0;
};

/// Spawns a child process and speaks the protocol over its stdin/stdout.
class SubprocessTransport final : public LineTransport {
 public:
  explicit SubprocessTransport(std::vector<std::string> argv, int timeout_ms = 30000)
      : timeout_ms_(timeout_ms) {
    require(!argv.empty(), Errc::bad_argument, "subprocess: empty argv");
    int to_child[2];
    int from_child[2];
    require(pipe(to_child) == 0 && pipe(from_child) == 0, Errc::io_error,
            "subprocess: pipe() failed");
    pid_ = fork();
    require(pid_ >= 0, Errc::io_error, "subprocess: fork() failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      std::vector<char*> cargv;
      cargv.reserve(argv.size() + 1);
      for (std::string& a : argv) cargv.push_back(a.data());
      cargv.push_back(nullptr);
      execvp(cargv[0], cargv.data());
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
  }

  ~SubprocessTransport() override {
    if (write_fd_ >= 0) close(write_fd_);
    if (read_fd_ >= 0) close(read_fd_);
    if (pid_ > 0) {
      int status = 0;
      if (waitpid(pid_, &status, WNOHANG) == 0) {
        kill(pid_, SIGTERM);
        waitpid(pid_, &status, 0);
      }
    }
  }

  SubprocessTransport(const SubprocessTransport&) = delete;
  SubprocessTransport& operator=(const SubprocessTransport&) = delete;

  void write_line(const std::string& line) override {
    std::string buf = line;
    buf.push_back('\n');
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t n = ::write(write_fd_, buf.data() + off, buf.size() - off);
      require(n > 0, Errc::io_error, "subprocess: write failed");
      off += static_cast<std::size_t>(n);
    }
  }

  std::optional<std::string> read_line() override {
    while (true) {
      const auto nl = pending_.find('\n');
      if (nl != std::string::npos) {
        std::string line = pending_.substr(0, nl);
        pending_.erase(0, nl + 1);
        return line;
      }
      pollfd pfd{read_fd_, POLLIN, 0};
      const int pr = poll(&pfd, 1, timeout_ms_);
      require(pr > 0, Errc::protocol_error,
              pr == 0 ? "subprocess: timeout waiting for response"
                      : "subprocess: poll failed");
      char chunk[4096];
      const ssize_t n = ::read(read_fd_, chunk, sizeof(chunk));
      if (n == 0) {
        if (pending_.empty()) return std::nullopt;
        std::string line = std::move(pending_);
        pending_.clear();
        return line;
      }
      require(n > 0, Errc::io_error, "subprocess: read failed");
      pending_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  int timeout_ms_;
  std::string pending_;
};

// ============================================================================
// Client
// ============================================================================

/**
 * Denoiser backed by a LineTransport. Single-owner: one request in flight at
 * a time; parallel workers each get their own client (and subprocess).
 */
class ExternalDenoiserClient final : public Denoiser {
 public:
  explicit ExternalDenoiserClient(std::unique_ptr<LineTransport> transport)
      : transport_(std::move(transport)) {}

  /// Exchanges the hello message and caches the descriptor. Raises
  /// version_mismatch when the peer speaks a different protocol version.
  const DenoiserDescriptor& handshake() {
    transport_->write_line(wire::encode_hello());
    const auto j = exchange_read("handshake");
    const auto& desc = j.at("descriptor");
    DenoiserDescriptor d;
    d.vocab.size = desc.at("vocab").get<std::int32_t>();
    d.vocab.mask_id = desc.at("mask_id").get<TokenId>();
    d.vocab.eos_id = desc.at("eos_id").get<TokenId>();
    if (desc.contains("hidden_dim") && !desc.at("hidden_dim").is_null()) {
      d.hidden_dim = desc.at("hidden_dim").get<int>();
    }
    if (desc.contains("deterministic")) d.deterministic = desc.at("deterministic").get<bool>();
    d.vocab.validate();
    descriptor_ = d;
    return *descriptor_;
  }

  DenoiserDescriptor descriptor() const override {
    require(descriptor_.has_value(), Errc::protocol_error,
            "external denoiser: descriptor requested before handshake");
    return *descriptor_;
  }

  std::vector<Prediction> predict(std::span<const TokenId> prompt, std::span<const Cell> cells,
                                  std::span<const int> positions) override {
    transport_->write_line(wire::encode_predict_request(prompt, cells, positions));
    const auto j = exchange_read("predict");
    std::vector<Prediction> out;
    const auto& preds = j.at("preds");
    require(preds.is_array(), Errc::protocol_error, "predict: preds is not an array");
    out.reserve(preds.size());
    for (const auto& jp : preds) {
      Prediction p;
      p.position = jp.at("pos").get<int>();
      for (const auto& atom : jp.at("topk")) {
        p.dist.topk.emplace_back(atom.at(0).get<TokenId>(), atom.at(1).get<double>());
      }
      p.dist.tail = jp.value("tail", 0.0);
      p.dist.sort_atoms();
      if (jp.contains("hidden") && !jp.at("hidden").is_null()) {
        p.hidden = jp.at("hidden").get<std::vector<float>>();
      }
      out.push_back(std::move(p));
    }
    return out;
  }

 private:
  wire::json exchange_read(const std::string& what) {
    const auto line = transport_->read_line();
    require(line.has_value(), Errc::protocol_error, what + ": peer closed the stream");
    wire::json j;
    try {
      j = wire::parse_line(*line);
    } catch (const Error&) {
      throw;
    }
    if (j.contains("v")) {
      const int v = j.at("v").get<int>();
      require(v == kProtocolVersion, Errc::version_mismatch,
              what + ": peer speaks protocol version " + std::to_string(v) + ", expected " +
                  std::to_string(kProtocolVersion));
    } else {
      raise(Errc::protocol_error, what + ": response missing version field");
    }
    if (j.contains("error")) {
      raise(Errc::protocol_error, what + ": peer error: " + j.at("error").get<std::string>());
    }
    return j;
  }

  std::unique_ptr<LineTransport> transport_;
  std::optional<DenoiserDescriptor> descriptor_;
};

// ============================================================================
// Server-side helper
// ============================================================================

/// Answers one protocol line against an in-process denoiser. Useful for
/// loopback tests and for exposing a built-in model to external tooling.
inline std::string serve_line(Denoiser& model, const std::string& line) {
  try {
    const auto j = wire::parse_line(line);
    if (j.contains("v")) {
      const int v = j.at("v").get<int>();
      if (v != kProtocolVersion) {
        return wire::encode_error("unsupported protocol version " + std::to_string(v));
      }
    }
    if (j.contains("hello")) {
      return wire::encode_descriptor(model.descriptor());
    }
    std::vector<TokenId> prompt = j.at("prompt").get<std::vector<TokenId>>();
    std::vector<Cell> cells;
    for (const auto& jc : j.at("cells")) {
      if (jc.is_null()) {
        cells.push_back(Cell::masked());
      } else {
        cells.push_back(Cell::of(jc.at("t").get<TokenId>()));
      }
    }
    std::vector<int> query = j.at("query").get<std::vector<int>>();
    const auto preds = model.predict(prompt, cells, query);
    return wire::encode_predictions(preds);
  } catch (const std::exception& e) {
    return wire::encode_error(e.what());
  }
}

}  // namespace dystruct
