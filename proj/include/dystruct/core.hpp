#pragma once

// Vocabulary, sequence/mask state and error plumbing shared by every other
// component. A SequenceState is a committed prompt plus a growing response of
// cells, each either a committed token or masked, organised into append-only
// windows.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dystruct {

using TokenId = std::int32_t;

// ============================================================================
// Errors
// ============================================================================

enum class Errc {
  limit_exceeded,
  out_of_range,
  invalid_token,
  incomplete_decode,
  protocol_error,
  version_mismatch,
  malformed_distribution,
  dimension_mismatch,
  degenerate_labels,
  non_finite_loss,
  bad_argument,
  io_error,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool ok, Errc code, const std::string& msg) {
  if (!ok) raise(code, msg);
}

// ============================================================================
// Vocabulary
// ============================================================================

struct Vocab {
  std::int32_t size = 0;
  TokenId mask_id = 0;
  TokenId eos_id = 0;

  void validate() const {
    require(size > 0, Errc::bad_argument, "vocab size must be positive");
    require(mask_id != eos_id, Errc::bad_argument, "mask_id must differ from eos_id");
    require(mask_id >= 0 && mask_id < size, Errc::bad_argument, "mask_id out of vocab");
    require(eos_id >= 0 && eos_id < size, Errc::bad_argument, "eos_id out of vocab");
  }
};

// ============================================================================
// Cells and windows
// ============================================================================

// A response cell: committed token or masked. Masked is the -1 sentinel so a
// vector<Cell> stays trivially copyable.
struct Cell {
  TokenId token = -1;

  static Cell masked() { return Cell{-1}; }
  static Cell of(TokenId t) { return Cell{t}; }

  bool committed() const { return token >= 0; }
  bool operator==(const Cell&) const = default;
};

struct WindowSpan {
  int start = 0;
  int length = 0;

  int end() const { return start + length; }
  bool contains(int pos) const { return pos >= start && pos < end(); }
  bool operator==(const WindowSpan&) const = default;
};

// ============================================================================
// SequenceState
// ============================================================================

/**
 * Prompt plus response cells with window bookkeeping.
 *
 * Invariants enforced here:
 *  - the prompt never mutates,
 *  - |response| <= n_max,
 *  - window spans are contiguous, non-overlapping and tile [0, |response|),
 *  - committed tokens are valid vocab ids and never the mask id.
 *
 * Mutations are plain state changes; the decoding drivers are responsible for
 * mirroring every commit/remask into their transcript event log.
 */
class SequenceState {
 public:
  SequenceState(Vocab vocab, std::vector<TokenId> prompt, int n_max)
      : vocab_(vocab), prompt_(std::move(prompt)), n_max_(n_max) {
    vocab_.validate();
    require(n_max_ >= 0, Errc::bad_argument, "n_max must be non-negative");
    for (TokenId t : prompt_) {
      require(t >= 0 && t < vocab_.size, Errc::invalid_token, "prompt token out of vocab");
    }
  }

  const Vocab& vocab() const { return vocab_; }
  const std::vector<TokenId>& prompt() const { return prompt_; }
  const std::vector<Cell>& response() const { return response_; }
  const std::vector<WindowSpan>& windows() const { return windows_; }
  int n_max() const { return n_max_; }
  int size() const { return static_cast<int>(response_.size()); }
  int headroom() const { return n_max_ - size(); }

  const Cell& cell(int pos) const {
    require(pos >= 0 && pos < size(), Errc::out_of_range, "cell position out of range");
    return response_[static_cast<std::size_t>(pos)];
  }

  /// Appends `length` masked cells as a new window and returns its span.
  WindowSpan append_window(int length) {
    require(length > 0, Errc::bad_argument, "window length must be positive");
    require(size() + length <= n_max_, Errc::limit_exceeded,
            "append_window: |response| + L exceeds n_max (" + std::to_string(size()) + " + " +
                std::to_string(length) + " > " + std::to_string(n_max_) + ")");
    WindowSpan span{size(), length};
    response_.resize(response_.size() + static_cast<std::size_t>(length), Cell::masked());
    windows_.push_back(span);
    check_windows_tile();
    return span;
  }

  void commit(int pos, TokenId token) {
    require(pos >= 0 && pos < size(), Errc::out_of_range, "commit: position out of range");
    require(token != vocab_.mask_id, Errc::invalid_token, "commit: cannot commit the mask token");
    require(token >= 0 && token < vocab_.size, Errc::invalid_token, "commit: token out of vocab");
    response_[static_cast<std::size_t>(pos)] = Cell::of(token);
  }

  void remask(std::span<const int> positions) {
    for (int pos : positions) {
      require(pos >= 0 && pos < size(), Errc::out_of_range, "remask: position out of range");
    }
    for (int pos : positions) {
      response_[static_cast<std::size_t>(pos)] = Cell::masked();
    }
  }

  bool has_committed_eos() const {
    for (const Cell& c : response_) {
      if (c.committed() && c.token == vocab_.eos_id) return true;
    }
    return false;
  }

  bool window_fully_committed(const WindowSpan& w) const {
    for (int pos = w.start; pos < w.end(); ++pos) {
      if (!response_[static_cast<std::size_t>(pos)].committed()) return false;
    }
    return true;
  }

  /// Committed tokens up to and excluding the first EOS; the full committed
  /// response when no EOS was generated. A masked cell before that point is an
  /// incomplete decode.
  std::vector<TokenId> truncate_at_first_eos() const {
    std::vector<TokenId> out;
    out.reserve(response_.size());
    for (const Cell& c : response_) {
      if (!c.committed()) {
        raise(Errc::incomplete_decode, "truncate_at_first_eos: masked cell before first EOS");
      }
      if (c.token == vocab_.eos_id) return out;
      out.push_back(c.token);
    }
    return out;
  }

 private:
  void check_windows_tile() const {
    int expected = 0;
    for (const WindowSpan& w : windows_) {
      require(w.start == expected && w.length > 0, Errc::bad_argument,
              "window spans must tile the response");
      expected = w.end();
    }
    require(expected == size(), Errc::bad_argument, "window spans must cover the response");
  }

  Vocab vocab_;
  std::vector<TokenId> prompt_;
  std::vector<Cell> response_;
  std::vector<WindowSpan> windows_;
  int n_max_ = 0;
};

}  // namespace dystruct
