#pragma once

// Deterministic, replayable event log of one full decode. Replaying the
// expand/commit/remask events against a fresh state reproduces the final
// sequence byte for byte; the remaining event kinds carry bookkeeping
// (schedule snapshots, weld intervals, instability updates, budget
// accounting) that verification and metrics read back.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dystruct/core.hpp"

namespace dystruct {

// ============================================================================
// Events
// ============================================================================

struct ExpandEvent {
  int t = 0;
  double mu = 0.0;
  int length = 0;
};

struct DiagEvent {
  int t = 0;
  int steps = 0;  // each diagnostic step is one denoiser call and one iteration
};

struct PartitionEvent {
  int t = 0;
  int start = 0;   // window start, global response index
  int length = 0;  // window length
  std::vector<int> cuts;  // window-local gap indices with b_g = 1
};

struct SelectEvent {
  int block = 0;  // index within the window's partition
  double H = 0.0;
  double C = 0.0;
  double rho = 0.0;
  int T = 0;  // refinement steps actually charged for this block
};

// One denoiser predict call over n masked positions.
struct PassEvent {
  int n = 0;
};

struct CommitEvent {
  int pos = 0;
  TokenId tok = -1;
  double conf = 0.0;
};

struct RemaskEvent {
  std::vector<int> positions;
};

struct WeldEvent {
  int begin = 0;  // half-open interval, global response indices
  int end = 0;
  int steps = 0;
};

struct HbarEvent {
  double v = 0.5;    // window-centred mean instability (drives Eq. 1)
  double raw = 0.5;  // uncentred mean sigma(u_j), recorded for monitoring
};

struct StopEvent {
  std::string reason;  // eos | n_max | budget
};

using Event = std::variant<ExpandEvent, DiagEvent, PartitionEvent, SelectEvent, PassEvent,
                           CommitEvent, RemaskEvent, WeldEvent, HbarEvent, StopEvent>;

// ============================================================================
// Transcript
// ============================================================================

struct DecodeTranscript {
  nlohmann::json config = nlohmann::json::object();  // full RunConfig + vocab
  std::vector<TokenId> prompt;
  std::vector<Event> events;

  int count_passes() const {
    int n = 0;
    for (const auto& e : events) {
      if (std::holds_alternative<PassEvent>(e)) ++n;
    }
    return n;
  }

  /// Total denoiser calls: predict passes plus one call per diagnostic step.
  int derived_calls() const {
    int n = count_passes();
    for (const auto& e : events) {
      if (const auto* d = std::get_if<DiagEvent>(&e)) n += d->steps;
    }
    return n;
  }

  /// Budget-ledger iterations: diagnostic steps + charged block refinement
  /// steps + weld steps. Forced-commit passes are calls, not iterations.
  int derived_iterations() const {
    int n = 0;
    for (const auto& e : events) {
      if (const auto* d = std::get_if<DiagEvent>(&e)) n += d->steps;
      if (const auto* s = std::get_if<SelectEvent>(&e)) n += s->T;
      if (const auto* w = std::get_if<WeldEvent>(&e)) n += w->steps;
    }
    return n;
  }

  int total_blocks() const {
    int n = 0;
    for (const auto& e : events) {
      if (const auto* p = std::get_if<PartitionEvent>(&e)) n += static_cast<int>(p->cuts.size()) + 1;
    }
    return n;
  }

  std::string stop_reason() const {
    for (const auto& e : events) {
      if (const auto* s = std::get_if<StopEvent>(&e)) return s->reason;
    }
    return "";
  }
};

// ============================================================================
// JSON
// ============================================================================

namespace transcript_json {

using json = nlohmann::json;

inline json event_to_json(const Event& event) {
  json j;
  std::visit(
      [&j](const auto& e) {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, ExpandEvent>) {
          j = json{{"kind", "expand"}, {"t", e.t}, {"mu", e.mu}, {"L", e.length}};
        } else if constexpr (std::is_same_v<T, DiagEvent>) {
          j = json{{"kind", "diag"}, {"t", e.t}, {"steps", e.steps}};
        } else if constexpr (std::is_same_v<T, PartitionEvent>) {
          j = json{{"kind", "partition"}, {"t", e.t}, {"start", e.start}, {"L", e.length},
                   {"cuts", e.cuts}};
        } else if constexpr (std::is_same_v<T, SelectEvent>) {
          j = json{{"kind", "select"}, {"block", e.block}, {"H", e.H}, {"C", e.C},
                   {"rho", e.rho}, {"T", e.T}};
        } else if constexpr (std::is_same_v<T, PassEvent>) {
          j = json{{"kind", "pass"}, {"n", e.n}};
        } else if constexpr (std::is_same_v<T, CommitEvent>) {
          j = json{{"kind", "commit"}, {"pos", e.pos}, {"tok", e.tok}, {"conf", e.conf}};
        } else if constexpr (std::is_same_v<T, RemaskEvent>) {
          j = json{{"kind", "remask"}, {"pos", e.positions}};
        } else if constexpr (std::is_same_v<T, WeldEvent>) {
          j = json{{"kind", "weld"}, {"interval", json::array({e.begin, e.end})},
                   {"steps", e.steps}};
        } else if constexpr (std::is_same_v<T, HbarEvent>) {
          j = json{{"kind", "hbar"}, {"v", e.v}, {"raw", e.raw}};
        } else if constexpr (std::is_same_v<T, StopEvent>) {
          j = json{{"kind", "stop"}, {"reason", e.reason}};
        }
      },
      event);
  return j;
}

inline Event event_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "expand") {
    return ExpandEvent{j.at("t").get<int>(), j.at("mu").get<double>(), j.at("L").get<int>()};
  }
  if (kind == "diag") {
    return DiagEvent{j.at("t").get<int>(), j.at("steps").get<int>()};
  }
  if (kind == "partition") {
    return PartitionEvent{j.at("t").get<int>(), j.at("start").get<int>(), j.at("L").get<int>(),
                          j.at("cuts").get<std::vector<int>>()};
  }
  if (kind == "select") {
    return SelectEvent{j.at("block").get<int>(), j.at("H").get<double>(), j.at("C").get<double>(),
                       j.at("rho").get<double>(), j.at("T").get<int>()};
  }
  if (kind == "pass") {
    return PassEvent{j.at("n").get<int>()};
  }
  if (kind == "commit") {
    return CommitEvent{j.at("pos").get<int>(), j.at("tok").get<TokenId>(),
                       j.at("conf").get<double>()};
  }
  if (kind == "remask") {
    return RemaskEvent{j.at("pos").get<std::vector<int>>()};
  }
  if (kind == "weld") {
    const auto& iv = j.at("interval");
    return WeldEvent{iv.at(0).get<int>(), iv.at(1).get<int>(), j.at("steps").get<int>()};
  }
  if (kind == "hbar") {
    return HbarEvent{j.at("v").get<double>(), j.at("raw").get<double>()};
  }
  if (kind == "stop") {
    return StopEvent{j.at("reason").get<std::string>()};
  }
  raise(Errc::io_error, "unknown transcript event kind: " + kind);
}

}  // namespace transcript_json

inline nlohmann::json transcript_to_json(const DecodeTranscript& t) {
  nlohmann::json j;
  j["config"] = t.config;
  j["prompt"] = t.prompt;
  nlohmann::json events = nlohmann::json::array();
  for (const Event& e : t.events) events.push_back(transcript_json::event_to_json(e));
  j["events"] = std::move(events);
  return j;
}

inline DecodeTranscript transcript_from_json(const nlohmann::json& j) {
  DecodeTranscript t;
  t.config = j.at("config");
  t.prompt = j.at("prompt").get<std::vector<TokenId>>();
  for (const auto& je : j.at("events")) t.events.push_back(transcript_json::event_from_json(je));
  return t;
}

// ============================================================================
// Replay and verification
// ============================================================================

/// Applies the state-changing events to a fresh sequence. The result must be
/// byte-identical to the decoder's final state.
inline SequenceState replay_transcript(const DecodeTranscript& t) {
  const auto& vc = t.config.at("vocab");
  Vocab vocab{vc.at("size").get<std::int32_t>(), vc.at("mask_id").get<TokenId>(),
              vc.at("eos_id").get<TokenId>()};
  const int n_max = t.config.at("n_max").get<int>();
  SequenceState state(vocab, t.prompt, n_max);
  for (const Event& e : t.events) {
    if (const auto* ex = std::get_if<ExpandEvent>(&e)) {
      state.append_window(ex->length);
    } else if (const auto* c = std::get_if<CommitEvent>(&e)) {
      state.commit(c->pos, c->tok);
    } else if (const auto* r = std::get_if<RemaskEvent>(&e)) {
      state.remask(r->positions);
    }
  }
  return state;
}

/// Checks that every remask/commit between a weld event and the next
/// non-weld-phase event stays inside the weld interval.
inline bool weld_mutations_local(const DecodeTranscript& t) {
  bool in_weld = false;
  int begin = 0, end = 0;
  for (const Event& e : t.events) {
    if (const auto* w = std::get_if<WeldEvent>(&e)) {
      in_weld = true;
      begin = w->begin;
      end = w->end;
    } else if (std::holds_alternative<ExpandEvent>(e) || std::holds_alternative<DiagEvent>(e) ||
               std::holds_alternative<PartitionEvent>(e) ||
               std::holds_alternative<SelectEvent>(e) || std::holds_alternative<HbarEvent>(e) ||
               std::holds_alternative<StopEvent>(e)) {
      in_weld = false;
    } else if (in_weld) {
      if (const auto* c = std::get_if<CommitEvent>(&e)) {
        if (c->pos < begin || c->pos >= end) return false;
      }
      if (const auto* r = std::get_if<RemaskEvent>(&e)) {
        for (int pos : r->positions) {
          if (pos < begin || pos >= end) return false;
        }
      }
    }
  }
  return true;
}

}  // namespace dystruct
