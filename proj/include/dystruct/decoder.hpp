#pragma once

// The full structured decoding loop: adaptive window expansion, diagnostic
// pass, CRP MAP partitioning, context-aware block scheduling, blockwise
// refinement, edge-welding and the window instability update, all against a
// pluggable denoiser and a single global iteration budget.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dystruct/calibration.hpp"
#include "dystruct/core.hpp"
#include "dystruct/denoiser.hpp"
#include "dystruct/diagnostics.hpp"
#include "dystruct/partition.hpp"
#include "dystruct/rng.hpp"
#include "dystruct/scheduler.hpp"
#include "dystruct/transcript.hpp"

namespace dystruct {

// ============================================================================
// Configuration
// ============================================================================

enum class ScheduleMode { greedy, static_sort };

struct RunConfig {
  int l_min = 8;
  int l_max = 48;
  double alpha0 = 1.5;
  double gamma = 2.0;
  int t_min = 6;
  int t_max = 18;
  int r_weld = 4;        // Appendix-style default; 10 is the documented alternative
  int weld_steps = 4;
  int diag_steps = 4;    // K
  double commit_fraction = 0.25;
  int n_max = 256;
  int global_budget = 256;
  std::string weights_path;  // empty = built-in defaults
  std::uint64_t seed = 0;
  ScheduleMode schedule_mode = ScheduleMode::greedy;
  bool scheduling_enabled = true;  // false = fixed left-to-right block order
  bool welding_enabled = true;
  double weld_remask_fraction = 0.5;
  int temp_dist_step = 0;  // diagnostic step supplying p_temp; 0 = final

  // Monotonic confidence baseline knobs (harness module).
  double monotonic_threshold = 0.9;
  double monotonic_eos_threshold = 0.5;
  int monotonic_window = 32;

  void validate() const {
    require(l_min >= 1 && l_min <= l_max, Errc::bad_argument, "config: L_min must be in [1, L_max]");
    require(t_min >= 1 && t_min <= t_max, Errc::bad_argument, "config: T_min must be in [1, T_max]");
    require(r_weld >= 0, Errc::bad_argument, "config: r_weld must be >= 0");
    require(weld_steps >= 1, Errc::bad_argument, "config: weld_steps must be >= 1");
    require(diag_steps >= 2, Errc::bad_argument, "config: diagnostic pass needs >= 2 steps");
    require(commit_fraction > 0.0 && commit_fraction <= 1.0, Errc::bad_argument,
            "config: commit_fraction must be in (0, 1]");
    require(alpha0 > 0.0, Errc::bad_argument, "config: alpha0 must be positive");
    require(n_max >= 0 && global_budget >= 0, Errc::bad_argument,
            "config: n_max and budget must be non-negative");
    require(weld_remask_fraction >= 0.0 && weld_remask_fraction <= 1.0, Errc::bad_argument,
            "config: weld_remask_fraction must be in [0, 1]");
  }
};

inline std::string to_string(ScheduleMode m) {
  return m == ScheduleMode::greedy ? "greedy" : "static";
}

inline ScheduleMode schedule_mode_from_string(const std::string& s) {
  if (s == "greedy") return ScheduleMode::greedy;
  if (s == "static") return ScheduleMode::static_sort;
  raise(Errc::bad_argument, "unknown schedule mode: " + s);
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["l_min"] = c.l_min;
  j["l_max"] = c.l_max;
  j["alpha0"] = c.alpha0;
  j["gamma"] = c.gamma;
  j["t_min"] = c.t_min;
  j["t_max"] = c.t_max;
  j["r_weld"] = c.r_weld;
  j["weld_steps"] = c.weld_steps;
  j["diag_steps"] = c.diag_steps;
  j["commit_fraction"] = c.commit_fraction;
  j["n_max"] = c.n_max;
  j["global_budget"] = c.global_budget;
  j["weights_path"] = c.weights_path;
  j["seed"] = c.seed;
  j["schedule_mode"] = to_string(c.schedule_mode);
  j["scheduling_enabled"] = c.scheduling_enabled;
  j["welding_enabled"] = c.welding_enabled;
  j["weld_remask_fraction"] = c.weld_remask_fraction;
  j["temp_dist_step"] = c.temp_dist_step;
  j["monotonic_threshold"] = c.monotonic_threshold;
  j["monotonic_eos_threshold"] = c.monotonic_eos_threshold;
  j["monotonic_window"] = c.monotonic_window;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.l_min = j.value("l_min", c.l_min);
  c.l_max = j.value("l_max", c.l_max);
  c.alpha0 = j.value("alpha0", c.alpha0);
  c.gamma = j.value("gamma", c.gamma);
  c.t_min = j.value("t_min", c.t_min);
  c.t_max = j.value("t_max", c.t_max);
  c.r_weld = j.value("r_weld", c.r_weld);
  c.weld_steps = j.value("weld_steps", c.weld_steps);
  c.diag_steps = j.value("diag_steps", c.diag_steps);
  c.commit_fraction = j.value("commit_fraction", c.commit_fraction);
  c.n_max = j.value("n_max", c.n_max);
  c.global_budget = j.value("global_budget", c.global_budget);
  c.weights_path = j.value("weights_path", c.weights_path);
  c.seed = j.value("seed", c.seed);
  c.schedule_mode = schedule_mode_from_string(j.value("schedule_mode", std::string("greedy")));
  c.scheduling_enabled = j.value("scheduling_enabled", c.scheduling_enabled);
  c.welding_enabled = j.value("welding_enabled", c.welding_enabled);
  c.weld_remask_fraction = j.value("weld_remask_fraction", c.weld_remask_fraction);
  c.temp_dist_step = j.value("temp_dist_step", c.temp_dist_step);
  c.monotonic_threshold = j.value("monotonic_threshold", c.monotonic_threshold);
  c.monotonic_eos_threshold = j.value("monotonic_eos_threshold", c.monotonic_eos_threshold);
  c.monotonic_window = j.value("monotonic_window", c.monotonic_window);
  return c;
}

// ============================================================================
// Window sampling (Eq. 1 mechanics)
// ============================================================================

struct WindowDraw {
  int length = 0;
  double mu = 0.0;
};

/// mu = L_min + (1 - hbar_prev)(L_max - L_min); the Poisson draw is clipped
/// into [L_min, L_max] and then into the remaining headroom.
inline WindowDraw sample_window_length(double hbar_prev, int l_min, int l_max, SeedStream stream,
                                       int headroom) {
  require(hbar_prev >= 0.0 && hbar_prev <= 1.0, Errc::bad_argument,
          "sample_window_length: hbar outside [0,1]");
  require(headroom >= 1, Errc::limit_exceeded, "sample_window_length: no headroom left");
  WindowDraw draw;
  draw.mu = l_min + (1.0 - hbar_prev) * (l_max - l_min);
  const int raw = poisson_sample(draw.mu, stream);
  draw.length = std::min(std::clamp(raw, l_min, l_max), headroom);
  return draw;
}

// ============================================================================
// Decode driver: state + ledger + transcript + per-position history
// ============================================================================

/// Per-position record of the real decoding passes (diagnostics excluded).
struct PositionHistory {
  int scope_steps = 0;     // refinement steps whose working set contained the position
  int rejected_steps = 0;  // of those, steps where it stayed/became masked
  int predictions = 0;
  int flips = 0;           // argmax changes between consecutive predictions
  double jsd_sum = 0.0;    // step-JSD between consecutive predictions
  SparseDist last_dist;
  TokenId last_argmax = -1;
  double last_conf = 0.0;
  std::vector<float> last_hidden;
  bool remasked_ever = false;
};

class DecodeDriver {
 public:
  DecodeDriver(Denoiser& model, SequenceState state, const RunConfig& config)
      : model_(model), state_(std::move(state)), ledger_(config.global_budget) {
    transcript_.config = config_to_json(config);
    const Vocab& v = state_.vocab();
    transcript_.config["vocab"] = {{"size", v.size}, {"mask_id", v.mask_id}, {"eos_id", v.eos_id}};
    transcript_.prompt = state_.prompt();
  }

  Denoiser& model() { return model_; }
  SequenceState& state() { return state_; }
  const SequenceState& state() const { return state_; }
  BudgetLedger& ledger() { return ledger_; }
  DecodeTranscript& transcript() { return transcript_; }
  std::vector<PositionHistory>& history() { return history_; }
  int calls() const { return calls_; }
  void count_external_calls(int n) { calls_ += n; }

  WindowSpan expand(int t, double mu, int length) {
    const WindowSpan w = state_.append_window(length);
    history_.resize(static_cast<std::size_t>(state_.size()));
    transcript_.events.push_back(ExpandEvent{t, mu, length});
    return w;
  }

  /// One real refinement prediction: emits a pass event and folds the fresh
  /// predictions into the per-position history.
  std::vector<Prediction> predict_masked(std::span<const int> positions) {
    auto preds = checked_predict(model_, state_, positions);
    ++calls_;
    transcript_.events.push_back(PassEvent{static_cast<int>(positions.size())});
    const TokenId mask_id = state_.vocab().mask_id;
    for (const auto& pred : preds) {
      auto& hist = history_[static_cast<std::size_t>(pred.position)];
      const auto [tok, prob] = best_excluding(pred.dist, mask_id);
      if (hist.predictions > 0) {
        if (tok != hist.last_argmax) ++hist.flips;
        hist.jsd_sum += jsd(pred.dist, hist.last_dist);
      }
      ++hist.predictions;
      hist.last_dist = pred.dist;
      hist.last_argmax = tok;
      hist.last_conf = prob;
      if (pred.hidden) hist.last_hidden = *pred.hidden;
    }
    return preds;
  }

  void commit(int pos, TokenId tok, double conf) {
    state_.commit(pos, tok);
    transcript_.events.push_back(CommitEvent{pos, tok, conf});
  }

  void remask(std::vector<int> positions) {
    if (positions.empty()) return;
    state_.remask(positions);
    for (int pos : positions) history_[static_cast<std::size_t>(pos)].remasked_ever = true;
    transcript_.events.push_back(RemaskEvent{std::move(positions)});
  }

  std::vector<int> masked_in(int begin, int end) const {
    std::vector<int> out;
    for (int pos = begin; pos < end; ++pos) {
      if (!state_.cell(pos).committed()) out.push_back(pos);
    }
    return out;
  }

  std::vector<float> hidden_left_of(int pos) const {
    if (pos <= 0) return {};
    return history_[static_cast<std::size_t>(pos - 1)].last_hidden;
  }

 private:
  Denoiser& model_;
  SequenceState state_;
  BudgetLedger ledger_;
  DecodeTranscript transcript_;
  std::vector<PositionHistory> history_;
  int calls_ = 0;
};

// ============================================================================
// Block refinement, welding, forced commits
// ============================================================================

namespace detail {

// Commits the top `count` predictions by confidence, lower position first on
// ties. Returns how many were committed.
inline int commit_top(DecodeDriver& driver, const std::vector<Prediction>& preds, int count) {
  const TokenId mask_id = driver.state().vocab().mask_id;
  std::vector<std::pair<double, int>> ranked;  // (conf, index into preds)
  ranked.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ranked.emplace_back(best_excluding(preds[i].dist, mask_id).second, static_cast<int>(i));
  }
  std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return preds[static_cast<std::size_t>(a.second)].position <
           preds[static_cast<std::size_t>(b.second)].position;
  });
  const int n = std::min<int>(count, static_cast<int>(ranked.size()));
  // Deterministic event order: sort the chosen slice by position.
  std::vector<int> chosen;
  for (int i = 0; i < n; ++i) chosen.push_back(ranked[static_cast<std::size_t>(i)].second);
  std::sort(chosen.begin(), chosen.end(), [&](int a, int b) {
    return preds[static_cast<std::size_t>(a)].position < preds[static_cast<std::size_t>(b)].position;
  });
  for (int idx : chosen) {
    const auto& pred = preds[static_cast<std::size_t>(idx)];
    const auto [tok, prob] = best_excluding(pred.dist, mask_id);
    driver.commit(pred.position, tok, prob);
  }
  return n;
}

}  // namespace detail

/**
 * Refines one block: each step predicts the block's masked positions and
 * commits the top ceil(|B|/T) by confidence until the block is full. Returns
 * the number of steps actually run (<= T; the caller refunds the rest).
 */
inline int decode_block(DecodeDriver& driver, int begin, int end, int t_steps) {
  require(t_steps >= 1, Errc::bad_argument, "decode_block: needs at least one step");
  const int block_size = end - begin;
  const int per_step = (block_size + t_steps - 1) / t_steps;
  int steps = 0;
  while (true) {
    const auto masked = driver.masked_in(begin, end);
    if (masked.empty()) break;
    const auto preds = driver.predict_masked(masked);
    ++steps;
    const int committed = detail::commit_top(driver, preds, per_step);
    for (int pos = begin; pos < end; ++pos) {
      auto& hist = driver.history()[static_cast<std::size_t>(pos)];
      ++hist.scope_steps;
      if (!driver.state().cell(pos).committed()) ++hist.rejected_steps;
    }
    require(committed > 0, Errc::bad_argument, "decode_block: no commit progress");
  }
  require(steps <= t_steps, Errc::bad_argument, "decode_block: exceeded its step budget");
  return steps;
}

struct WeldInterval {
  int begin = 0;
  int end = 0;

  bool empty() const { return begin >= end; }
  int size() const { return std::max(0, end - begin); }
};

/// Eq.-style interval around the boundary b between [a,b) and [b,c):
/// [max(a, b - r), min(c, b + r)).
inline WeldInterval weld_interval(int a, int b, int c, int r_weld) {
  require(a <= b && b <= c, Errc::bad_argument, "weld_interval: blocks out of order");
  require(r_weld >= 0, Errc::bad_argument, "weld_interval: negative radius");
  return {std::max(a, b - r_weld), std::min(c, b + r_weld)};
}

/**
 * Edge-welding between two adjacent, fully committed blocks: remasks the
 * lowest-confidence committed positions inside the boundary interval (a
 * configured fraction, ties to the lower index, confidence taken from each
 * position's final pre-weld prediction) and refines them for up to
 * weld_steps steps. Positions outside the interval are never touched. The
 * weld event precedes its remask/commit events; locality checks key on that
 * ordering.
 */
inline void weld_boundary(DecodeDriver& driver, int a, int b, int c, const RunConfig& config) {
  const WeldInterval interval = weld_interval(a, b, c, config.r_weld);
  const int n_remask = static_cast<int>(interval.size() * config.weld_remask_fraction);
  if (interval.empty() || n_remask < 1) return;
  for (int pos = interval.begin; pos < interval.end; ++pos) {
    require(driver.state().cell(pos).committed(), Errc::bad_argument,
            "weld_boundary: interval cell not committed");
  }
  const int granted = driver.ledger().charge(config.weld_steps);
  if (granted == 0) return;

  std::vector<std::pair<double, int>> ranked;
  for (int pos = interval.begin; pos < interval.end; ++pos) {
    ranked.emplace_back(driver.history()[static_cast<std::size_t>(pos)].last_conf, pos);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first < y.first;
    return x.second < y.second;
  });
  std::vector<int> to_remask;
  for (int i = 0; i < n_remask; ++i) to_remask.push_back(ranked[static_cast<std::size_t>(i)].second);
  std::sort(to_remask.begin(), to_remask.end());

  const std::size_t event_slot = driver.transcript().events.size();
  driver.transcript().events.push_back(WeldEvent{interval.begin, interval.end, granted});
  driver.remask(to_remask);

  const int per_step = (n_remask + granted - 1) / granted;
  int steps = 0;
  while (true) {
    const auto masked = driver.masked_in(interval.begin, interval.end);
    if (masked.empty()) break;
    const auto preds = driver.predict_masked(masked);
    ++steps;
    detail::commit_top(driver, preds, per_step);
    for (int pos : masked) {
      auto& hist = driver.history()[static_cast<std::size_t>(pos)];
      ++hist.scope_steps;
      if (!driver.state().cell(pos).committed()) ++hist.rejected_steps;
    }
  }
  driver.ledger().refund(granted - steps);
  std::get<WeldEvent>(driver.transcript().events[event_slot]).steps = steps;
}

/// Budget-exhausted fallback: one prediction over everything still masked in
/// the window, committed by argmax. Counts as a call, not an iteration.
inline void forced_commit(DecodeDriver& driver, WindowSpan window) {
  const auto masked = driver.masked_in(window.start, window.end());
  if (masked.empty()) return;
  const auto preds = driver.predict_masked(masked);
  const TokenId mask_id = driver.state().vocab().mask_id;
  for (const auto& pred : preds) {
    const auto [tok, prob] = best_excluding(pred.dist, mask_id);
    driver.commit(pred.position, tok, prob);
    auto& hist = driver.history()[static_cast<std::size_t>(pred.position)];
    ++hist.scope_steps;
  }
}

// ============================================================================
// Window instability from the decode history
// ============================================================================

/// Recomputes the seven features over a fully committed window from the real
/// refinement history (not a fresh diagnostic pass) and returns the centred
/// mean instability plus the uncentred monitor value.
inline std::pair<double, double> finalize_window_instability(DecodeDriver& driver,
                                                             WindowSpan window,
                                                             std::span<const double> w) {
  const bool hidden_available = driver.model().descriptor().hidden_dim.has_value();
  std::vector<PositionFeatures> features;
  features.reserve(static_cast<std::size_t>(window.length));
  for (int pos = window.start; pos < window.end(); ++pos) {
    const auto& hist = driver.history()[static_cast<std::size_t>(pos)];
    require(hist.predictions > 0, Errc::bad_argument,
            "finalize_window_instability: position was never predicted");
    PositionFeatures f;
    f.entropy = entropy(hist.last_dist);
    f.confidence = hist.last_dist.top1();
    f.margin = margin(hist.last_dist);
    f.remask_freq = hist.scope_steps > 0
                        ? static_cast<double>(hist.rejected_steps) / hist.scope_steps
                        : 0.0;
    f.oscillation = static_cast<double>(hist.flips) / std::max(hist.predictions - 1, 1);
    f.mean_step_jsd = hist.jsd_sum / std::max(hist.predictions - 1, 1);
    if (hidden_available) {
      const auto left = driver.hidden_left_of(pos);
      f.hidden_jump = detail::mean_abs_diff(hist.last_hidden, left);
    }
    f.available[4] = hidden_available;
    features.push_back(f);
  }
  const auto prof = instability(features, w);
  return {prof.hbar, prof.hbar_raw};
}

// ============================================================================
// Full decoding loop
// ============================================================================

struct RunResult {
  std::vector<TokenId> tokens;  // committed output, truncated at the first EOS
  DecodeTranscript transcript;
  std::string stop_reason;
  int denoiser_calls = 0;
  int iterations_used = 0;
  double final_hbar = 0.5;

  // Raw material for calibration trajectories, aligned with the response.
  std::vector<std::array<double, 7>> position_phi;
  std::vector<std::array<std::uint8_t, 7>> position_avail;
  std::vector<std::uint8_t> position_remasked;
  std::vector<TokenId> committed_cells;
  std::vector<std::optional<std::array<double, 4>>> gap_psi;
};

class DecodeFailure : public Error {
 public:
  DecodeFailure(const Error& cause, DecodeTranscript partial)
      : Error(cause.code(), cause.what()), partial_transcript(std::move(partial)) {}

  DecodeTranscript partial_transcript;
};

inline RunResult run(Denoiser& model, std::span<const TokenId> prompt, const RunConfig& config,
                     const WeightsArtifact* weights = nullptr) {
  config.validate();
  require(!prompt.empty(), Errc::bad_argument, "run: prompt must be non-empty");

  WeightsArtifact local_weights;
  if (weights == nullptr) {
    if (!config.weights_path.empty()) local_weights = load_weights(config.weights_path);
    weights = &local_weights;
  }
  weights->validate();

  const DenoiserDescriptor descriptor = model.descriptor();
  DecodeDriver driver(model, SequenceState(descriptor.vocab, {prompt.begin(), prompt.end()},
                                           config.n_max),
                      config);
  const SeedStream root(config.seed);

  DiagnosticConfig diag_cfg;
  diag_cfg.steps = config.diag_steps;
  diag_cfg.commit_fraction = config.commit_fraction;
  diag_cfg.temp_dist_step = config.temp_dist_step;

  RunResult result;
  double hbar_prev = 0.5;
  std::string stop_reason;

  try {
    for (int t = 1;; ++t) {
      if (driver.state().has_committed_eos()) {
        stop_reason = "eos";
        break;
      }
      if (driver.state().headroom() < 1) {
        stop_reason = "n_max";
        break;
      }

      const WindowDraw draw = sample_window_length(hbar_prev, config.l_min, config.l_max,
                                                   root.derive("window", static_cast<std::uint64_t>(t)),
                                                   driver.state().headroom());
      const WindowSpan window = driver.expand(t, draw.mu, draw.length);
      bool forced = false;

      if (driver.ledger().remaining() < config.diag_steps) {
        // Not enough budget for even the diagnostic pass: one forced pass.
        forced_commit(driver, window);
        forced = true;
      } else {
        driver.ledger().charge(config.diag_steps);
        const auto trace = run_diagnostic_pass(driver.model(), driver.state(), window, diag_cfg,
                                               driver.hidden_left_of(window.start));
        driver.count_external_calls(config.diag_steps);
        driver.transcript().events.push_back(DiagEvent{t, config.diag_steps});

        const auto features = window_features(trace, descriptor.vocab.size);
        const auto profile = instability(features, weights->w);

        Partition part;
        EdgeProfile edges;
        if (window.length >= 2) {
          edges = edge_scores(trace, profile, weights->w_b);
          const auto alphas = local_alphas(config.alpha0, hbar_prev, edges.logit);
          part = map_partition(edges.q, alphas);
        } else {
          part.length = 1;
          part.blocks.push_back({0, 1});
        }
        {
          PartitionEvent pe;
          pe.t = t;
          pe.start = window.start;
          pe.length = window.length;
          const auto cuts = cuts_from_blocks(part);
          for (std::size_t g = 0; g < cuts.size(); ++g) {
            if (cuts[g]) pe.cuts.push_back(static_cast<int>(g));
          }
          driver.transcript().events.push_back(std::move(pe));
        }

        // Calibration material: diagnostic features per position and gap.
        result.position_phi.resize(static_cast<std::size_t>(driver.state().size()));
        result.position_avail.resize(static_cast<std::size_t>(driver.state().size()));
        result.gap_psi.resize(driver.state().size() > 0
                                  ? static_cast<std::size_t>(driver.state().size() - 1)
                                  : 0);
        for (int j = 0; j < window.length; ++j) {
          const auto& f = features[static_cast<std::size_t>(j)];
          result.position_phi[static_cast<std::size_t>(window.start + j)] = f.as_vector();
          std::array<std::uint8_t, 7> avail{};
          for (int i = 0; i < 7; ++i) avail[static_cast<std::size_t>(i)] = f.available[static_cast<std::size_t>(i)] ? 1 : 0;
          result.position_avail[static_cast<std::size_t>(window.start + j)] = avail;
        }
        for (int g = 0; g + 1 < window.length; ++g) {
          result.gap_psi[static_cast<std::size_t>(window.start + g)] = edges.psi[static_cast<std::size_t>(g)];
        }

        // Scheduling + blockwise resolution.
        const int M = part.block_count();
        std::vector<std::uint8_t> decoded(static_cast<std::size_t>(M), 0);
        std::vector<Selection> static_order;
        if (config.scheduling_enabled && config.schedule_mode == ScheduleMode::static_sort) {
          static_order = static_schedule(part, profile.h, driver.state(), window, config.gamma);
        }
        for (int round = 0; round < M; ++round) {
          Selection sel;
          if (!config.scheduling_enabled) {
            sel.block = round;
            sel.stats = compute_block_stats(part, profile.h, driver.state(), window,
                                            config.gamma)[static_cast<std::size_t>(round)];
          } else if (config.schedule_mode == ScheduleMode::static_sort) {
            sel = static_order[static_cast<std::size_t>(round)];
            sel.stats = compute_block_stats(part, profile.h, driver.state(), window,
                                            config.gamma)[static_cast<std::size_t>(sel.block)];
          } else {
            sel = next_block(part, profile.h, driver.state(), window, decoded, config.gamma);
          }
          decoded[static_cast<std::size_t>(sel.block)] = 1;

          const int granted = refinement_budget(sel.stats.H, config.t_min, config.t_max,
                                                driver.ledger());
          if (granted == 0) {
            forced_commit(driver, window);
            forced = true;
            break;
          }
          const Block& blk = part.blocks[static_cast<std::size_t>(sel.block)];
          const int used = decode_block(driver, window.start + blk.begin, window.start + blk.end,
                                        granted);
          driver.ledger().refund(granted - used);
          driver.transcript().events.push_back(
              SelectEvent{sel.block, sel.stats.H, sel.stats.C, sel.stats.rho, used});
        }

        if (!forced && config.welding_enabled) {
          for (int m = 0; m + 1 < M; ++m) {
            const Block& left = part.blocks[static_cast<std::size_t>(m)];
            const Block& right = part.blocks[static_cast<std::size_t>(m + 1)];
            weld_boundary(driver, window.start + left.begin, window.start + left.end,
                          window.start + right.end, config);
          }
        }
      }

      const auto [hbar, hbar_raw] = finalize_window_instability(driver, window, weights->w);
      driver.transcript().events.push_back(HbarEvent{hbar, hbar_raw});
      hbar_prev = hbar;
      result.final_hbar = hbar;

      if (forced) {
        stop_reason = "budget";
        break;
      }
      if (driver.ledger().remaining() == 0 && !driver.state().has_committed_eos() &&
          driver.state().headroom() >= 1) {
        stop_reason = "budget";
        break;
      }
    }
  } catch (const DecodeFailure&) {
    throw;
  } catch (const Error& e) {
    throw DecodeFailure(e, std::move(driver.transcript()));
  }

  driver.transcript().events.push_back(StopEvent{stop_reason});
  result.stop_reason = stop_reason;
  result.tokens = driver.state().truncate_at_first_eos();
  result.denoiser_calls = driver.calls();
  result.iterations_used = driver.ledger().used();
  result.position_phi.resize(static_cast<std::size_t>(driver.state().size()));
  result.position_avail.resize(static_cast<std::size_t>(driver.state().size()));
  result.gap_psi.resize(driver.state().size() > 0
                            ? static_cast<std::size_t>(driver.state().size() - 1)
                            : 0);
  result.position_remasked.resize(static_cast<std::size_t>(driver.state().size()), 0);
  result.committed_cells.reserve(static_cast<std::size_t>(driver.state().size()));
  for (int pos = 0; pos < driver.state().size(); ++pos) {
    result.position_remasked[static_cast<std::size_t>(pos)] =
        driver.history()[static_cast<std::size_t>(pos)].remasked_ever ? 1 : 0;
    result.committed_cells.push_back(driver.state().cell(pos).token);
  }
  result.transcript = std::move(driver.transcript());
  return result;
}

}  // namespace dystruct
