#pragma once

// The temporary diagnostic pass over a freshly appended window, and the
// positional / gap statistics computed from its trace.
//
// Each diagnostic step re-predicts the masked window positions, keeps only
// the top commit_fraction * L positions by confidence temporarily committed
// (ranking fresh predictions against the stored confidence of standing
// commits, ties to the lower index) and remasks everything else. The pass
// operates on a private copy of the sequence state, so the caller's state is
// untouched and nothing needs reverting.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "dystruct/core.hpp"
#include "dystruct/denoiser.hpp"
#include "dystruct/distribution.hpp"

namespace dystruct {

// ============================================================================
// Trace
// ============================================================================

struct DiagnosticConfig {
  int steps = 4;                 // K
  double commit_fraction = 0.25; // of the window length, per step
  int temp_dist_step = 0;        // which step supplies p_temp for gap features; 0 = final
};

struct DiagnosticStep {
  // Window-local, length L each. Committed positions carry the previous
  // step's prediction forward so every (step, position) slot is populated.
  std::vector<SparseDist> dist;
  std::vector<TokenId> argmax;
  std::vector<std::uint8_t> masked;    // masked at the start of the step
  std::vector<std::uint8_t> accepted;  // committed at the end of the step
  std::vector<std::vector<float>> hidden;  // empty vectors when unavailable
};

struct DiagnosticTrace {
  WindowSpan window;
  DiagnosticConfig config;
  bool hidden_available = false;
  std::vector<float> left_hidden;  // hidden of the cell left of the window, may be empty
  std::vector<DiagnosticStep> steps;

  int length() const { return window.length; }
  int step_count() const { return static_cast<int>(steps.size()); }

  const SparseDist& final_dist(int j) const { return steps.back().dist.at(static_cast<std::size_t>(j)); }

  /// Distribution supplying p_temp for the gap features (final step unless
  /// configured otherwise).
  const SparseDist& temp_dist(int j) const {
    const int k = config.temp_dist_step <= 0 ? step_count() : config.temp_dist_step;
    return steps.at(static_cast<std::size_t>(k - 1)).dist.at(static_cast<std::size_t>(j));
  }
};

inline int diagnostic_commit_count(int window_length, double fraction) {
  const int c = static_cast<int>(std::llround(fraction * window_length));
  return std::clamp(c, 1, window_length);
}

// ============================================================================
// Diagnostic pass
// ============================================================================

inline DiagnosticTrace run_diagnostic_pass(Denoiser& model, const SequenceState& state,
                                           WindowSpan window, const DiagnosticConfig& config,
                                           std::vector<float> left_hidden = {}) {
  const int L = window.length;
  require(L >= 1, Errc::bad_argument, "diagnostic pass: empty window");
  require(config.steps >= 2, Errc::bad_argument,
          "diagnostic pass: needs at least 2 steps for step-difference features");
  for (int pos = window.start; pos < window.end(); ++pos) {
    require(!state.cell(pos).committed(), Errc::bad_argument,
            "diagnostic pass: window cell already committed");
  }

  DiagnosticTrace trace;
  trace.window = window;
  trace.config = config;
  trace.hidden_available = model.descriptor().hidden_dim.has_value();
  trace.left_hidden = std::move(left_hidden);

  SequenceState work = state;  // private copy; temporary commits never escape
  const TokenId mask_id = state.vocab().mask_id;
  const int commit_count = diagnostic_commit_count(L, config.commit_fraction);
  std::vector<double> stored_conf(static_cast<std::size_t>(L), 0.0);

  for (int k = 0; k < config.steps; ++k) {
    DiagnosticStep step;
    step.dist.resize(static_cast<std::size_t>(L));
    step.argmax.resize(static_cast<std::size_t>(L));
    step.masked.resize(static_cast<std::size_t>(L));
    step.accepted.assign(static_cast<std::size_t>(L), 0);
    step.hidden.resize(static_cast<std::size_t>(L));

    std::vector<int> query;
    for (int j = 0; j < L; ++j) {
      const bool is_masked = !work.cell(window.start + j).committed();
      step.masked[static_cast<std::size_t>(j)] = is_masked ? 1 : 0;
      if (is_masked) query.push_back(window.start + j);
    }

    const auto preds = checked_predict(model, work, query);
    for (const auto& pred : preds) {
      const int j = pred.position - window.start;
      const auto [tok, prob] = best_excluding(pred.dist, mask_id);
      step.dist[static_cast<std::size_t>(j)] = pred.dist;
      step.argmax[static_cast<std::size_t>(j)] = tok;
      if (pred.hidden) step.hidden[static_cast<std::size_t>(j)] = *pred.hidden;
    }
    for (int j = 0; j < L; ++j) {
      if (!step.masked[static_cast<std::size_t>(j)]) {
        const auto& prev = trace.steps.back();
        step.dist[static_cast<std::size_t>(j)] = prev.dist[static_cast<std::size_t>(j)];
        step.argmax[static_cast<std::size_t>(j)] = prev.argmax[static_cast<std::size_t>(j)];
        step.hidden[static_cast<std::size_t>(j)] = prev.hidden[static_cast<std::size_t>(j)];
      }
    }

    // Rank all window positions: fresh confidence for masked cells, the
    // stored commit confidence for standing commits. Ties go to the lower
    // index.
    std::vector<std::pair<double, int>> ranking;
    ranking.reserve(static_cast<std::size_t>(L));
    for (int j = 0; j < L; ++j) {
      const double conf = step.masked[static_cast<std::size_t>(j)]
                              ? best_excluding(step.dist[static_cast<std::size_t>(j)], mask_id).second
                              : stored_conf[static_cast<std::size_t>(j)];
      ranking.emplace_back(conf, j);
    }
    std::sort(ranking.begin(), ranking.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });

    std::vector<std::uint8_t> keep(static_cast<std::size_t>(L), 0);
    for (int r = 0; r < commit_count; ++r) keep[static_cast<std::size_t>(ranking[static_cast<std::size_t>(r)].second)] = 1;

    std::vector<int> to_remask;
    for (int j = 0; j < L; ++j) {
      const int pos = window.start + j;
      if (keep[static_cast<std::size_t>(j)]) {
        step.accepted[static_cast<std::size_t>(j)] = 1;
        if (step.masked[static_cast<std::size_t>(j)]) {
          work.commit(pos, step.argmax[static_cast<std::size_t>(j)]);
          stored_conf[static_cast<std::size_t>(j)] =
              best_excluding(step.dist[static_cast<std::size_t>(j)], mask_id).second;
        }
      } else if (work.cell(pos).committed()) {
        to_remask.push_back(pos);
        stored_conf[static_cast<std::size_t>(j)] = 0.0;
      }
    }
    work.remask(to_remask);
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

// ============================================================================
// Position features (the seven diagnostic statistics)
// ============================================================================

struct PositionFeatures {
  double entropy = 0.0;        // H, final step
  double remask_freq = 0.0;    // R, averaged over steps
  double oscillation = 0.0;    // Omega, argmax changes between steps
  double mean_step_jsd = 0.0;  // JSD between consecutive step distributions
  double hidden_jump = 0.0;    // mean |s_j - s_{j-1}|, averaged over steps
  double confidence = 0.0;     // F, final step
  double margin = 0.0;         // G, final step
  std::array<bool, 7> available{true, true, true, true, true, true, true};

  std::array<double, 7> as_vector() const {
    return {entropy, remask_freq, oscillation, mean_step_jsd, hidden_jump, confidence, margin};
  }

  void validate(std::int32_t vocab_size) const {
    const double slack = 1e-9;
    require(entropy >= -slack && entropy <= std::log(static_cast<double>(vocab_size)) + slack,
            Errc::bad_argument, "feature bounds: entropy");
    require(remask_freq >= -slack && remask_freq <= 1.0 + slack, Errc::bad_argument,
            "feature bounds: remask frequency");
    require(oscillation >= -slack && oscillation <= 1.0 + slack, Errc::bad_argument,
            "feature bounds: oscillation");
    require(mean_step_jsd >= -slack && mean_step_jsd <= std::log(2.0) + slack, Errc::bad_argument,
            "feature bounds: mean step JSD");
    require(hidden_jump >= 0.0, Errc::bad_argument, "feature bounds: hidden jump");
    require(confidence > 0.0 && confidence <= 1.0 + slack, Errc::bad_argument,
            "feature bounds: confidence");
    require(margin >= 0.0, Errc::bad_argument, "feature bounds: margin");
  }
};

namespace detail {

inline double mean_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.empty() || b.empty() || a.size() != b.size()) return 0.0;
  double sum = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) sum += std::abs(static_cast<double>(a[r]) - b[r]);
  return sum / static_cast<double>(a.size());
}

}  // namespace detail

inline PositionFeatures position_features(const DiagnosticTrace& trace, int j) {
  const int K = trace.step_count();
  require(j >= 0 && j < trace.length(), Errc::out_of_range, "position_features: bad index");
  PositionFeatures f;

  const SparseDist& last = trace.final_dist(j);
  f.entropy = entropy(last);
  f.confidence = last.top1();
  f.margin = margin(last);

  int remasks = 0;
  int flips = 0;
  double jsd_sum = 0.0;
  double jump_sum = 0.0;
  for (int k = 0; k < K; ++k) {
    const auto& step = trace.steps[static_cast<std::size_t>(k)];
    if (step.masked[static_cast<std::size_t>(j)] && !step.accepted[static_cast<std::size_t>(j)]) ++remasks;
    if (k > 0) {
      const auto& prev = trace.steps[static_cast<std::size_t>(k - 1)];
      if (step.argmax[static_cast<std::size_t>(j)] != prev.argmax[static_cast<std::size_t>(j)]) ++flips;
      jsd_sum += jsd(step.dist[static_cast<std::size_t>(j)], prev.dist[static_cast<std::size_t>(j)]);
    }
    if (trace.hidden_available) {
      const std::vector<float>& here = step.hidden[static_cast<std::size_t>(j)];
      const std::vector<float>& left =
          j > 0 ? step.hidden[static_cast<std::size_t>(j - 1)] : trace.left_hidden;
      jump_sum += detail::mean_abs_diff(here, left);
    }
  }
  f.remask_freq = static_cast<double>(remasks) / K;
  f.oscillation = static_cast<double>(flips) / std::max(K - 1, 1);
  f.mean_step_jsd = jsd_sum / std::max(K - 1, 1);
  f.hidden_jump = trace.hidden_available ? jump_sum / K : 0.0;
  f.available[4] = trace.hidden_available;
  return f;
}

inline std::vector<PositionFeatures> window_features(const DiagnosticTrace& trace,
                                                     std::int32_t vocab_size) {
  std::vector<PositionFeatures> out;
  out.reserve(static_cast<std::size_t>(trace.length()));
  for (int j = 0; j < trace.length(); ++j) {
    out.push_back(position_features(trace, j));
    out.back().validate(vocab_size);
  }
  return out;
}

// ============================================================================
// Instability and edge profiles
// ============================================================================

struct InstabilityProfile {
  std::vector<double> u;  // raw logits w . phi_j
  std::vector<double> h;  // sigma(u_j - window mean)
  double hbar = 0.5;      // mean h, the window-centred scalar
  double hbar_raw = 0.5;  // mean sigma(u_j) without centring, for monitoring
};

inline InstabilityProfile instability(const std::vector<PositionFeatures>& features,
                                      std::span<const double> w) {
  require(w.size() == 7, Errc::dimension_mismatch, "instability: weight vector must have 7 entries");
  require(!features.empty(), Errc::bad_argument, "instability: empty window");
  InstabilityProfile prof;
  prof.u.reserve(features.size());
  for (const auto& f : features) {
    const auto phi = f.as_vector();
    double u = 0.0;
    for (std::size_t i = 0; i < 7; ++i) u += w[i] * phi[i];
    prof.u.push_back(u);
  }
  double mean_u = 0.0;
  for (double u : prof.u) mean_u += u;
  mean_u /= static_cast<double>(prof.u.size());

  double sum_h = 0.0;
  double sum_raw = 0.0;
  prof.h.reserve(prof.u.size());
  for (double u : prof.u) {
    const double h = sigmoid(u - mean_u);
    prof.h.push_back(h);
    sum_h += h;
    sum_raw += sigmoid(u);
  }
  prof.hbar = sum_h / static_cast<double>(prof.h.size());
  prof.hbar_raw = sum_raw / static_cast<double>(prof.h.size());
  return prof;
}

struct EdgeProfile {
  std::vector<std::array<double, 4>> psi;  // [h_g, h_{g+1}, |dh|, JSD(p_g || p_{g+1})]
  std::vector<double> logit;               // l_g = w_b . psi_g
  std::vector<double> q;                   // sigma(l_g)

  int gaps() const { return static_cast<int>(q.size()); }
};

inline std::array<double, 4> gap_features(const DiagnosticTrace& trace,
                                          const InstabilityProfile& inst, int g) {
  const double hg = inst.h.at(static_cast<std::size_t>(g));
  const double hn = inst.h.at(static_cast<std::size_t>(g + 1));
  return {hg, hn, std::abs(hg - hn), jsd(trace.temp_dist(g), trace.temp_dist(g + 1))};
}

/// Per-gap boundary evidence. A one-cell window has no gaps and yields an
/// empty profile.
inline EdgeProfile edge_scores(const DiagnosticTrace& trace, const InstabilityProfile& inst,
                               std::span<const double> w_b) {
  require(w_b.size() == 4, Errc::dimension_mismatch, "edge_scores: weight vector must have 4 entries");
  require(static_cast<int>(inst.h.size()) == trace.length(), Errc::dimension_mismatch,
          "edge_scores: instability profile does not match the trace");
  EdgeProfile prof;
  const int gaps = trace.length() - 1;
  if (gaps <= 0) return prof;
  prof.psi.reserve(static_cast<std::size_t>(gaps));
  for (int g = 0; g < gaps; ++g) {
    const auto psi = gap_features(trace, inst, g);
    double l = 0.0;
    for (std::size_t i = 0; i < 4; ++i) l += w_b[i] * psi[i];
    prof.psi.push_back(psi);
    prof.logit.push_back(l);
    prof.q.push_back(sigmoid(l));
  }
  return prof;
}

}  // namespace dystruct
