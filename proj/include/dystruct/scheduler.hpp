#pragma once

// Per-block scheduling: block instability H(B), context proximity C(B), the
// priority score rho = -H + gamma * C, refinement budgets interpolated
// between T_min and T_max, and the global iteration ledger every decoding
// phase debits from.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dystruct/core.hpp"
#include "dystruct/partition.hpp"

namespace dystruct {

// ============================================================================
// Budget ledger
// ============================================================================

/// Global refinement-iteration budget. Diagnostic steps, block refinement
/// steps and weld steps all draw from the same pool.
class BudgetLedger {
 public:
  explicit BudgetLedger(int total) : total_(total), remaining_(total) {
    require(total >= 0, Errc::bad_argument, "budget must be non-negative");
  }

  int total() const { return total_; }
  int remaining() const { return remaining_; }
  int used() const { return total_ - remaining_; }

  /// Debits up to n iterations; returns how many were granted.
  int charge(int n) {
    require(n >= 0, Errc::bad_argument, "cannot charge a negative amount");
    const int granted = std::min(n, remaining_);
    remaining_ -= granted;
    return granted;
  }

  /// Returns unused iterations from an earlier charge.
  void refund(int n) {
    require(n >= 0 && remaining_ + n <= total_, Errc::bad_argument, "bad refund");
    remaining_ += n;
  }

 private:
  int total_;
  int remaining_;
};

// ============================================================================
// Block statistics
// ============================================================================

struct BlockStats {
  double H = 0.0;   // mean instability over the block
  double C = 0.0;   // context proximity in {0, 0.5, 1}
  double rho = 0.0; // -H + gamma * C
  int T = 0;        // allocated refinement steps (filled at selection time)
};

/// Mean instability of the block's positions (window-local indices).
inline double block_instability(std::span<const double> h, const Block& block) {
  require(block.size() >= 1, Errc::bad_argument, "block_instability: empty block");
  require(block.begin >= 0 && block.end <= static_cast<int>(h.size()), Errc::out_of_range,
          "block_instability: block outside the window");
  double sum = 0.0;
  for (int j = block.begin; j < block.end; ++j) sum += h[static_cast<std::size_t>(j)];
  return sum / block.size();
}

/**
 * Context proximity from the live sequence state: a side is anchored iff the
 * adjacent cell is committed. Left of the first response position sits the
 * prompt, which always anchors; right of the response end there is nothing,
 * so the trailing block of the newest window is unanchored on that side.
 */
inline double context_proximity(const SequenceState& state, WindowSpan window,
                                const Block& block) {
  const int left = window.start + block.begin - 1;
  const int right = window.start + block.end;
  const bool left_anchored = left < 0 || state.cell(left).committed();
  const bool right_anchored = right < state.size() && state.cell(right).committed();
  return 0.5 * (left_anchored ? 1 : 0) + 0.5 * (right_anchored ? 1 : 0);
}

/// Refinement steps for a block: round(T_min + H * (T_max - T_min)), clamped
/// to the ledger and debited. Zero means the budget is exhausted and the
/// caller must fall back to forced commits.
inline int refinement_budget(double H, int t_min, int t_max, BudgetLedger& ledger) {
  require(H >= -1e-12 && H <= 1.0 + 1e-12, Errc::bad_argument,
          "refinement_budget: H outside [0,1]");
  require(t_min >= 1 && t_min <= t_max, Errc::bad_argument, "refinement_budget: bad T bounds");
  const int interpolated =
      static_cast<int>(std::llround(t_min + std::clamp(H, 0.0, 1.0) * (t_max - t_min)));
  return ledger.charge(interpolated);
}

// ============================================================================
// Selection
// ============================================================================

inline std::vector<BlockStats> compute_block_stats(const Partition& part,
                                                   std::span<const double> h,
                                                   const SequenceState& state, WindowSpan window,
                                                   double gamma) {
  std::vector<BlockStats> stats;
  stats.reserve(part.blocks.size());
  for (const Block& b : part.blocks) {
    BlockStats s;
    s.H = block_instability(h, b);
    s.C = context_proximity(state, window, b);
    s.rho = -s.H + gamma * s.C;
    stats.push_back(s);
  }
  return stats;
}

struct Selection {
  int block = 0;
  BlockStats stats;
};

/// Greedy pick: recompute C for the undecoded blocks from the current
/// committed state and return the argmax of rho. Ties go to the leftmost
/// block.
inline Selection next_block(const Partition& part, std::span<const double> h,
                            const SequenceState& state, WindowSpan window,
                            std::span<const std::uint8_t> decoded, double gamma) {
  require(decoded.size() == part.blocks.size(), Errc::dimension_mismatch,
          "next_block: decoded flags mismatch");
  const auto stats = compute_block_stats(part, h, state, window, gamma);
  int best = -1;
  for (int i = 0; i < part.block_count(); ++i) {
    if (decoded[static_cast<std::size_t>(i)]) continue;
    if (best < 0 || stats[static_cast<std::size_t>(i)].rho > stats[static_cast<std::size_t>(best)].rho) {
      best = i;
    }
  }
  require(best >= 0, Errc::bad_argument, "next_block: no undecoded block left");
  return {best, stats[static_cast<std::size_t>(best)]};
}

/// Static ordering: C evaluated once against the given state, blocks sorted
/// by descending rho, ties staying in left-to-right order.
inline std::vector<Selection> static_schedule(const Partition& part, std::span<const double> h,
                                              const SequenceState& state, WindowSpan window,
                                              double gamma) {
  const auto stats = compute_block_stats(part, h, state, window, gamma);
  std::vector<Selection> order;
  order.reserve(stats.size());
  for (int i = 0; i < part.block_count(); ++i) order.push_back({i, stats[static_cast<std::size_t>(i)]});
  std::stable_sort(order.begin(), order.end(),
                   [](const Selection& a, const Selection& b) { return a.stats.rho > b.stats.rho; });
  return order;
}

}  // namespace dystruct
