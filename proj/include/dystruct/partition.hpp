#pragma once

// CRP-style partitioning of a window into contiguous blocks: the local
// concentration parameters, the sequential stay/cut prior, the per-gap edge
// likelihood, and exact MAP inference by dynamic programming over
// (gap index, current block length). An exhaustive enumeration of the
// normalized posterior is provided as a test oracle and for the debug CLI.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dystruct/core.hpp"

namespace dystruct {

// ============================================================================
// Types
// ============================================================================

struct LocalAlphas {
  std::vector<double> alpha;  // one per gap
  double alpha0 = 1.5;
};

// b_g = 1 means a cut between window positions g and g+1 (0-based gaps).
using CutVector = std::vector<std::uint8_t>;

struct Block {
  int begin = 0;  // window-local, half-open
  int end = 0;

  int size() const { return end - begin; }
  bool operator==(const Block&) const = default;
};

struct Partition {
  std::vector<Block> blocks;
  int length = 0;

  int block_count() const { return static_cast<int>(blocks.size()); }
};

// ============================================================================
// Eq. components
// ============================================================================

/// Per-gap concentration: alpha0 * exp(hbar_prev + l_g - mean(l)). Adding a
/// constant to every logit leaves all alphas unchanged.
inline LocalAlphas local_alphas(double alpha0, double hbar_prev, std::span<const double> logits) {
  require(alpha0 > 0.0, Errc::bad_argument, "local_alphas: alpha0 must be positive");
  require(!logits.empty(), Errc::bad_argument, "local_alphas: no gaps");
  double mean = 0.0;
  for (double l : logits) mean += l;
  mean /= static_cast<double>(logits.size());
  LocalAlphas out;
  out.alpha0 = alpha0;
  out.alpha.reserve(logits.size());
  for (double l : logits) out.alpha.push_back(alpha0 * std::exp(hbar_prev + l - mean));
  return out;
}

namespace detail {

inline double clamp_q(double q) {
  require(q >= 0.0 && q <= 1.0, Errc::bad_argument, "edge probability outside [0,1]");
  return std::clamp(q, 1e-6, 1.0 - 1e-6);
}

// Per-gap log terms of Eq. 8; m is the current block length before the gap.
inline double stay_term(double q, double m, double alpha) {
  return std::log(1.0 - q) + std::log(m / (m + alpha));
}
inline double cut_term(double q, double m, double alpha) {
  return std::log(q) + std::log(alpha / (m + alpha));
}

}  // namespace detail

/// Log prior of a cut vector under the sequential CRP: the current block of
/// length m is extended with probability m/(m+alpha_g) and a new block opened
/// with probability alpha_g/(m+alpha_g).
inline double crp_log_prior(const CutVector& cuts, const LocalAlphas& alphas) {
  require(cuts.size() == alphas.alpha.size(), Errc::dimension_mismatch,
          "crp_log_prior: cuts and alphas disagree");
  double total = 0.0;
  double m = 1.0;
  for (std::size_t g = 0; g < cuts.size(); ++g) {
    const double a = alphas.alpha[g];
    if (cuts[g]) {
      total += std::log(a / (m + a));
      m = 1.0;
    } else {
      total += std::log(m / (m + a));
      m += 1.0;
    }
  }
  return total;
}

/// Log likelihood of the gap observations: independent Bernoulli evidence
/// q_g per gap.
inline double log_likelihood(const CutVector& cuts, std::span<const double> q) {
  require(cuts.size() == q.size(), Errc::dimension_mismatch,
          "log_likelihood: cuts and q disagree");
  double total = 0.0;
  for (std::size_t g = 0; g < cuts.size(); ++g) {
    const double qg = detail::clamp_q(q[g]);
    total += cuts[g] ? std::log(qg) : std::log(1.0 - qg);
  }
  return total;
}

/// Unnormalized log posterior of Eq. 8, accumulated left to right per gap.
inline double log_posterior_score(const CutVector& cuts, std::span<const double> q,
                                  const LocalAlphas& alphas) {
  require(cuts.size() == q.size() && cuts.size() == alphas.alpha.size(), Errc::dimension_mismatch,
          "log_posterior_score: length mismatch");
  double total = 0.0;
  double m = 1.0;
  for (std::size_t g = 0; g < cuts.size(); ++g) {
    const double qg = detail::clamp_q(q[g]);
    if (cuts[g]) {
      total += detail::cut_term(qg, m, alphas.alpha[g]);
      m = 1.0;
    } else {
      total += detail::stay_term(qg, m, alphas.alpha[g]);
      m += 1.0;
    }
  }
  return total;
}

// ============================================================================
// Blocks
// ============================================================================

inline Partition blocks_from_cuts(const CutVector& cuts) {
  Partition p;
  p.length = static_cast<int>(cuts.size()) + 1;
  int begin = 0;
  for (std::size_t g = 0; g < cuts.size(); ++g) {
    if (cuts[g]) {
      p.blocks.push_back({begin, static_cast<int>(g) + 1});
      begin = static_cast<int>(g) + 1;
    }
  }
  p.blocks.push_back({begin, p.length});
  return p;
}

inline CutVector cuts_from_blocks(const Partition& p) {
  CutVector cuts(static_cast<std::size_t>(p.length > 0 ? p.length - 1 : 0), 0);
  for (std::size_t i = 0; i + 1 < p.blocks.size(); ++i) {
    cuts[static_cast<std::size_t>(p.blocks[i].end - 1)] = 1;
  }
  return cuts;
}

// ============================================================================
// MAP inference
// ============================================================================

/**
 * Exact argmax of Eq. 8 over all cut vectors by dynamic programming over
 * (gap index, current block length). O(L^2) states. Ties prefer staying
 * (fewer blocks), then the lexicographically smallest cut vector; the
 * reconstruction walks gaps front to back re-evaluating the same float
 * expressions the table was built from, so tie detection is exact.
 *
 * q has one entry per gap; a one-cell window (empty q) is the single block.
 */
inline Partition map_partition(std::span<const double> q, const LocalAlphas& alphas) {
  const int gaps = static_cast<int>(q.size());
  require(static_cast<int>(alphas.alpha.size()) == gaps, Errc::dimension_mismatch,
          "map_partition: q and alphas disagree");
  if (gaps == 0) {
    Partition p;
    p.length = 1;
    p.blocks.push_back({0, 1});
    return p;
  }

  struct Value {
    double score = 0.0;
    int cuts = 0;
  };
  // best[g][m] = best suffix value for gaps g.. with current block length m.
  std::vector<std::vector<Value>> best(static_cast<std::size_t>(gaps + 1));
  for (int g = 0; g <= gaps; ++g) {
    best[static_cast<std::size_t>(g)].resize(static_cast<std::size_t>(gaps + 2));
  }

  auto better = [](const Value& a, const Value& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cuts < b.cuts;
  };

  for (int g = gaps - 1; g >= 0; --g) {
    const double qg = detail::clamp_q(q[static_cast<std::size_t>(g)]);
    const double a = alphas.alpha[static_cast<std::size_t>(g)];
    for (int m = 1; m <= g + 1; ++m) {
      const auto& stay_next = best[static_cast<std::size_t>(g + 1)][static_cast<std::size_t>(m + 1)];
      const auto& cut_next = best[static_cast<std::size_t>(g + 1)][1];
      const Value stay{detail::stay_term(qg, m, a) + stay_next.score, stay_next.cuts};
      const Value cut{detail::cut_term(qg, m, a) + cut_next.score, cut_next.cuts + 1};
      best[static_cast<std::size_t>(g)][static_cast<std::size_t>(m)] =
          better(cut, stay) ? cut : stay;  // stay wins exact ties
    }
  }

  CutVector cuts(static_cast<std::size_t>(gaps), 0);
  int m = 1;
  for (int g = 0; g < gaps; ++g) {
    const double qg = detail::clamp_q(q[static_cast<std::size_t>(g)]);
    const double a = alphas.alpha[static_cast<std::size_t>(g)];
    const auto& here = best[static_cast<std::size_t>(g)][static_cast<std::size_t>(m)];
    const auto& stay_next = best[static_cast<std::size_t>(g + 1)][static_cast<std::size_t>(m + 1)];
    const Value stay{detail::stay_term(qg, m, a) + stay_next.score, stay_next.cuts};
    if (stay.score == here.score && stay.cuts == here.cuts) {
      m += 1;
    } else {
      cuts[static_cast<std::size_t>(g)] = 1;
      m = 1;
    }
  }
  return blocks_from_cuts(cuts);
}

// ============================================================================
// Enumeration oracle
// ============================================================================

struct PosteriorEntry {
  CutVector cuts;
  double probability = 0.0;
};

/// Full normalized posterior over all 2^(L-1) cut vectors. Guarded to L <= 16;
/// this is a test oracle and debug aid, never the runtime path.
inline std::vector<PosteriorEntry> enumerate_log_posterior(std::span<const double> q,
                                                           const LocalAlphas& alphas) {
  const int gaps = static_cast<int>(q.size());
  require(gaps + 1 <= 16, Errc::bad_argument, "enumerate_log_posterior: window longer than 16");
  require(static_cast<int>(alphas.alpha.size()) == gaps, Errc::dimension_mismatch,
          "enumerate_log_posterior: q and alphas disagree");

  const std::size_t total = static_cast<std::size_t>(1) << gaps;
  std::vector<PosteriorEntry> entries;
  entries.reserve(total);
  double max_log = -1e300;
  std::vector<double> logs(total);
  for (std::size_t bits = 0; bits < total; ++bits) {
    CutVector cuts(static_cast<std::size_t>(gaps), 0);
    for (int g = 0; g < gaps; ++g) {
      if (bits & (static_cast<std::size_t>(1) << g)) cuts[static_cast<std::size_t>(g)] = 1;
    }
    logs[bits] = log_posterior_score(cuts, q, alphas);
    max_log = std::max(max_log, logs[bits]);
    entries.push_back({std::move(cuts), 0.0});
  }
  double z = 0.0;
  for (std::size_t bits = 0; bits < total; ++bits) z += std::exp(logs[bits] - max_log);
  for (std::size_t bits = 0; bits < total; ++bits) {
    entries[bits].probability = std::exp(logs[bits] - max_log) / z;
  }
  return entries;
}

}  // namespace dystruct
