#pragma once

// Sparse token distributions: top-k atoms plus one aggregated tail
// pseudo-symbol. Entropy and Jensen-Shannon divergence are computed on this
// sparse form, treating the tail as a single shared symbol; for toy models
// the top-k always covers the full support and both are exact.

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dystruct/core.hpp"

namespace dystruct {

inline constexpr double kProbFloor = 1e-12;

struct SparseDist {
  // Sorted by probability descending, ties by token id ascending.
  std::vector<std::pair<TokenId, double>> topk;
  double tail = 0.0;

  double mass() const {
    double s = tail;
    for (const auto& [id, p] : topk) s += p;
    return s;
  }

  void sort_atoms() {
    std::sort(topk.begin(), topk.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
  }

  void validate(double tol) const {
    for (const auto& [id, p] : topk) {
      require(p >= 0.0 && std::isfinite(p), Errc::malformed_distribution,
              "distribution atom for token " + std::to_string(id) + " is negative or non-finite");
    }
    require(tail >= -tol && std::isfinite(tail), Errc::malformed_distribution,
            "distribution tail is negative or non-finite");
    const double m = mass();
    require(std::abs(m - 1.0) <= tol, Errc::malformed_distribution,
            "distribution mass " + std::to_string(m) + " is off by more than " +
                std::to_string(tol));
  }

  TokenId argmax() const {
    require(!topk.empty(), Errc::malformed_distribution, "argmax of empty distribution");
    return topk.front().first;
  }

  /// Probability of the most likely token.
  double top1() const {
    require(!topk.empty(), Errc::malformed_distribution, "top1 of empty distribution");
    return topk.front().second;
  }

  double prob_of(TokenId id) const {
    for (const auto& [tok, p] : topk) {
      if (tok == id) return p;
    }
    return 0.0;
  }
};

/// Convenience constructor from explicit atoms; sorts and zero-tails.
inline SparseDist make_dist(std::vector<std::pair<TokenId, double>> atoms, double tail = 0.0) {
  SparseDist d;
  d.topk = std::move(atoms);
  d.tail = tail;
  d.sort_atoms();
  return d;
}

// ============================================================================
// Information measures (natural log)
// ============================================================================

inline double entropy(const SparseDist& d) {
  auto term = [](double p) { return p > 0.0 ? -p * std::log(p) : 0.0; };
  double h = term(d.tail);
  for (const auto& [id, p] : d.topk) h += term(p);
  return h;
}

/// JSD(p || q) = KL(p||m)/2 + KL(q||m)/2 with m = (p+q)/2, over the union of
/// the two supports with the tail mass treated as one shared pseudo-symbol.
/// Symmetric, bounded by ln 2.
inline double jsd(const SparseDist& p, const SparseDist& q) {
  std::unordered_map<TokenId, std::pair<double, double>> atoms;
  atoms.reserve(p.topk.size() + q.topk.size());
  for (const auto& [id, pp] : p.topk) atoms[id].first += pp;
  for (const auto& [id, qq] : q.topk) atoms[id].second += qq;

  auto kl_terms = [](double a, double b, double m) {
    double out = 0.0;
    if (a > 0.0) out += 0.5 * a * std::log(a / m);
    if (b > 0.0) out += 0.5 * b * std::log(b / m);
    return out;
  };

  double total = 0.0;
  for (const auto& [id, ab] : atoms) {
    const double m = 0.5 * (ab.first + ab.second);
    if (m > 0.0) total += kl_terms(ab.first, ab.second, m);
  }
  const double mt = 0.5 * (p.tail + q.tail);
  if (mt > 0.0) total += kl_terms(p.tail, q.tail, mt);
  return std::max(0.0, total);
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Most likely token that is not `exclude`, with its probability.
inline std::pair<TokenId, double> best_excluding(const SparseDist& d, TokenId exclude) {
  for (const auto& [id, p] : d.topk) {
    if (id != exclude) return {id, p};
  }
  raise(Errc::malformed_distribution, "distribution has no token besides the excluded one");
}

/// Log-probability margin between the two most likely tokens,
/// log p_(1) - log p_(2). Non-negative; the runner-up is floored so a
/// one-atom distribution yields a large finite margin.
inline double margin(const SparseDist& d) {
  require(!d.topk.empty(), Errc::malformed_distribution, "margin of empty distribution");
  const double p1 = d.topk[0].second;
  double p2 = d.topk.size() > 1 ? d.topk[1].second : d.tail;
  p2 = std::max(p2, kProbFloor);
  return std::max(0.0, std::log(p1) - std::log(p2));
}

}  // namespace dystruct
