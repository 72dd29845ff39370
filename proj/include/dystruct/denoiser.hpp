#pragma once

// The frozen-model contract and the built-in toy denoisers used for
// desk-scale evaluation. A denoiser predicts sparse distributions (and
// optionally hidden vectors) for masked response positions given the prompt
// and the current cell states.
//
// The toy oracle implements a small chain grammar. Ground truth is split into
// segments; inside a segment adjacent tokens satisfy truth[j+1] =
// step(truth[j]) for a fixed bijective step. The last position of each
// segment is self-evident to the oracle. Every other position is determined
// by a committed neighbour across a constrained gap (right neighbour
// preferred, then left) and is otherwise ambiguous between its true chain and
// one alternative chain, so unanchored queries come back bimodal.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dystruct/core.hpp"
#include "dystruct/distribution.hpp"
#include "dystruct/rng.hpp"

namespace dystruct {

// ============================================================================
// Contract
// ============================================================================

struct Prediction {
  int position = 0;
  SparseDist dist;
  std::optional<std::vector<float>> hidden;
};

struct DenoiserDescriptor {
  Vocab vocab;
  std::optional<int> hidden_dim;
  bool deterministic = true;
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual DenoiserDescriptor descriptor() const = 0;

  /// One Prediction per query position, in query order. Positions index the
  /// response; callers only query masked cells.
  virtual std::vector<Prediction> predict(std::span<const TokenId> prompt,
                                          std::span<const Cell> cells,
                                          std::span<const int> positions) = 0;
};

/// Checked predict: enforces the masked-positions precondition, then verifies
/// arity, ordering and normalization (tolerance 1e-4) of whatever the backing
/// model returned. Protocol or model defects surface here as hard failures.
inline std::vector<Prediction> checked_predict(Denoiser& model, const SequenceState& state,
                                               std::span<const int> positions) {
  for (int pos : positions) {
    require(!state.cell(pos).committed(), Errc::bad_argument,
            "predict: position " + std::to_string(pos) + " is not masked");
  }
  auto preds = model.predict(state.prompt(), state.response(), positions);
  require(preds.size() == positions.size(), Errc::protocol_error,
          "predict: expected " + std::to_string(positions.size()) + " predictions, got " +
              std::to_string(preds.size()));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require(preds[i].position == positions[i], Errc::protocol_error,
            "predict: prediction order mismatch at index " + std::to_string(i));
    preds[i].dist.validate(1e-4);
    require(!preds[i].dist.topk.empty(), Errc::malformed_distribution,
            "predict: empty distribution at position " + std::to_string(preds[i].position));
  }
  return preds;
}

// ============================================================================
// Toy chain grammar
// ============================================================================

/// Token arithmetic for the toy language: content ids live in
/// [content_begin, vocab.size) and form one cycle under step(); alt() jumps
/// half the cycle, giving each chain exactly one alternative.
struct ToyGrammar {
  Vocab vocab{32, 0, 1};
  TokenId content_begin = 2;

  int content_count() const { return vocab.size - content_begin; }
  bool is_content(TokenId t) const { return t >= content_begin && t < vocab.size; }

  TokenId wrap(std::int64_t x) const {
    const std::int64_t n = content_count();
    return static_cast<TokenId>(content_begin + ((x - content_begin) % n + n) % n);
  }
  TokenId step(TokenId x) const { return wrap(static_cast<std::int64_t>(x) + 1); }
  TokenId back(TokenId x) const { return wrap(static_cast<std::int64_t>(x) - 1); }
  TokenId alt(TokenId x) const { return wrap(static_cast<std::int64_t>(x) + content_count() / 2); }
};

/// Ground truth for one prompt: the continuation, plus which positions end a
/// segment. The gap to the right of a segment-final position carries no chain
/// constraint.
struct ToyTruth {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> segment_final;  // same length as tokens

  void validate(const ToyGrammar& g) const {
    require(segment_final.size() == tokens.size(), Errc::bad_argument,
            "toy truth: flag/token length mismatch");
    require(!tokens.empty() && segment_final.back() != 0, Errc::bad_argument,
            "toy truth: last position must end a segment");
    for (std::size_t j = 0; j + 1 < tokens.size(); ++j) {
      if (!segment_final[j]) {
        require(tokens[j + 1] == g.step(tokens[j]), Errc::bad_argument,
                "toy truth: chain constraint violated inside a segment");
      }
    }
    for (TokenId t : tokens) {
      require(g.is_content(t), Errc::bad_argument, "toy truth: non-content token");
    }
  }

  /// Gap indices g such that a segment boundary lies between positions g and
  /// g+1 (the corpus "delims" annotation).
  std::vector<int> delimiter_gaps() const {
    std::vector<int> out;
    for (std::size_t j = 0; j + 1 < tokens.size(); ++j) {
      if (segment_final[j]) out.push_back(static_cast<int>(j));
    }
    return out;
  }
};

/// Builds a ToyTruth from segment lengths; each segment's final token value
/// is drawn from the stream and the chain is filled in leftwards.
inline ToyTruth make_toy_truth(const ToyGrammar& g, const std::vector<int>& segment_lengths,
                               SeedStream stream) {
  ToyTruth truth;
  for (int len : segment_lengths) {
    require(len >= 1, Errc::bad_argument, "toy segment length must be >= 1");
    const TokenId last = g.wrap(
        static_cast<std::int64_t>(g.content_begin + stream.next_u64() % g.content_count()));
    std::vector<TokenId> seg(static_cast<std::size_t>(len));
    seg[static_cast<std::size_t>(len - 1)] = last;
    for (int j = len - 2; j >= 0; --j) {
      seg[static_cast<std::size_t>(j)] = g.back(seg[static_cast<std::size_t>(j + 1)]);
    }
    for (int j = 0; j < len; ++j) {
      truth.tokens.push_back(seg[static_cast<std::size_t>(j)]);
      truth.segment_final.push_back(j == len - 1 ? 1 : 0);
    }
  }
  truth.validate(g);
  return truth;
}

/// Counts committed adjacent token pairs that break the chain constraint.
/// Only gaps inside a segment count; pairs with a masked member are skipped.
inline int count_chain_violations(const ToyGrammar& g, const ToyTruth& truth,
                                  std::span<const Cell> cells) {
  int violations = 0;
  const std::size_t n = std::min(cells.size(), truth.tokens.size());
  for (std::size_t j = 0; j + 1 < n; ++j) {
    if (truth.segment_final[j]) continue;
    if (!cells[j].committed() || !cells[j + 1].committed()) continue;
    if (!g.is_content(cells[j].token)) continue;
    if (cells[j + 1].token != g.step(cells[j].token)) ++violations;
  }
  return violations;
}

// ============================================================================
// ToyOracleDenoiser
// ============================================================================

enum class ToyMode { independent, paired_neighbor };

struct ToyOracleConfig {
  double base_confidence = 0.6;  // beta
  double anchoring_gain = 0.3;   // g
  int anchoring_radius = 2;      // r_a
  ToyMode mode = ToyMode::paired_neighbor;
  double noise_temperature = 0.0;
  double bimodal_tilt = 0.08;  // deterministic +- tilt of the two-candidate split
  double epsilon = 1e-4;       // confidence clamp margin
  bool emit_hidden = true;
  int hidden_dim = 8;
};

/**
 * Desk-scale stand-in for a frozen masked diffusion LM. Pure function of
 * (prompt, cells, positions): repeated calls are byte-identical and instances
 * are safe to share across threads.
 *
 * Confidence on the consistent candidate is
 *   clamp(beta + gain * committed_neighbors / (2 * radius), eps, 1 - eps),
 * with the remaining mass spread uniformly over the other non-mask tokens.
 * In paired_neighbor mode an unanchored non-final position splits that
 * confidence between its true chain and the alternative chain; which side
 * gets the larger share is a deterministic hash of (prompt, position).
 */
class ToyOracleDenoiser final : public Denoiser {
 public:
  ToyOracleDenoiser(ToyGrammar grammar, ToyOracleConfig config)
      : grammar_(grammar), config_(config) {
    grammar_.vocab.validate();
    require(config_.base_confidence > 0.0 && config_.base_confidence < 1.0, Errc::bad_argument,
            "toy base confidence must be in (0,1)");
    require(config_.anchoring_gain >= 0.0, Errc::bad_argument, "toy anchoring gain must be >= 0");
    require(config_.anchoring_radius >= 1, Errc::bad_argument, "toy anchoring radius must be >= 1");
    require(config_.noise_temperature >= 0.0 && config_.noise_temperature <= 1.0,
            Errc::bad_argument, "toy noise temperature must be in [0,1]");
  }

  const ToyGrammar& grammar() const { return grammar_; }
  const ToyOracleConfig& config() const { return config_; }

  void add_truth(std::vector<TokenId> prompt, ToyTruth truth) {
    truth.validate(grammar_);
    truths_[std::move(prompt)] = std::move(truth);
  }

  const ToyTruth& truth_for(std::span<const TokenId> prompt) const {
    return find_truth(prompt);
  }

  DenoiserDescriptor descriptor() const override {
    DenoiserDescriptor d;
    d.vocab = grammar_.vocab;
    if (config_.emit_hidden) d.hidden_dim = config_.hidden_dim;
    d.deterministic = true;
    return d;
  }

  std::vector<Prediction> predict(std::span<const TokenId> prompt, std::span<const Cell> cells,
                                  std::span<const int> positions) override {
    const ToyTruth& truth = find_truth(prompt);
    const std::uint64_t prompt_hash = hash_tokens(prompt);
    std::vector<Prediction> out;
    out.reserve(positions.size());
    for (int pos : positions) {
      require(pos >= 0 && pos < static_cast<int>(cells.size()), Errc::out_of_range,
              "toy predict: position out of range");
      out.push_back(predict_one(truth, prompt_hash, cells, pos));
    }
    return out;
  }

 private:
  const ToyTruth& find_truth(std::span<const TokenId> prompt) const {
    std::vector<TokenId> key(prompt.begin(), prompt.end());
    auto it = truths_.find(key);
    require(it != truths_.end(), Errc::bad_argument, "toy oracle: unknown prompt");
    return it->second;
  }

  // Committed response cells within the anchoring radius; the prompt side of
  // position 0 counts as committed context.
  int committed_neighbors(std::span<const Cell> cells, int pos) const {
    int n = 0;
    for (int d = -config_.anchoring_radius; d <= config_.anchoring_radius; ++d) {
      if (d == 0) continue;
      const int j = pos + d;
      if (j < 0) {
        ++n;
      } else if (j < static_cast<int>(cells.size()) &&
                 cells[static_cast<std::size_t>(j)].committed()) {
        ++n;
      }
    }
    return n;
  }

  std::uint64_t neighbor_pattern(std::span<const Cell> cells, int pos) const {
    std::uint64_t bits = 0;
    int k = 0;
    for (int d = -config_.anchoring_radius; d <= config_.anchoring_radius; ++d, ++k) {
      if (d == 0) continue;
      const int j = pos + d;
      const bool committed =
          j < 0 || (j < static_cast<int>(cells.size()) && cells[static_cast<std::size_t>(j)].committed());
      if (committed) bits |= (1ULL << k);
    }
    return bits;
  }

  // True token at pos, plus whether the gap on its right carries the chain
  // constraint (false for segment finals and for EOS filler).
  TokenId truth_at(const ToyTruth& truth, int pos) const {
    if (pos < static_cast<int>(truth.tokens.size())) {
      return truth.tokens[static_cast<std::size_t>(pos)];
    }
    return grammar_.vocab.eos_id;
  }

  bool right_gap_constrained(const ToyTruth& truth, int pos) const {
    return pos >= 0 && pos < static_cast<int>(truth.tokens.size()) &&
           !truth.segment_final[static_cast<std::size_t>(pos)];
  }

  Prediction predict_one(const ToyTruth& truth, std::uint64_t prompt_hash,
                         std::span<const Cell> cells, int pos) const {
    const TokenId true_tok = truth_at(truth, pos);
    const double frac = static_cast<double>(committed_neighbors(cells, pos)) /
                        (2.0 * config_.anchoring_radius);
    const double conf = std::clamp(config_.base_confidence + config_.anchoring_gain * frac,
                                   config_.epsilon, 1.0 - config_.epsilon);

    // Candidate set: one consistent token, or two chains when unanchored.
    TokenId primary = true_tok;
    std::optional<TokenId> secondary;
    if (config_.mode == ToyMode::paired_neighbor && grammar_.is_content(true_tok) &&
        !(pos < static_cast<int>(truth.tokens.size()) &&
          truth.segment_final[static_cast<std::size_t>(pos)])) {
      const int right = pos + 1;
      const int left = pos - 1;
      const bool right_committed = right < static_cast<int>(cells.size()) &&
                                   cells[static_cast<std::size_t>(right)].committed();
      const bool left_committed =
          left >= 0 && cells[static_cast<std::size_t>(left)].committed();
      if (right_committed && right_gap_constrained(truth, pos) &&
          grammar_.is_content(cells[static_cast<std::size_t>(right)].token)) {
        primary = grammar_.back(cells[static_cast<std::size_t>(right)].token);
      } else if (left_committed && right_gap_constrained(truth, left) &&
                 grammar_.is_content(cells[static_cast<std::size_t>(left)].token)) {
        primary = grammar_.step(cells[static_cast<std::size_t>(left)].token);
      } else {
        secondary = grammar_.alt(true_tok);
      }
    }

    SparseDist dist;
    const int others = grammar_.vocab.size - 1 - (secondary ? 2 : 1);  // non-mask decoys
    const double rest = (1.0 - conf) / std::max(1, others);
    if (secondary) {
      const std::uint64_t h = detail::splitmix_finalize(prompt_hash ^ (0x9E37ULL + pos));
      const double tilt = (h & 1) ? config_.bimodal_tilt : -config_.bimodal_tilt;
      dist.topk.emplace_back(primary, conf * (0.5 + tilt));
      dist.topk.emplace_back(*secondary, conf * (0.5 - tilt));
    } else {
      dist.topk.emplace_back(primary, conf);
    }
    for (TokenId t = 0; t < grammar_.vocab.size; ++t) {
      if (t == grammar_.vocab.mask_id || t == primary || (secondary && t == *secondary)) continue;
      dist.topk.emplace_back(t, rest);
    }

    // Temperature mixes toward uniform over the non-mask vocabulary, which
    // raises entropy without moving the argmax.
    if (config_.noise_temperature > 0.0) {
      const double tau = config_.noise_temperature;
      const double u = 1.0 / (grammar_.vocab.size - 1);
      for (auto& [id, p] : dist.topk) p = (1.0 - tau) * p + tau * u;
    }
    dist.sort_atoms();
    dist.validate(1e-9);

    Prediction pred;
    pred.position = pos;
    pred.dist = std::move(dist);
    if (config_.emit_hidden) {
      const std::uint64_t pattern = neighbor_pattern(cells, pos);
      std::vector<float> h(static_cast<std::size_t>(config_.hidden_dim));
      for (int r = 0; r < config_.hidden_dim; ++r) {
        const std::uint64_t z = detail::splitmix_finalize(
            prompt_hash ^ (static_cast<std::uint64_t>(pos) << 24) ^ (pattern << 8) ^
            static_cast<std::uint64_t>(r));
        h[static_cast<std::size_t>(r)] = static_cast<float>((z >> 11) * 0x1.0p-53);
      }
      pred.hidden = std::move(h);
    }
    return pred;
  }

  ToyGrammar grammar_;
  ToyOracleConfig config_;
  std::map<std::vector<TokenId>, ToyTruth> truths_;
};

}  // namespace dystruct
