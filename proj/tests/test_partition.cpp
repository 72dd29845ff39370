#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dystruct/partition.hpp"
#include "dystruct/rng.hpp"

using namespace dystruct;

namespace {

LocalAlphas fixed_alphas(std::vector<double> a) {
  LocalAlphas out;
  out.alpha = std::move(a);
  return out;
}

// Brute-force argmax of Eq. 8 over all cut vectors, scored through the prior
// and likelihood routes separately. Ties canonicalize to fewer cuts, then the
// lexicographically smallest vector. This is the oracle the DP must match.
CutVector brute_force_map(std::span<const double> q, const LocalAlphas& alphas) {
  const int gaps = static_cast<int>(q.size());
  CutVector best;
  double best_score = 0.0;
  int best_cuts = 0;
  for (std::size_t bits = 0; bits < (static_cast<std::size_t>(1) << gaps); ++bits) {
    CutVector cuts(static_cast<std::size_t>(gaps), 0);
    int ncuts = 0;
    for (int g = 0; g < gaps; ++g) {
      if (bits & (static_cast<std::size_t>(1) << g)) {
        cuts[static_cast<std::size_t>(g)] = 1;
        ++ncuts;
      }
    }
    const double score = crp_log_prior(cuts, alphas) + log_likelihood(cuts, q);
    bool take = best.empty();
    if (!take && score != best_score) take = score > best_score;
    if (!take && score == best_score) {
      if (ncuts != best_cuts) {
        take = ncuts < best_cuts;
      } else {
        take = std::lexicographical_compare(cuts.begin(), cuts.end(), best.begin(), best.end());
      }
    }
    if (take) {
      best = cuts;
      best_score = score;
      best_cuts = ncuts;
    }
  }
  return best;
}

struct RandomInstance {
  std::vector<double> q;
  LocalAlphas alphas;
};

RandomInstance random_instance(SeedStream& s, int min_len = 2, int max_len = 12) {
  const int L = min_len + static_cast<int>(s.next_u64() % static_cast<std::uint64_t>(max_len - min_len + 1));
  RandomInstance inst;
  for (int g = 0; g < L - 1; ++g) {
    inst.q.push_back(0.05 + 0.90 * s.next_unit());
    inst.alphas.alpha.push_back(0.2 + 4.8 * s.next_unit());
  }
  return inst;
}

}  // namespace

TEST_CASE("local alphas follow the concentration formula") {
  SECTION("centred logit at zero previous instability gives alpha0") {
    const std::vector<double> l{0.4, 0.4, 0.4};
    const auto a = local_alphas(1.5, 0.0, l);
    for (double v : a.alpha) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.5, 1e-12));
  }
  SECTION("previous instability scales all gaps by e^hbar") {
    const std::vector<double> l{0.0, 0.0};
    const auto a = local_alphas(1.5, 1.0, l);
    for (double v : a.alpha) {
      REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.5 * std::exp(1.0), 1e-12));
      REQUIRE_THAT(v, Catch::Matchers::WithinAbs(4.0774, 1e-4));
    }
  }
  SECTION("adding a constant to every logit changes nothing") {
    SeedStream s(3);
    std::vector<double> l;
    for (int i = 0; i < 6; ++i) l.push_back(s.next_unit() * 4 - 2);
    const auto base = local_alphas(1.5, 0.3, l);
    for (double& v : l) v += 17.5;
    const auto shifted = local_alphas(1.5, 0.3, l);
    for (std::size_t g = 0; g < base.alpha.size(); ++g) {
      REQUIRE_THAT(shifted.alpha[g], Catch::Matchers::WithinRel(base.alpha[g], 1e-12));
    }
  }
  SECTION("non-positive alpha0 is rejected") {
    const std::vector<double> l{0.0};
    REQUIRE_THROWS_AS(local_alphas(0.0, 0.0, l), Error);
  }
}

TEST_CASE("CRP log prior") {
  SECTION("two cells, alpha 1: cut and stay both cost ln 2") {
    const auto a = fixed_alphas({1.0});
    REQUIRE_THAT(crp_log_prior({1}, a), Catch::Matchers::WithinAbs(std::log(0.5), 1e-12));
    REQUIRE_THAT(crp_log_prior({0}, a), Catch::Matchers::WithinAbs(std::log(0.5), 1e-12));
  }
  SECTION("block growth compounds: L=3, all stay") {
    const auto a = fixed_alphas({1.0, 1.0});
    REQUIRE_THAT(crp_log_prior({0, 0}, a), Catch::Matchers::WithinAbs(std::log(1.0 / 3.0), 1e-12));
  }
  SECTION("prior normalizes over all cut vectors") {
    SeedStream s(11);
    for (int rep = 0; rep < 30; ++rep) {
      const auto inst = random_instance(s);
      const int gaps = static_cast<int>(inst.q.size());
      double total = 0.0;
      for (std::size_t bits = 0; bits < (static_cast<std::size_t>(1) << gaps); ++bits) {
        CutVector cuts(static_cast<std::size_t>(gaps), 0);
        for (int g = 0; g < gaps; ++g) {
          if (bits & (static_cast<std::size_t>(1) << g)) cuts[static_cast<std::size_t>(g)] = 1;
        }
        total += std::exp(crp_log_prior(cuts, inst.alphas));
      }
      REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
  }
}

TEST_CASE("gap likelihood") {
  SECTION("uninformative evidence is flat") {
    const std::vector<double> q{0.5, 0.5, 0.5};
    for (const CutVector& cuts : {CutVector{0, 0, 0}, CutVector{1, 0, 1}, CutVector{1, 1, 1}}) {
      REQUIRE_THAT(log_likelihood(cuts, q), Catch::Matchers::WithinAbs(-3 * std::log(2.0), 1e-12));
    }
  }
  SECTION("single gap spot value") {
    const std::vector<double> q{0.9};
    REQUIRE_THAT(log_likelihood({1}, q), Catch::Matchers::WithinAbs(std::log(0.9), 1e-12));
  }
  SECTION("normalizes per gap") {
    SeedStream s(13);
    const auto inst = random_instance(s);
    const int gaps = static_cast<int>(inst.q.size());
    double total = 0.0;
    for (std::size_t bits = 0; bits < (static_cast<std::size_t>(1) << gaps); ++bits) {
      CutVector cuts(static_cast<std::size_t>(gaps), 0);
      for (int g = 0; g < gaps; ++g) {
        if (bits & (static_cast<std::size_t>(1) << g)) cuts[static_cast<std::size_t>(g)] = 1;
      }
      total += std::exp(log_likelihood(cuts, inst.q));
    }
    REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-9));
  }
  SECTION("q outside [0,1] is rejected, exact 0/1 is clamped") {
    const std::vector<double> bad{1.2};
    REQUIRE_THROWS_AS(log_likelihood({1}, bad), Error);
    const std::vector<double> extreme{1.0};
    REQUIRE(std::isfinite(log_likelihood({0}, extreme)));
  }
}

TEST_CASE("blocks from cuts") {
  SECTION("worked example") {
    const auto p = blocks_from_cuts({0, 1, 0, 0});
    REQUIRE(p.length == 5);
    REQUIRE(p.blocks == std::vector<Block>{{0, 2}, {2, 5}});
  }
  SECTION("no cuts is one block, all cuts are singletons") {
    REQUIRE(blocks_from_cuts({0, 0, 0}).blocks == std::vector<Block>{{0, 4}});
    REQUIRE(blocks_from_cuts({1, 1, 1}).block_count() == 4);
  }
  SECTION("round trip and tiling") {
    SeedStream s(17);
    for (int rep = 0; rep < 50; ++rep) {
      const int gaps = 1 + static_cast<int>(s.next_u64() % 10);
      CutVector cuts(static_cast<std::size_t>(gaps), 0);
      int ncuts = 0;
      for (auto& b : cuts) {
        b = static_cast<std::uint8_t>(s.next_u64() & 1);
        ncuts += b;
      }
      const auto p = blocks_from_cuts(cuts);
      REQUIRE(p.block_count() == 1 + ncuts);
      int expected = 0;
      for (const auto& blk : p.blocks) {
        REQUIRE(blk.begin == expected);
        REQUIRE(blk.size() >= 1);
        expected = blk.end;
      }
      REQUIRE(expected == p.length);
      REQUIRE(cuts_from_blocks(p) == cuts);
    }
  }
}

TEST_CASE("MAP partition") {
  SECTION("one cell window") {
    const std::vector<double> q;
    const auto p = map_partition(q, LocalAlphas{});
    REQUIRE(p.blocks == std::vector<Block>{{0, 1}});
  }

  SECTION("exact tie prefers stay") {
    const std::vector<double> q{0.5};
    const auto p = map_partition(q, fixed_alphas({1.0}));
    REQUIRE(p.block_count() == 1);
  }

  SECTION("single gap decision rule: cut iff q * alpha > 1 - q") {
    for (double q : {0.3, 0.45, 0.55, 0.8}) {
      for (double a : {0.5, 1.0, 2.5}) {
        const std::vector<double> qv{q};
        const auto p = map_partition(qv, fixed_alphas({a}));
        const bool expect_cut = q * a > (1.0 - q);
        REQUIRE((p.block_count() == 2) == expect_cut);
      }
    }
  }

  SECTION("matches exhaustive enumeration on random instances") {
    SeedStream s(23);
    for (int rep = 0; rep < 200; ++rep) {
      const auto inst = random_instance(s);
      const auto dp = cuts_from_blocks(map_partition(inst.q, inst.alphas));
      const auto brute = brute_force_map(inst.q, inst.alphas);
      REQUIRE(dp == brute);
    }
  }

  SECTION("raising the evidence at a cut never removes that cut") {
    SeedStream s(29);
    int checked = 0;
    for (int rep = 0; rep < 60; ++rep) {
      auto inst = random_instance(s, 2, 8);
      const auto base = brute_force_map(inst.q, inst.alphas);
      for (std::size_t g = 0; g < base.size(); ++g) {
        if (!base[g]) continue;
        auto boosted = inst.q;
        boosted[g] = boosted[g] + 0.5 * (1.0 - boosted[g]);
        const auto after = brute_force_map(boosted, inst.alphas);
        REQUIRE(after[g] == 1);
        ++checked;
      }
    }
    REQUIRE(checked > 30);
  }
}

TEST_CASE("posterior enumeration oracle") {
  SECTION("two cells, q = 0.8, alpha = 1 splits 0.8 / 0.2") {
    const std::vector<double> q{0.8};
    const auto post = enumerate_log_posterior(q, fixed_alphas({1.0}));
    REQUIRE(post.size() == 2);
    for (const auto& entry : post) {
      if (entry.cuts == CutVector{1}) {
        REQUIRE_THAT(entry.probability, Catch::Matchers::WithinAbs(0.8, 1e-9));
      } else {
        REQUIRE_THAT(entry.probability, Catch::Matchers::WithinAbs(0.2, 1e-9));
      }
    }
  }

  SECTION("normalizes and cross-checks against prior + likelihood") {
    SeedStream s(31);
    const auto inst = random_instance(s, 2, 10);
    const auto post = enumerate_log_posterior(inst.q, inst.alphas);
    double total = 0.0;
    double z = 0.0;
    for (const auto& entry : post) {
      total += entry.probability;
      z += std::exp(crp_log_prior(entry.cuts, inst.alphas) + log_likelihood(entry.cuts, inst.q));
    }
    REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-9));
    for (const auto& entry : post) {
      const double direct =
          std::exp(crp_log_prior(entry.cuts, inst.alphas) + log_likelihood(entry.cuts, inst.q)) / z;
      REQUIRE_THAT(entry.probability, Catch::Matchers::WithinAbs(direct, 1e-9));
    }
  }

  SECTION("oracle guard rejects long windows") {
    const std::vector<double> q(16, 0.5);
    REQUIRE_THROWS_AS(enumerate_log_posterior(q, fixed_alphas(std::vector<double>(16, 1.0))),
                      Error);
  }
}
