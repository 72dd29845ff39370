#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dystruct/decoder.hpp"

using namespace dystruct;

namespace {

const std::vector<TokenId> kPrompt{2, 3};

ToyOracleDenoiser chain_oracle(std::vector<int> segments, ToyOracleConfig cfg = {},
                               std::uint64_t truth_seed = 77) {
  ToyGrammar g;
  ToyOracleDenoiser oracle(g, cfg);
  oracle.add_truth(kPrompt, make_toy_truth(g, segments, SeedStream(truth_seed).derive("truth")));
  return oracle;
}

RunConfig small_config() {
  RunConfig cfg;
  cfg.l_min = 4;
  cfg.l_max = 10;
  cfg.n_max = 48;
  cfg.global_budget = 256;
  cfg.seed = 9001;
  return cfg;
}

}  // namespace

TEST_CASE("window length sampling follows Eq. 1 mechanics") {
  SECTION("mu endpoints") {
    REQUIRE(sample_window_length(0.0, 8, 48, SeedStream(1), 256).mu == 48.0);
    REQUIRE(sample_window_length(1.0, 8, 48, SeedStream(1), 256).mu == 8.0);
    REQUIRE(sample_window_length(0.5, 8, 48, SeedStream(1), 256).mu == 28.0);
  }
  SECTION("samples are clamped into [L_min, L_max]") {
    SeedStream root(22);
    for (int i = 0; i < 2000; ++i) {
      const auto draw = sample_window_length(0.5, 8, 48, root.derive("w", static_cast<std::uint64_t>(i)), 1000);
      REQUIRE(draw.length >= 8);
      REQUIRE(draw.length <= 48);
    }
  }
  SECTION("headroom caps the window") {
    const auto draw = sample_window_length(0.0, 8, 48, SeedStream(5), 6);
    REQUIRE(draw.length == 6);
    REQUIRE_THROWS_MATCHES(sample_window_length(0.0, 8, 48, SeedStream(5), 0), Error,
                           Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == Errc::limit_exceeded;
                           }));
  }
}

TEST_CASE("weld interval arithmetic") {
  const auto iv = weld_interval(0, 10, 20, 4);
  REQUIRE(iv.begin == 6);
  REQUIRE(iv.end == 14);
  REQUIRE(weld_interval(0, 10, 20, 0).empty());
  const auto clipped = weld_interval(8, 10, 12, 4);
  REQUIRE(clipped.begin == 8);
  REQUIRE(clipped.end == 12);
}

TEST_CASE("decode_block commit counts") {
  auto oracle = chain_oracle({12});
  RunConfig cfg = small_config();

  SECTION("|B| = 6, T = 6 commits one per step") {
    DecodeDriver driver(oracle, SequenceState(oracle.grammar().vocab, kPrompt, 48), cfg);
    driver.expand(1, 6.0, 6);
    const int steps = decode_block(driver, 0, 6, 6);
    REQUIRE(steps == 6);
    int commits = 0;
    for (const auto& e : driver.transcript().events) {
      if (std::holds_alternative<CommitEvent>(e)) ++commits;
    }
    REQUIRE(commits == 6);
    REQUIRE(driver.transcript().count_passes() == 6);
  }

  SECTION("|B| = 5, T = 2 commits 3 then 2") {
    DecodeDriver driver(oracle, SequenceState(oracle.grammar().vocab, kPrompt, 48), cfg);
    driver.expand(1, 5.0, 5);
    const int steps = decode_block(driver, 0, 5, 2);
    REQUIRE(steps == 2);
    std::vector<int> commits_per_pass;
    for (const auto& e : driver.transcript().events) {
      if (std::holds_alternative<PassEvent>(e)) commits_per_pass.push_back(0);
      if (std::holds_alternative<CommitEvent>(e) && !commits_per_pass.empty()) {
        ++commits_per_pass.back();
      }
    }
    REQUIRE(commits_per_pass == std::vector<int>{3, 2});
  }

  SECTION("a left-anchored block decodes the chain perfectly one step at a time") {
    // The block's left neighbour is committed ground truth, so confidence
    // ordering resolves the chain frontier-first and every token lands on
    // the true chain.
    ToyOracleConfig ocfg;
    ocfg.base_confidence = 0.6;
    ocfg.anchoring_gain = 0.3;
    auto anchored = chain_oracle({12}, ocfg);
    const auto& truth = anchored.truth_for(kPrompt);
    DecodeDriver driver(anchored, SequenceState(anchored.grammar().vocab, kPrompt, 48), cfg);
    driver.expand(1, 12.0, 12);
    for (int pos = 0; pos < 4; ++pos) driver.commit(pos, truth.tokens[static_cast<std::size_t>(pos)], 1.0);
    const int steps = decode_block(driver, 4, 10, 6);
    REQUIRE(steps == 6);
    for (int pos = 4; pos < 10; ++pos) {
      REQUIRE(driver.state().cell(pos).token == truth.tokens[static_cast<std::size_t>(pos)]);
    }
  }
}

TEST_CASE("full decode of a 12-token toy truth stops at EOS") {
  auto oracle = chain_oracle({4, 4, 4});
  RunConfig cfg;
  cfg.seed = 31;
  cfg.n_max = 64;
  const auto result = run(oracle, kPrompt, cfg);
  REQUIRE(result.stop_reason == "eos");
  REQUIRE(result.tokens.size() == 12);
  REQUIRE(result.transcript.stop_reason() == "eos");
  REQUIRE(result.iterations_used <= cfg.global_budget);
  REQUIRE(result.denoiser_calls == result.transcript.derived_calls());
  REQUIRE(result.iterations_used == result.transcript.derived_iterations());
  REQUIRE(result.denoiser_calls >= result.iterations_used);
}

TEST_CASE("zero budget forces a single commit pass per window") {
  auto oracle = chain_oracle({4, 4, 4});
  RunConfig cfg;
  cfg.seed = 32;
  cfg.n_max = 64;
  cfg.global_budget = 0;
  const auto result = run(oracle, kPrompt, cfg);
  REQUIRE(result.stop_reason == "budget");
  REQUIRE(result.iterations_used == 0);
  REQUIRE(result.transcript.count_passes() == 1);  // one forced pass, one window
  int expands = 0;
  for (const auto& e : result.transcript.events) {
    if (std::holds_alternative<ExpandEvent>(e)) ++expands;
  }
  REQUIRE(expands == 1);
}

TEST_CASE("identical seeds give byte-identical transcripts") {
  auto oracle = chain_oracle({5, 5, 5});
  RunConfig cfg = small_config();
  const auto a = run(oracle, kPrompt, cfg);
  const auto b = run(oracle, kPrompt, cfg);
  REQUIRE(transcript_to_json(a.transcript).dump() == transcript_to_json(b.transcript).dump());

  SECTION("a different seed diverges somewhere") {
    RunConfig other = cfg;
    other.seed += 1;
    const auto c = run(oracle, kPrompt, other);
    REQUIRE(transcript_to_json(a.transcript).dump() != transcript_to_json(c.transcript).dump());
  }
}

TEST_CASE("replaying a transcript reproduces the final state") {
  auto oracle = chain_oracle({5, 4, 6});
  RunConfig cfg = small_config();
  cfg.seed = 47;
  const auto result = run(oracle, kPrompt, cfg);

  const auto json_round_trip = transcript_from_json(transcript_to_json(result.transcript));
  const auto replayed = replay_transcript(json_round_trip);
  REQUIRE(replayed.size() == static_cast<int>(result.committed_cells.size()));
  for (int pos = 0; pos < replayed.size(); ++pos) {
    REQUIRE(replayed.cell(pos).committed());
    REQUIRE(replayed.cell(pos).token == result.committed_cells[static_cast<std::size_t>(pos)]);
  }
}

TEST_CASE("every window is fully committed before the next expansion") {
  auto oracle = chain_oracle({5, 4, 6, 5});
  RunConfig cfg = small_config();
  cfg.seed = 53;
  const auto result = run(oracle, kPrompt, cfg);

  // Walk the events: at each expand, everything before the new window must
  // be committed.
  SequenceState state(oracle.grammar().vocab, kPrompt, cfg.n_max);
  for (const auto& e : result.transcript.events) {
    if (const auto* ex = std::get_if<ExpandEvent>(&e)) {
      for (int pos = 0; pos < state.size(); ++pos) REQUIRE(state.cell(pos).committed());
      state.append_window(ex->length);
    } else if (const auto* c = std::get_if<CommitEvent>(&e)) {
      state.commit(c->pos, c->tok);
    } else if (const auto* r = std::get_if<RemaskEvent>(&e)) {
      state.remask(r->positions);
    }
  }
  for (int pos = 0; pos < state.size(); ++pos) REQUIRE(state.cell(pos).committed());
}

TEST_CASE("welding stays inside its interval and happens on multi-block windows") {
  auto oracle = chain_oracle({4, 4, 4, 4, 4});
  RunConfig cfg;
  cfg.seed = 61;
  cfg.n_max = 64;
  cfg.l_min = 8;
  cfg.l_max = 16;
  const auto result = run(oracle, kPrompt, cfg);
  REQUIRE(weld_mutations_local(result.transcript));

  int welds = 0;
  for (const auto& e : result.transcript.events) {
    if (std::holds_alternative<WeldEvent>(e)) ++welds;
  }
  INFO("welds executed: " << welds);
  REQUIRE(welds >= 1);
}

TEST_CASE("ablation toggles are bit-reproducible") {
  auto oracle = chain_oracle({4, 5, 4});
  for (const bool scheduling : {true, false}) {
    for (const bool welding : {true, false}) {
      RunConfig cfg = small_config();
      cfg.seed = 71;
      cfg.scheduling_enabled = scheduling;
      cfg.welding_enabled = welding;
      const auto a = run(oracle, kPrompt, cfg);
      const auto b = run(oracle, kPrompt, cfg);
      REQUIRE(transcript_to_json(a.transcript).dump() == transcript_to_json(b.transcript).dump());
    }
  }
}

TEST_CASE("static schedule mode runs and differs in bookkeeping only in order") {
  auto oracle = chain_oracle({4, 4, 4, 4});
  RunConfig cfg = small_config();
  cfg.seed = 83;
  cfg.schedule_mode = ScheduleMode::static_sort;
  const auto result = run(oracle, kPrompt, cfg);
  REQUIRE((result.stop_reason == "eos" || result.stop_reason == "n_max"));
  REQUIRE(result.iterations_used <= cfg.global_budget);
}

TEST_CASE("window instability centring") {
  SECTION("uniformly confident windows centre to one half") {
    ToyOracleConfig ocfg;
    ocfg.mode = ToyMode::independent;
    ocfg.anchoring_gain = 0.0;  // identical confidence everywhere
    ocfg.emit_hidden = false;
    auto oracle = chain_oracle({12}, ocfg);
    RunConfig cfg;
    cfg.seed = 97;
    cfg.n_max = 32;
    const auto result = run(oracle, kPrompt, cfg);
    for (const auto& e : result.transcript.events) {
      if (const auto* h = std::get_if<HbarEvent>(&e)) {
        REQUIRE_THAT(h->v, Catch::Matchers::WithinAbs(0.5, 1e-9));
        REQUIRE(h->raw > 0.0);
        REQUIRE(h->raw < 1.0);
      }
    }
  }

  SECTION("a one-cell window has hbar exactly one half") {
    auto oracle = chain_oracle({6});
    RunConfig cfg;
    cfg.seed = 101;
    cfg.l_min = 1;
    cfg.l_max = 1;
    cfg.n_max = 10;
    const auto result = run(oracle, kPrompt, cfg);
    bool saw_hbar = false;
    for (const auto& e : result.transcript.events) {
      if (const auto* h = std::get_if<HbarEvent>(&e)) {
        REQUIRE(h->v == 0.5);
        saw_hbar = true;
      }
    }
    REQUIRE(saw_hbar);
  }
}

TEST_CASE("denoiser failure carries the partial transcript") {
  struct FailingDenoiser final : Denoiser {
    DenoiserDescriptor descriptor() const override { return {Vocab{32, 0, 1}, std::nullopt, true}; }
    std::vector<Prediction> predict(std::span<const TokenId>, std::span<const Cell>,
                                    std::span<const int>) override {
      raise(Errc::protocol_error, "model went away");
    }
  };
  FailingDenoiser broken;
  RunConfig cfg = small_config();
  try {
    (void)run(broken, kPrompt, cfg);
    FAIL("expected DecodeFailure");
  } catch (const DecodeFailure& f) {
    REQUIRE(f.code() == Errc::protocol_error);
    bool has_expand = false;
    for (const auto& e : f.partial_transcript.events) {
      if (std::holds_alternative<ExpandEvent>(e)) has_expand = true;
    }
    REQUIRE(has_expand);
  }
}
