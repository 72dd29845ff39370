#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dystruct/harness.hpp"

using namespace dystruct;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dystruct-test-" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

ToyGrammar kGrammar;

Corpus small_corpus(int prompts = 4, std::uint64_t seed = 2024) {
  ToyCorpusSpec spec;
  spec.prompts = prompts;
  return make_toy_corpus(kGrammar, spec, seed);
}

DenoiserFactory toy_factory(const Corpus& corpus, ToyOracleConfig ocfg = {}) {
  return [corpus, ocfg]() -> std::unique_ptr<Denoiser> {
    return std::make_unique<ToyOracleDenoiser>(toy_oracle_from_corpus(kGrammar, ocfg, corpus));
  };
}

RunConfig desk_config() {
  RunConfig cfg;
  cfg.l_min = 6;
  cfg.l_max = 12;
  cfg.n_max = 48;
  return cfg;
}

// Rank-based AUC with midranks for ties.
double auc(std::span<const double> scores, std::span<const int> labels) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * (i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos_ranks = 0.0;
  int n_pos = 0, n_neg = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] == 1) {
      pos_ranks += rank[k];
      ++n_pos;
    } else {
      ++n_neg;
    }
  }
  REQUIRE(n_pos > 0);
  REQUIRE(n_neg > 0);
  return (pos_ranks - n_pos * (n_pos + 1.0) / 2.0) / (static_cast<double>(n_pos) * n_neg);
}

}  // namespace

TEST_CASE("toy corpus round trips through JSONL") {
  TempDir tmp;
  const Corpus corpus = small_corpus();
  save_corpus_jsonl(tmp.file("corpus.jsonl"), corpus);
  const Corpus loaded = load_corpus_jsonl(tmp.file("corpus.jsonl"));
  REQUIRE(loaded.entries.size() == corpus.entries.size());
  for (std::size_t i = 0; i < corpus.entries.size(); ++i) {
    REQUIRE(loaded.entries[i].id == corpus.entries[i].id);
    REQUIRE(loaded.entries[i].prompt == corpus.entries[i].prompt);
    REQUIRE(loaded.entries[i].truth == corpus.entries[i].truth);
    REQUIRE(loaded.entries[i].delims == corpus.entries[i].delims);
  }

  SECTION("duplicate ids are rejected") {
    Corpus bad = corpus;
    bad.entries.push_back(bad.entries.front());
    REQUIRE_THROWS_AS(bad.validate(), Error);
  }
}

TEST_CASE("benchmark rows, determinism and parallel equivalence") {
  const Corpus corpus = small_corpus(3);
  const auto factory = toy_factory(corpus);
  std::vector<MethodSpec> methods(2);
  methods[0].kind = MethodKind::dystruct;
  methods[0].config = desk_config();
  methods[1].kind = MethodKind::dystruct_no_weld;
  methods[1].config = desk_config();
  const std::vector<std::uint64_t> seeds{1, 2};

  const auto a = run_benchmark(factory, corpus, methods, seeds, 1);
  REQUIRE(a.rows.size() == 2 * 3 * 2);
  REQUIRE(a.errors.empty());

  SECTION("one prompt, two methods give two rows with the same id") {
    Corpus one;
    one.entries.push_back(corpus.entries.front());
    const std::vector<std::uint64_t> seed1{7};
    const auto r = run_benchmark(toy_factory(one), one, methods, seed1, 1);
    REQUIRE(r.rows.size() == 2);
    REQUIRE(r.rows[0].prompt_id == r.rows[1].prompt_id);
    REQUIRE(r.rows[0].method != r.rows[1].method);
  }

  SECTION("repeated invocations produce identical CSV bytes") {
    const auto b = run_benchmark(factory, corpus, methods, seeds, 1);
    REQUIRE(metrics_to_csv(a.rows) == metrics_to_csv(b.rows));
  }

  SECTION("parallelism never changes the output bytes") {
    const auto par = run_benchmark(factory, corpus, methods, seeds, 4);
    REQUIRE(metrics_to_csv(a.rows) == metrics_to_csv(par.rows));
    for (std::size_t i = 0; i < a.transcripts.size(); ++i) {
      REQUIRE(transcript_to_json(a.transcripts[i].second).dump() ==
              transcript_to_json(par.transcripts[i].second).dump());
    }
  }

  SECTION("metric counters match the transcripts exactly") {
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      REQUIRE(a.rows[i].calls == a.transcripts[i].second.derived_calls());
      REQUIRE(a.rows[i].iters == a.transcripts[i].second.derived_iterations());
      REQUIRE(a.rows[i].calls >= a.rows[i].iters);
      REQUIRE(a.rows[i].toks <= desk_config().n_max);
    }
  }
}

TEST_CASE("fixed-length baseline consumes exactly its budget") {
  Corpus one;
  one.entries.push_back(small_corpus(1).entries.front());
  std::vector<MethodSpec> methods(1);
  methods[0].kind = MethodKind::fixed_length;  // default 256/256 config
  const std::vector<std::uint64_t> seeds{3};
  const auto r = run_benchmark(toy_factory(one), one, methods, seeds, 1);
  REQUIRE(r.rows.size() == 1);
  REQUIRE(r.rows[0].calls == 256);
  REQUIRE(r.rows[0].iters == 256);
}

TEST_CASE("monotonic baseline threshold boundaries") {
  const Corpus corpus = small_corpus(1, 77);
  auto oracle = toy_oracle_from_corpus(kGrammar, ToyOracleConfig{}, corpus);
  const auto& entry = corpus.entries.front();

  SECTION("threshold 0 commits everything in one pass per window") {
    RunConfig cfg = desk_config();
    cfg.monotonic_threshold = 0.0;
    cfg.monotonic_window = 8;
    const auto result = monotonic_baseline(oracle, entry.prompt, cfg);
    int passes = 0, expands = 0;
    for (const auto& e : result.transcript.events) {
      if (std::holds_alternative<PassEvent>(e)) ++passes;
      if (std::holds_alternative<ExpandEvent>(e)) ++expands;
    }
    REQUIRE(passes == expands);
  }

  SECTION("threshold 1 commits exactly one position per step") {
    RunConfig cfg = desk_config();
    cfg.monotonic_threshold = 1.0;
    cfg.monotonic_window = 8;
    const auto result = monotonic_baseline(oracle, entry.prompt, cfg);
    int passes = 0, commits = 0;
    for (const auto& e : result.transcript.events) {
      if (std::holds_alternative<PassEvent>(e)) ++passes;
      if (std::holds_alternative<CommitEvent>(e)) ++commits;
    }
    REQUIRE(passes == commits);
  }
}

TEST_CASE("mcnemar statistics") {
  SECTION("worked example b=8, c=2") {
    PairedOutcomes pairs;
    pairs.n = 30;
    pairs.b = 8;
    pairs.c = 2;
    const auto rep = mcnemar(pairs);
    REQUIRE_THAT(rep.chi2_cc, Catch::Matchers::WithinAbs(2.5, 1e-12));
    REQUIRE_THAT(rep.p_exact, Catch::Matchers::WithinAbs(0.109375, 1e-12));
    REQUIRE(rep.p_cc > 0.0);
    REQUIRE(rep.p_cc < 1.0);
  }

  SECTION("balanced discordants clamp to zero and p_exact = 1") {
    PairedOutcomes pairs;
    pairs.n = 20;
    pairs.b = 5;
    pairs.c = 5;
    const auto rep = mcnemar(pairs);
    REQUIRE(rep.chi2_cc == 0.0);
    REQUIRE(rep.p_exact == 1.0);
  }

  SECTION("no discordants at all") {
    const auto rep = mcnemar(PairedOutcomes{});
    REQUIRE(rep.chi2_cc == 0.0);
    REQUIRE(rep.p_cc == 1.0);
    REQUIRE(rep.p_exact == 1.0);
  }

  SECTION("p_exact lives in (0,1] and saturates exactly when |b - c| <= 1") {
    // b = c gives 1 by symmetry; |b - c| = 1 also gives exactly 1 because the
    // lower half of an odd binomial carries mass 1/2. Anything further apart
    // is strictly below 1.
    SeedStream s(99);
    for (int rep_i = 0; rep_i < 200; ++rep_i) {
      PairedOutcomes pairs;
      pairs.b = static_cast<int>(s.next_u64() % 40);
      pairs.c = static_cast<int>(s.next_u64() % 40);
      pairs.n = pairs.b + pairs.c + static_cast<int>(s.next_u64() % 50);
      const auto rep = mcnemar(pairs);
      REQUIRE(rep.p_exact > 0.0);
      REQUIRE(rep.p_exact <= 1.0);
      if (pairs.b == pairs.c) REQUIRE(rep.p_exact == 1.0);
      if (std::abs(pairs.b - pairs.c) <= 1) {
        REQUIRE_THAT(rep.p_exact, Catch::Matchers::WithinAbs(1.0, 1e-12));
      } else {
        REQUIRE(rep.p_exact < 1.0);
      }
    }
  }

  SECTION("moderate counts: continuity-corrected p tracks the exact binomial") {
    PairedOutcomes pairs;
    pairs.n = 600;
    pairs.b = 300;
    pairs.c = 200;
    const auto rep = mcnemar(pairs);
    REQUIRE(std::abs(std::log10(rep.p_cc) - std::log10(rep.p_exact)) < 1.0);
  }

  SECTION("far tail b=400, c=100: both tiny, asymptotic p overshoots by design") {
    // The chi-square approximation degrades this deep in the tail; the two
    // p-values sit ~2.7 orders of magnitude apart. Both are computed
    // independently and both must be astronomically small.
    PairedOutcomes pairs;
    pairs.n = 600;
    pairs.b = 400;
    pairs.c = 100;
    const auto rep = mcnemar(pairs);
    REQUIRE_THAT(rep.chi2_cc, Catch::Matchers::WithinAbs(178.802, 1e-3));
    REQUIRE(rep.p_cc < 1e-39);
    REQUIRE(rep.p_exact < 1e-41);
    REQUIRE(std::abs(std::log10(rep.p_cc) - std::log10(rep.p_exact)) < 3.5);
  }
}

TEST_CASE("paired accounting is consistent with the metrics table") {
  const Corpus corpus = small_corpus(6, 5150);
  const auto factory = toy_factory(corpus);
  std::vector<MethodSpec> methods(2);
  methods[0].kind = MethodKind::dystruct;
  methods[0].config = desk_config();
  methods[1].kind = MethodKind::monotonic_baseline;
  methods[1].config = desk_config();
  const std::vector<std::uint64_t> seeds{11, 12};
  const auto bench = run_benchmark(factory, corpus, methods, seeds, 2);

  std::vector<MetricsRow> rows_a, rows_b;
  for (const auto& r : bench.rows) {
    (r.method == "dystruct" ? rows_a : rows_b).push_back(r);
  }
  const auto pairs = pair_outcomes(rows_a, rows_b);
  REQUIRE(pairs.n == static_cast<int>(rows_a.size()));
  REQUIRE_THAT(pairs.acc_a - pairs.acc_b,
               Catch::Matchers::WithinAbs(static_cast<double>(pairs.b - pairs.c) / pairs.n, 1e-12));
}

TEST_CASE("CSV and SVG emission") {
  TempDir tmp;
  std::vector<MetricsRow> rows;
  for (int i = 0; i < 3; ++i) {
    MetricsRow r;
    r.method = i < 2 ? "dystruct" : "fixed-length";
    r.prompt_id = "p" + std::to_string(i);
    r.seed = 5;
    r.exact = i % 2;
    r.tok_acc = 0.5 + 0.1 * i;
    r.toks = 10 + i;
    r.blks = 3;
    r.calls = 40 + i;
    r.iters = 39;
    rows.push_back(r);
  }

  SECTION("round trip through the loader") {
    emit_csv(rows, tmp.file("m.csv"));
    const auto back = load_csv(tmp.file("m.csv"));
    REQUIRE(metrics_to_csv(back) == metrics_to_csv(rows));
  }

  SECTION("empty tables are an error") {
    const std::vector<MetricsRow> empty;
    REQUIRE_THROWS_AS(metrics_to_csv(empty), Error);
    REQUIRE_THROWS_AS(emit_svg_plots(empty, tmp.file("x")), Error);
  }

  SECTION("unwritable path is an io error") {
    REQUIRE_THROWS_MATCHES(emit_csv(rows, "/nonexistent-dir/x.csv"), Error,
                           Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == Errc::io_error;
                           }));
  }

  SECTION("two methods give two bars per chart") {
    emit_svg_plots(rows, tmp.file(""));
    for (const std::string name : {"calls.svg", "accuracy.svg"}) {
      std::ifstream in(tmp.file(name));
      REQUIRE(in.good());
      std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      std::size_t bars = 0, at = 0;
      while ((at = body.find("class=\"bar\"", at)) != std::string::npos) {
        ++bars;
        ++at;
      }
      REQUIRE(bars == 2);
    }
  }
}

TEST_CASE("trajectories round trip and fit usable boundary weights") {
  const Corpus corpus = small_corpus(12, 4242);
  const auto factory = toy_factory(corpus);
  std::vector<MethodSpec> methods(1);
  methods[0].kind = MethodKind::dystruct;
  methods[0].config = desk_config();
  const std::vector<std::uint64_t> seeds{21};
  const auto bench =
      run_benchmark(factory, corpus, methods, seeds, 2, nullptr, /*collect_trajectories=*/true);
  REQUIRE(bench.trajectories.size() == corpus.entries.size());

  SECTION("JSONL round trip") {
    TempDir tmp;
    save_trajectories_jsonl(tmp.file("traj.jsonl"), bench.trajectories);
    const auto back = load_trajectories_jsonl(tmp.file("traj.jsonl"));
    REQUIRE(back.size() == bench.trajectories.size());
    REQUIRE(trajectory_to_json(back.front()).dump() ==
            trajectory_to_json(bench.trajectories.front()).dump());
  }

  SECTION("position examples and targets") {
    const auto examples = build_position_examples(bench.trajectories);
    REQUIRE_FALSE(examples.empty());
    int positives = 0;
    for (const auto& ex : examples) positives += ex.target;
    INFO("position targets: " << positives << " / " << examples.size());
    REQUIRE(positives > 0);
    REQUIRE(positives < static_cast<int>(examples.size()));
  }

  SECTION("fitted boundary weights separate held-out delimiter gaps (AUC >= 0.8)") {
    const std::size_t half = bench.trajectories.size() / 2;
    const std::vector<CalibrationTrajectory> train(bench.trajectories.begin(),
                                                   bench.trajectories.begin() + static_cast<std::ptrdiff_t>(half));
    const std::vector<CalibrationTrajectory> held(bench.trajectories.begin() + static_cast<std::ptrdiff_t>(half),
                                                  bench.trajectories.end());
    const auto train_examples = build_gap_examples(train);
    const auto held_examples = build_gap_examples(held);
    FitConfig fcfg;
    fcfg.lambda = 1e-3;
    const auto fitted = fit(train_examples, fcfg);

    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& ex : held_examples) {
      double z = 0.0;
      for (std::size_t i = 0; i < 4; ++i) z += fitted.w[i] * ex.phi[i];
      scores.push_back(z);
      labels.push_back(ex.target);
    }
    const double a = auc(scores, labels);
    INFO("held-out AUC: " << a);
    REQUIRE(a >= 0.8);
  }
}
