#pragma once

// Corpus-driven benchmarking: method specs mapping onto decoder toggles, the
// fixed-length and monotonic-confidence baselines, deterministic parallel
// execution over (prompt, method, seed) triples, metrics, paired McNemar
// significance tests, and CSV/SVG report emission.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dystruct/calibration.hpp"
#include "dystruct/decoder.hpp"
#include "dystruct/denoiser.hpp"

namespace dystruct {

// ============================================================================
// Corpus
// ============================================================================

struct CorpusEntry {
  std::string id;
  std::vector<TokenId> prompt;
  std::optional<std::vector<TokenId>> truth;
  std::optional<std::vector<int>> delims;  // gap indices of segment boundaries
};

struct Corpus {
  std::vector<CorpusEntry> entries;

  const CorpusEntry& by_id(const std::string& id) const {
    for (const auto& e : entries) {
      if (e.id == id) return e;
    }
    raise(Errc::bad_argument, "corpus: unknown prompt id " + id);
  }

  void validate() const {
    std::map<std::string, int> seen;
    for (const auto& e : entries) {
      require(!e.id.empty(), Errc::bad_argument, "corpus: empty prompt id");
      require(++seen[e.id] == 1, Errc::bad_argument, "corpus: duplicate prompt id " + e.id);
      require(!e.prompt.empty(), Errc::bad_argument, "corpus: empty prompt " + e.id);
    }
  }
};

inline nlohmann::json corpus_entry_to_json(const CorpusEntry& e) {
  nlohmann::json j;
  j["id"] = e.id;
  j["prompt"] = e.prompt;
  if (e.truth) j["truth"] = *e.truth;
  if (e.delims) j["delims"] = *e.delims;
  return j;
}

inline CorpusEntry corpus_entry_from_json(const nlohmann::json& j) {
  CorpusEntry e;
  e.id = j.at("id").get<std::string>();
  e.prompt = j.at("prompt").get<std::vector<TokenId>>();
  if (j.contains("truth") && !j.at("truth").is_null()) {
    e.truth = j.at("truth").get<std::vector<TokenId>>();
  }
  if (j.contains("delims") && !j.at("delims").is_null()) {
    e.delims = j.at("delims").get<std::vector<int>>();
  }
  return e;
}

inline void save_corpus_jsonl(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  require(out.good(), Errc::io_error, "cannot write corpus to " + path);
  for (const auto& e : corpus.entries) out << corpus_entry_to_json(e).dump() << "\n";
}

inline Corpus load_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io_error, "cannot read corpus from " + path);
  Corpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    require(!j.is_discarded(), Errc::io_error, "corpus line is not valid JSON");
    corpus.entries.push_back(corpus_entry_from_json(j));
  }
  corpus.validate();
  return corpus;
}

// ============================================================================
// Toy corpus generation
// ============================================================================

struct ToyCorpusSpec {
  int prompts = 20;
  int min_segments = 2;
  int max_segments = 4;
  int min_segment_len = 3;
  int max_segment_len = 6;
};

/// Chain-grammar corpus: unique prompts, each with a segmented ground truth
/// and the matching delimiter-gap annotations.
inline Corpus make_toy_corpus(const ToyGrammar& grammar, const ToyCorpusSpec& spec,
                              std::uint64_t seed) {
  Corpus corpus;
  SeedStream root(seed);
  for (int i = 0; i < spec.prompts; ++i) {
    auto stream = root.derive("prompt", static_cast<std::uint64_t>(i));
    CorpusEntry entry;
    entry.id = "toy-" + std::to_string(i);
    // Distinct prompts: index encoded in content tokens.
    entry.prompt = {grammar.wrap(grammar.content_begin + i),
                    grammar.wrap(grammar.content_begin + i / grammar.content_count() + 7),
                    grammar.wrap(static_cast<TokenId>(stream.next_u64() % grammar.content_count() +
                                                      grammar.content_begin))};
    const int n_segments =
        spec.min_segments +
        static_cast<int>(stream.next_u64() %
                         static_cast<std::uint64_t>(spec.max_segments - spec.min_segments + 1));
    std::vector<int> lengths;
    for (int s = 0; s < n_segments; ++s) {
      lengths.push_back(spec.min_segment_len +
                        static_cast<int>(stream.next_u64() %
                                         static_cast<std::uint64_t>(spec.max_segment_len -
                                                                    spec.min_segment_len + 1)));
    }
    const ToyTruth truth = make_toy_truth(grammar, lengths, stream.derive("truth"));
    entry.truth = truth.tokens;
    entry.delims = truth.delimiter_gaps();
    corpus.entries.push_back(std::move(entry));
  }
  corpus.validate();
  return corpus;
}

/// Oracle preloaded with every ground truth of the corpus.
inline ToyOracleDenoiser toy_oracle_from_corpus(const ToyGrammar& grammar,
                                                const ToyOracleConfig& config,
                                                const Corpus& corpus) {
  ToyOracleDenoiser oracle(grammar, config);
  for (const auto& e : corpus.entries) {
    require(e.truth.has_value(), Errc::bad_argument,
            "toy oracle needs ground truth for prompt " + e.id);
    ToyTruth truth;
    truth.tokens = *e.truth;
    truth.segment_final.assign(truth.tokens.size(), 0);
    truth.segment_final.back() = 1;
    if (e.delims) {
      for (int g : *e.delims) truth.segment_final.at(static_cast<std::size_t>(g)) = 1;
    }
    truth.validate(grammar);
    oracle.add_truth(e.prompt, std::move(truth));
  }
  return oracle;
}

// ============================================================================
// Methods
// ============================================================================

enum class MethodKind {
  fixed_length,
  monotonic_baseline,
  dystruct,
  dystruct_no_schedule,
  dystruct_no_weld,
  dystruct_no_schedule_no_weld,
};

inline std::string to_string(MethodKind k) {
  switch (k) {
    case MethodKind::fixed_length: return "fixed-length";
    case MethodKind::monotonic_baseline: return "monotonic-baseline";
    case MethodKind::dystruct: return "dystruct";
    case MethodKind::dystruct_no_schedule: return "dystruct-no-schedule";
    case MethodKind::dystruct_no_weld: return "dystruct-no-weld";
    case MethodKind::dystruct_no_schedule_no_weld: return "dystruct-no-schedule-no-weld";
  }
  raise(Errc::bad_argument, "unknown method kind");
}

inline MethodKind method_kind_from_string(const std::string& s) {
  if (s == "fixed-length") return MethodKind::fixed_length;
  if (s == "monotonic-baseline") return MethodKind::monotonic_baseline;
  if (s == "dystruct") return MethodKind::dystruct;
  if (s == "dystruct-no-schedule") return MethodKind::dystruct_no_schedule;
  if (s == "dystruct-no-weld") return MethodKind::dystruct_no_weld;
  if (s == "dystruct-no-schedule-no-weld") return MethodKind::dystruct_no_schedule_no_weld;
  raise(Errc::bad_argument, "unknown method: " + s);
}

struct MethodSpec {
  MethodKind kind = MethodKind::dystruct;
  RunConfig config;  // overrides; ablation toggles are forced by the kind

  std::string name() const { return to_string(kind); }

  RunConfig effective_config() const {
    RunConfig c = config;
    switch (kind) {
      case MethodKind::dystruct:
        c.scheduling_enabled = true;
        c.welding_enabled = true;
        break;
      case MethodKind::dystruct_no_schedule:
        c.scheduling_enabled = false;
        c.welding_enabled = true;
        break;
      case MethodKind::dystruct_no_weld:
        c.scheduling_enabled = true;
        c.welding_enabled = false;
        break;
      case MethodKind::dystruct_no_schedule_no_weld:
        c.scheduling_enabled = false;
        c.welding_enabled = false;
        break;
      default:
        break;
    }
    return c;
  }
};

// ============================================================================
// Baselines
// ============================================================================

/**
 * Fixed-length baseline: one window spanning the full token limit, refined to
 * the iteration budget. Each step predicts everything still masked and
 * commits the top ceil(N / budget) by confidence, so with the default
 * N = budget = 256 the run consumes exactly 256 refinement iterations.
 */
inline RunResult fixed_length_baseline(Denoiser& model, std::span<const TokenId> prompt,
                                       const RunConfig& config) {
  config.validate();
  require(!prompt.empty(), Errc::bad_argument, "fixed_length_baseline: empty prompt");
  const DenoiserDescriptor descriptor = model.descriptor();
  DecodeDriver driver(model,
                      SequenceState(descriptor.vocab, {prompt.begin(), prompt.end()}, config.n_max),
                      config);
  RunResult result;
  std::string stop_reason = "n_max";
  if (config.n_max >= 1) {
    const WindowSpan window = driver.expand(1, static_cast<double>(config.n_max), config.n_max);
    if (config.global_budget == 0) {
      forced_commit(driver, window);
      stop_reason = "budget";
    } else {
      const int per_step = (config.n_max + config.global_budget - 1) / config.global_budget;
      while (true) {
        const auto masked = driver.masked_in(window.start, window.end());
        if (masked.empty()) break;
        if (driver.ledger().charge(1) == 0) {
          forced_commit(driver, window);
          stop_reason = "budget";
          break;
        }
        const auto preds = driver.predict_masked(masked);
        detail::commit_top(driver, preds, per_step);
        for (int pos : masked) {
          auto& hist = driver.history()[static_cast<std::size_t>(pos)];
          ++hist.scope_steps;
          if (!driver.state().cell(pos).committed()) ++hist.rejected_steps;
        }
      }
      if (stop_reason != "budget" && driver.state().has_committed_eos()) stop_reason = "eos";
    }
  }
  driver.transcript().events.push_back(StopEvent{stop_reason});
  result.stop_reason = stop_reason;
  result.tokens = driver.state().truncate_at_first_eos();
  result.denoiser_calls = driver.calls();
  result.iterations_used = driver.ledger().used();
  for (int pos = 0; pos < driver.state().size(); ++pos) {
    result.committed_cells.push_back(driver.state().cell(pos).token);
  }
  result.transcript = std::move(driver.transcript());
  return result;
}

/**
 * Monotonic confidence baseline: appends a fixed-size tail window whenever
 * the frontier EOS confidence is low, then decodes left to right committing
 * every position above the confidence threshold (or the single most
 * confident when none qualifies). A simplified stand-in for monotonic
 * variable-length decoders; not a faithful reimplementation of any of them.
 */
inline RunResult monotonic_baseline(Denoiser& model, std::span<const TokenId> prompt,
                                    const RunConfig& config) {
  config.validate();
  require(!prompt.empty(), Errc::bad_argument, "monotonic_baseline: empty prompt");
  const DenoiserDescriptor descriptor = model.descriptor();
  DecodeDriver driver(model,
                      SequenceState(descriptor.vocab, {prompt.begin(), prompt.end()}, config.n_max),
                      config);
  const TokenId mask_id = descriptor.vocab.mask_id;
  RunResult result;
  std::string stop_reason;
  int t = 0;
  while (true) {
    if (driver.state().has_committed_eos()) {
      stop_reason = "eos";
      break;
    }
    if (driver.state().headroom() < 1) {
      stop_reason = "n_max";
      break;
    }
    const int length = std::min(config.monotonic_window, driver.state().headroom());
    const WindowSpan window = driver.expand(++t, static_cast<double>(length), length);
    bool forced = false;
    while (true) {
      const auto masked = driver.masked_in(window.start, window.end());
      if (masked.empty()) break;
      if (driver.ledger().charge(1) == 0) {
        forced_commit(driver, window);
        forced = true;
        break;
      }
      const auto preds = driver.predict_masked(masked);
      int committed = 0;
      for (const auto& pred : preds) {
        const auto [tok, prob] = best_excluding(pred.dist, mask_id);
        if (prob > config.monotonic_threshold) {
          driver.commit(pred.position, tok, prob);
          ++committed;
        }
      }
      if (committed == 0) detail::commit_top(driver, preds, 1);
      for (int pos : masked) {
        auto& hist = driver.history()[static_cast<std::size_t>(pos)];
        ++hist.scope_steps;
        if (!driver.state().cell(pos).committed()) ++hist.rejected_steps;
      }
    }
    if (forced) {
      stop_reason = "budget";
      break;
    }
    if (driver.state().has_committed_eos()) {
      stop_reason = "eos";
      break;
    }
    // Expand again only while the frontier looks unfinished.
    const auto& frontier = driver.history()[static_cast<std::size_t>(window.end() - 1)];
    const double eos_conf = frontier.last_dist.prob_of(descriptor.vocab.eos_id);
    if (eos_conf >= config.monotonic_eos_threshold) {
      stop_reason = "frontier";
      break;
    }
  }
  driver.transcript().events.push_back(StopEvent{stop_reason});
  result.stop_reason = stop_reason;
  result.tokens = driver.state().truncate_at_first_eos();
  result.denoiser_calls = driver.calls();
  result.iterations_used = driver.ledger().used();
  for (int pos = 0; pos < driver.state().size(); ++pos) {
    result.committed_cells.push_back(driver.state().cell(pos).token);
  }
  result.transcript = std::move(driver.transcript());
  return result;
}

inline RunResult run_method(Denoiser& model, std::span<const TokenId> prompt,
                            const MethodSpec& spec, const WeightsArtifact* weights = nullptr) {
  const RunConfig config = spec.effective_config();
  switch (spec.kind) {
    case MethodKind::fixed_length: return fixed_length_baseline(model, prompt, config);
    case MethodKind::monotonic_baseline: return monotonic_baseline(model, prompt, config);
    default: return run(model, prompt, config, weights);
  }
}

// ============================================================================
// Metrics
// ============================================================================

struct MetricsRow {
  std::string method;
  std::string prompt_id;
  std::uint64_t seed = 0;
  int exact = 0;
  double tok_acc = 0.0;
  int toks = 0;
  int blks = 0;
  int calls = 0;
  int iters = 0;
};

/// Token accuracy against ground truth: positionwise matches over the longer
/// of the two lengths, so both truncation and overrun cost accuracy.
inline double token_accuracy(std::span<const TokenId> output, std::span<const TokenId> truth) {
  const std::size_t denom = std::max(output.size(), truth.size());
  if (denom == 0) return 1.0;
  const std::size_t m = std::min(output.size(), truth.size());
  int matches = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (output[i] == truth[i]) ++matches;
  }
  return static_cast<double>(matches) / static_cast<double>(denom);
}

inline MetricsRow metrics_from_result(const std::string& method, const CorpusEntry& entry,
                                      std::uint64_t seed, const RunResult& result) {
  MetricsRow row;
  row.method = method;
  row.prompt_id = entry.id;
  row.seed = seed;
  row.toks = static_cast<int>(result.tokens.size());
  row.calls = result.denoiser_calls;
  row.iters = result.iterations_used;
  int blks = result.transcript.total_blocks();
  if (blks == 0) {
    for (const auto& e : result.transcript.events) {
      if (std::holds_alternative<ExpandEvent>(e)) ++blks;  // baselines: one block per window
    }
  }
  row.blks = blks;
  if (entry.truth) {
    row.exact = result.tokens == *entry.truth ? 1 : 0;
    row.tok_acc = token_accuracy(result.tokens, *entry.truth);
  }
  return row;
}

// ============================================================================
// Benchmark runner
// ============================================================================

using DenoiserFactory = std::function<std::unique_ptr<Denoiser>()>;

struct BenchTaskKey {
  std::string method;
  std::string prompt_id;
  std::uint64_t seed = 0;
};

struct BenchResult {
  std::vector<MetricsRow> rows;  // deterministic (method, prompt, seed) order
  std::vector<std::pair<BenchTaskKey, DecodeTranscript>> transcripts;
  std::vector<std::string> errors;  // per-task failure notes; run continues
  std::vector<CalibrationTrajectory> trajectories;  // only for entries with truth
};

/// Per-task decode seed: mixes the sweep seed with the prompt id so every
/// (prompt, seed) pair owns an independent stream regardless of method order.
inline std::uint64_t task_seed(std::uint64_t sweep_seed, const std::string& prompt_id) {
  return detail::splitmix_finalize(sweep_seed ^ detail::fnv1a64(prompt_id));
}

inline CalibrationTrajectory trajectory_from_result(const CorpusEntry& entry,
                                                    const RunResult& result) {
  CalibrationTrajectory traj;
  traj.id = entry.id;
  require(entry.truth.has_value(), Errc::bad_argument,
          "trajectory_from_result: entry has no ground truth");
  const std::size_t n = std::min(entry.truth->size(), result.committed_cells.size());
  traj.truth.assign(entry.truth->begin(), entry.truth->begin() + static_cast<std::ptrdiff_t>(n));
  for (std::size_t j = 0; j < n; ++j) {
    TrajectoryPosition pos;
    pos.phi = result.position_phi[j];
    for (int i = 0; i < 7; ++i) pos.available[static_cast<std::size_t>(i)] = result.position_avail[j][static_cast<std::size_t>(i)];
    pos.final_token = result.committed_cells[j];
    pos.remasked = result.position_remasked[j] != 0;
    traj.positions.push_back(pos);
  }
  for (std::size_t g = 0; g + 1 < n; ++g) {
    const auto& psi = result.gap_psi[g];
    traj.gap_psi.push_back(psi.value_or(std::array<double, 4>{}));
    traj.gap_available.push_back(psi.has_value() ? 1 : 0);
  }
  if (entry.delims) traj.delimiter_gaps = entry.delims;
  return traj;
}

inline BenchResult run_benchmark(const DenoiserFactory& factory, const Corpus& corpus,
                                 std::span<const MethodSpec> methods,
                                 std::span<const std::uint64_t> seeds, int parallelism = 1,
                                 const WeightsArtifact* weights = nullptr,
                                 bool collect_trajectories = false) {
  corpus.validate();
  require(!corpus.entries.empty(), Errc::bad_argument, "run_benchmark: empty corpus");
  require(!methods.empty(), Errc::bad_argument, "run_benchmark: no methods");
  require(!seeds.empty(), Errc::bad_argument, "run_benchmark: no seeds");
  require(parallelism >= 1, Errc::bad_argument, "run_benchmark: parallelism must be >= 1");

  struct Task {
    const MethodSpec* spec;
    const CorpusEntry* entry;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (const auto& spec : methods) {
    for (const auto& entry : corpus.entries) {
      for (std::uint64_t seed : seeds) tasks.push_back({&spec, &entry, seed});
    }
  }

  struct Slot {
    MetricsRow row;
    DecodeTranscript transcript;
    std::optional<CalibrationTrajectory> trajectory;
    std::string error;
  };
  std::vector<Slot> slots(tasks.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    auto model = factory();
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) break;
      const Task& task = tasks[i];
      Slot& slot = slots[i];
      MethodSpec spec = *task.spec;
      spec.config.seed = task_seed(task.seed, task.entry->id);
      try {
        const RunResult result = run_method(*model, task.entry->prompt, spec, weights);
        slot.row = metrics_from_result(spec.name(), *task.entry, task.seed, result);
        slot.transcript = result.transcript;
        if (collect_trajectories && task.entry->truth && spec.kind != MethodKind::fixed_length &&
            spec.kind != MethodKind::monotonic_baseline) {
          slot.trajectory = trajectory_from_result(*task.entry, result);
        }
      } catch (const std::exception& e) {
        slot.row.method = spec.name();
        slot.row.prompt_id = task.entry->id;
        slot.row.seed = task.seed;
        slot.error = spec.name() + "/" + task.entry->id + "/" + std::to_string(task.seed) + ": " +
                     e.what();
      }
    }
  };

  std::vector<std::thread> threads;
  const int n_threads = std::min<int>(parallelism, static_cast<int>(tasks.size()));
  threads.reserve(static_cast<std::size_t>(n_threads));
  for (int i = 0; i < n_threads; ++i) threads.emplace_back(worker);
  for (auto& th : threads) th.join();

  BenchResult out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    out.rows.push_back(std::move(slots[i].row));
    out.transcripts.emplace_back(
        BenchTaskKey{tasks[i].spec->name(), tasks[i].entry->id, tasks[i].seed},
        std::move(slots[i].transcript));
    if (slots[i].trajectory) out.trajectories.push_back(std::move(*slots[i].trajectory));
    if (!slots[i].error.empty()) out.errors.push_back(std::move(slots[i].error));
  }
  return out;
}

// ============================================================================
// McNemar paired test
// ============================================================================

struct PairedOutcomes {
  int n = 0;   // matched prompts
  int b = 0;   // A correct, B wrong
  int c = 0;   // B correct, A wrong
  double acc_a = 0.0;
  double acc_b = 0.0;
};

inline PairedOutcomes pair_outcomes(std::span<const MetricsRow> a, std::span<const MetricsRow> b) {
  std::map<std::pair<std::string, std::uint64_t>, int> correct_b;
  for (const auto& row : b) correct_b[{row.prompt_id, row.seed}] = row.exact;
  PairedOutcomes out;
  int sum_a = 0, sum_b = 0;
  for (const auto& row : a) {
    const auto it = correct_b.find({row.prompt_id, row.seed});
    if (it == correct_b.end()) continue;
    ++out.n;
    sum_a += row.exact;
    sum_b += it->second;
    if (row.exact == 1 && it->second == 0) ++out.b;
    if (row.exact == 0 && it->second == 1) ++out.c;
  }
  if (out.n > 0) {
    out.acc_a = static_cast<double>(sum_a) / out.n;
    out.acc_b = static_cast<double>(sum_b) / out.n;
  }
  return out;
}

struct McNemarReport {
  int n = 0;
  double acc_a = 0.0;
  double acc_b = 0.0;
  int b = 0;
  int c = 0;
  double chi2_cc = 0.0;
  double p_cc = 1.0;
  double p_exact = 1.0;
};

/// Continuity-corrected chi-square plus the exact two-sided binomial p-value
/// computed by direct summation over the discordant pairs.
inline McNemarReport mcnemar(const PairedOutcomes& pairs) {
  McNemarReport rep;
  rep.n = pairs.n;
  rep.acc_a = pairs.acc_a;
  rep.acc_b = pairs.acc_b;
  rep.b = pairs.b;
  rep.c = pairs.c;
  const int discordant = pairs.b + pairs.c;
  if (discordant == 0) {
    rep.chi2_cc = 0.0;
    rep.p_cc = 1.0;
    rep.p_exact = 1.0;
    return rep;
  }
  const double corrected = std::max(std::abs(static_cast<double>(pairs.b) - pairs.c) - 1.0, 0.0);
  rep.chi2_cc = corrected * corrected / discordant;
  rep.p_cc = std::erfc(std::sqrt(rep.chi2_cc / 2.0));  // chi-square(1) upper tail

  const int m = std::min(pairs.b, pairs.c);
  double tail = 0.0;
  for (int i = 0; i <= m; ++i) {
    tail += std::exp(std::lgamma(discordant + 1.0) - std::lgamma(i + 1.0) -
                     std::lgamma(discordant - i + 1.0) - discordant * std::log(2.0));
  }
  rep.p_exact = std::min(1.0, 2.0 * tail);
  return rep;
}

inline nlohmann::json mcnemar_to_json(const McNemarReport& rep) {
  nlohmann::json j;
  j["n"] = rep.n;
  j["acc_a"] = rep.acc_a;
  j["acc_b"] = rep.acc_b;
  j["b"] = rep.b;
  j["c"] = rep.c;
  j["chi2_cc"] = rep.chi2_cc;
  j["p_cc"] = rep.p_cc;
  j["p_exact"] = rep.p_exact;
  return j;
}

// ============================================================================
// Reports
// ============================================================================

inline constexpr const char* kCsvHeader = "method,prompt_id,seed,exact,tok_acc,toks,blks,calls,iters";

inline std::string metrics_to_csv(std::span<const MetricsRow> rows) {
  require(!rows.empty(), Errc::bad_argument, "metrics_to_csv: empty table");
  std::string out = kCsvHeader;
  out.push_back('\n');
  char buf[64];
  for (const auto& r : rows) {
    out += r.method;
    out.push_back(',');
    out += r.prompt_id;
    out.push_back(',');
    out += std::to_string(r.seed);
    out.push_back(',');
    out += std::to_string(r.exact);
    out.push_back(',');
    std::snprintf(buf, sizeof(buf), "%.6f", r.tok_acc);
    out += buf;
    out.push_back(',');
    out += std::to_string(r.toks);
    out.push_back(',');
    out += std::to_string(r.blks);
    out.push_back(',');
    out += std::to_string(r.calls);
    out.push_back(',');
    out += std::to_string(r.iters);
    out.push_back('\n');
  }
  return out;
}

inline void emit_csv(std::span<const MetricsRow> rows, const std::string& path) {
  const std::string csv = metrics_to_csv(rows);
  std::ofstream out(path);
  require(out.good(), Errc::io_error, "cannot write CSV to " + path);
  out << csv;
  require(out.good(), Errc::io_error, "failed writing CSV to " + path);
}

inline std::vector<MetricsRow> load_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io_error, "cannot read CSV from " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Errc::io_error, "CSV is empty: " + path);
  require(line == kCsvHeader, Errc::io_error, "unexpected CSV header in " + path);
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    MetricsRow r;
    std::getline(ss, r.method, ',');
    std::getline(ss, r.prompt_id, ',');
    std::getline(ss, field, ',');
    r.seed = std::stoull(field);
    std::getline(ss, field, ',');
    r.exact = std::stoi(field);
    std::getline(ss, field, ',');
    r.tok_acc = std::stod(field);
    std::getline(ss, field, ',');
    r.toks = std::stoi(field);
    std::getline(ss, field, ',');
    r.blks = std::stoi(field);
    std::getline(ss, field, ',');
    r.calls = std::stoi(field);
    std::getline(ss, field, ',');
    r.iters = std::stoi(field);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace detail {

struct BarDatum {
  std::string label;
  double value;
};

inline std::string render_bar_chart(const std::string& title, std::span<const BarDatum> bars) {
  const int width = 120 * static_cast<int>(bars.size()) + 80;
  const int height = 260;
  double max_value = 1e-9;
  for (const auto& b : bars) max_value = std::max(max_value, b.value);
  std::string svg;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\">\n", width,
                height);
  svg += buf;
  std::snprintf(buf, sizeof(buf), "  <text x=\"10\" y=\"20\" font-size=\"14\">%s</text>\n",
                title.c_str());
  svg += buf;
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double h = 180.0 * bars[i].value / max_value;
    const int x = 60 + static_cast<int>(i) * 120;
    std::snprintf(buf, sizeof(buf),
                  "  <rect class=\"bar\" x=\"%d\" y=\"%.2f\" width=\"80\" height=\"%.2f\" "
                  "fill=\"#4a7fb5\"/>\n",
                  x, 220.0 - h, h);
    svg += buf;
    std::snprintf(buf, sizeof(buf), "  <text x=\"%d\" y=\"238\" font-size=\"11\">%s</text>\n", x,
                  bars[i].label.c_str());
    svg += buf;
    std::snprintf(buf, sizeof(buf), "  <text x=\"%d\" y=\"%.2f\" font-size=\"11\">%.3f</text>\n", x,
                  214.0 - h, bars[i].value);
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace detail

/// Two bar charts: mean denoiser calls per method and mean exact-match
/// accuracy per method, written as <prefix>calls.svg and <prefix>accuracy.svg.
inline void emit_svg_plots(std::span<const MetricsRow> rows, const std::string& prefix) {
  require(!rows.empty(), Errc::bad_argument, "emit_svg_plots: empty table");
  std::vector<std::string> methods;
  for (const auto& r : rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) {
      methods.push_back(r.method);
    }
  }
  std::vector<detail::BarDatum> calls, accuracy;
  for (const auto& m : methods) {
    double call_sum = 0.0, acc_sum = 0.0;
    int n = 0;
    for (const auto& r : rows) {
      if (r.method != m) continue;
      call_sum += r.calls;
      acc_sum += r.exact;
      ++n;
    }
    calls.push_back({m, call_sum / n});
    accuracy.push_back({m, acc_sum / n});
  }
  auto write = [](const std::string& path, const std::string& body) {
    std::ofstream out(path);
    require(out.good(), Errc::io_error, "cannot write SVG to " + path);
    out << body;
  };
  write(prefix + "calls.svg", detail::render_bar_chart("mean denoiser calls", calls));
  write(prefix + "accuracy.svg", detail::render_bar_chart("exact-match accuracy", accuracy));
}

// ============================================================================
// Trajectory files (for the calibrate CLI)
// ============================================================================

inline nlohmann::json trajectory_to_json(const CalibrationTrajectory& traj) {
  nlohmann::json j;
  j["id"] = traj.id;
  j["truth"] = traj.truth;
  nlohmann::json positions = nlohmann::json::array();
  for (const auto& p : traj.positions) {
    nlohmann::json jp;
    jp["phi"] = p.phi;
    jp["avail"] = p.available;
    jp["final"] = p.final_token;
    jp["remasked"] = p.remasked;
    positions.push_back(std::move(jp));
  }
  j["positions"] = std::move(positions);
  j["gap_psi"] = traj.gap_psi;
  j["gap_avail"] = traj.gap_available;
  if (traj.delimiter_gaps) j["delims"] = *traj.delimiter_gaps;
  return j;
}

inline CalibrationTrajectory trajectory_from_json(const nlohmann::json& j) {
  CalibrationTrajectory traj;
  traj.id = j.at("id").get<std::string>();
  traj.truth = j.at("truth").get<std::vector<TokenId>>();
  for (const auto& jp : j.at("positions")) {
    TrajectoryPosition p;
    p.phi = jp.at("phi").get<std::array<double, 7>>();
    p.available = jp.at("avail").get<std::array<std::uint8_t, 7>>();
    p.final_token = jp.at("final").get<TokenId>();
    p.remasked = jp.at("remasked").get<bool>();
    traj.positions.push_back(p);
  }
  traj.gap_psi = j.at("gap_psi").get<std::vector<std::array<double, 4>>>();
  traj.gap_available = j.at("gap_avail").get<std::vector<std::uint8_t>>();
  if (j.contains("delims")) traj.delimiter_gaps = j.at("delims").get<std::vector<int>>();
  return traj;
}

inline void save_trajectories_jsonl(const std::string& path,
                                    std::span<const CalibrationTrajectory> trajectories) {
  std::ofstream out(path);
  require(out.good(), Errc::io_error, "cannot write trajectories to " + path);
  for (const auto& t : trajectories) out << trajectory_to_json(t).dump() << "\n";
}

inline std::vector<CalibrationTrajectory> load_trajectories_jsonl(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io_error, "cannot read trajectories from " + path);
  std::vector<CalibrationTrajectory> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    require(!j.is_discarded(), Errc::io_error, "trajectory line is not valid JSON");
    out.push_back(trajectory_from_json(j));
  }
  return out;
}

// ============================================================================
// Chain-consistency accounting (toy corpora)
// ============================================================================

/// Total chain violations of a benchmark run's final states against the toy
/// ground truths, summed over all rows of one method.
inline int total_chain_violations(const ToyGrammar& grammar, const Corpus& corpus,
                                  const BenchResult& bench, const std::string& method) {
  int total = 0;
  for (const auto& [key, transcript] : bench.transcripts) {
    if (key.method != method) continue;
    const CorpusEntry& entry = corpus.by_id(key.prompt_id);
    if (!entry.truth) continue;
    ToyTruth truth;
    truth.tokens = *entry.truth;
    truth.segment_final.assign(truth.tokens.size(), 0);
    truth.segment_final.back() = 1;
    if (entry.delims) {
      for (int g : *entry.delims) truth.segment_final.at(static_cast<std::size_t>(g)) = 1;
    }
    const SequenceState final_state = replay_transcript(transcript);
    total += count_chain_violations(grammar, truth, final_state.response());
  }
  return total;
}

}  // namespace dystruct
