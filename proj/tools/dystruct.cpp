// Command-line front end: decode one prompt, calibrate weights from
// trajectories, benchmark methods over a corpus, inspect partitions, and run
// paired significance tests on result tables.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dystruct/calibration.hpp"
#include "dystruct/decoder.hpp"
#include "dystruct/denoiser.hpp"
#include "dystruct/harness.hpp"
#include "dystruct/partition.hpp"
#include "dystruct/protocol.hpp"
#include "dystruct/transcript.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOptions {
  dystruct::RunConfig config;
  std::string schedule_mode = "greedy";
  bool no_scheduling = false;
  bool no_welding = false;
  std::string external_cmd;
};

void add_config_flags(CLI::App* cmd, CommonOptions& opt) {
  cmd->add_option("--l-min", opt.config.l_min, "minimum window expansion length");
  cmd->add_option("--l-max", opt.config.l_max, "maximum window expansion length");
  cmd->add_option("--alpha0", opt.config.alpha0, "base CRP concentration");
  cmd->add_option("--gamma", opt.config.gamma, "context-adjacency priority weight");
  cmd->add_option("--t-min", opt.config.t_min, "minimum refinement steps per block");
  cmd->add_option("--t-max", opt.config.t_max, "maximum refinement steps per block");
  cmd->add_option("--r-weld", opt.config.r_weld, "edge-welding radius");
  cmd->add_option("--weld-steps", opt.config.weld_steps, "refinement steps per weld");
  cmd->add_option("--diag-steps", opt.config.diag_steps, "diagnostic pass steps (K)");
  cmd->add_option("--commit-fraction", opt.config.commit_fraction,
                  "diagnostic per-step commit fraction");
  cmd->add_option("--n-max", opt.config.n_max, "global token limit");
  cmd->add_option("--budget", opt.config.global_budget, "global unmasking iteration budget");
  cmd->add_option("--weights", opt.config.weights_path, "weights artifact (JSON)");
  cmd->add_option("--seed", opt.config.seed, "master seed");
  cmd->add_option("--schedule-mode", opt.schedule_mode, "greedy | static")
      ->check(CLI::IsMember({"greedy", "static"}));
  cmd->add_flag("--no-scheduling", opt.no_scheduling, "fixed left-to-right block order");
  cmd->add_flag("--no-welding", opt.no_welding, "disable boundary repair");
  cmd->add_option("--weld-remask-fraction", opt.config.weld_remask_fraction,
                  "fraction of the weld interval to remask");
  cmd->add_option("--temp-dist-step", opt.config.temp_dist_step,
                  "diagnostic step supplying gap distributions (0 = final)");
  cmd->add_option("--monotonic-threshold", opt.config.monotonic_threshold,
                  "baseline commit confidence threshold");
  cmd->add_option("--monotonic-eos-threshold", opt.config.monotonic_eos_threshold,
                  "baseline frontier EOS threshold");
  cmd->add_option("--monotonic-window", opt.config.monotonic_window,
                  "baseline fixed window size");
  cmd->add_option("--external", opt.external_cmd,
                  "external denoiser command (line-delimited JSON protocol)");
  cmd->set_config("--config", "", "key = value configuration file");
}

dystruct::RunConfig finalize_config(CommonOptions& opt) {
  opt.config.schedule_mode = dystruct::schedule_mode_from_string(opt.schedule_mode);
  if (opt.no_scheduling) opt.config.scheduling_enabled = false;
  if (opt.no_welding) opt.config.welding_enabled = false;
  if (const char* env_seed = std::getenv("DYSTRUCT_SEED")) {
    opt.config.seed = std::strtoull(env_seed, nullptr, 10);
  }
  opt.config.validate();
  return opt.config;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream ss(s);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

dystruct::DenoiserFactory make_factory(const CommonOptions& opt, const dystruct::Corpus& corpus) {
  if (!opt.external_cmd.empty()) {
    const auto argv = split_ws(opt.external_cmd);
    return [argv]() -> std::unique_ptr<dystruct::Denoiser> {
      auto client = std::make_unique<dystruct::ExternalDenoiserClient>(
          std::make_unique<dystruct::SubprocessTransport>(argv));
      client->handshake();
      return client;
    };
  }
  dystruct::ToyGrammar grammar;
  dystruct::ToyOracleConfig ocfg;
  auto oracle = dystruct::toy_oracle_from_corpus(grammar, ocfg, corpus);
  return [oracle]() -> std::unique_ptr<dystruct::Denoiser> {
    return std::make_unique<dystruct::ToyOracleDenoiser>(oracle);
  };
}

dystruct::WeightsArtifact resolve_weights(const dystruct::RunConfig& config) {
  if (config.weights_path.empty()) return {};
  return dystruct::load_weights(config.weights_path);
}

std::string transcript_filename(const dystruct::BenchTaskKey& key) {
  return key.method + "__" + key.prompt_id + "__" + std::to_string(key.seed) + ".json";
}

int cmd_decode(const std::string& corpus_path, const std::string& prompt_id,
               const std::string& method, const std::string& out_path, CommonOptions& opt) {
  const auto corpus = dystruct::load_corpus_jsonl(corpus_path);
  const auto& entry = corpus.by_id(prompt_id);
  const auto config = finalize_config(opt);
  const auto weights = resolve_weights(config);

  dystruct::MethodSpec spec;
  spec.kind = dystruct::method_kind_from_string(method);
  spec.config = config;

  auto model = make_factory(opt, corpus)();
  const auto result = dystruct::run_method(*model, entry.prompt, spec, &weights);

  for (std::size_t i = 0; i < result.tokens.size(); ++i) {
    if (i) std::cout << ' ';
    std::cout << result.tokens[i];
  }
  std::cout << "\n";
  std::cerr << "stop=" << result.stop_reason << " tokens=" << result.tokens.size()
            << " calls=" << result.denoiser_calls << " iters=" << result.iterations_used << "\n";
  if (entry.truth) {
    std::cerr << "exact=" << (result.tokens == *entry.truth ? 1 : 0) << " tok_acc="
              << dystruct::token_accuracy(result.tokens, *entry.truth) << "\n";
  }
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    dystruct::require(out.good(), dystruct::Errc::io_error, "cannot write " + out_path);
    out << dystruct::transcript_to_json(result.transcript).dump(2) << "\n";
  }
  return 0;
}

int cmd_bench(const std::string& corpus_path, const std::string& methods_csv,
              const std::string& seeds_csv, const std::string& csv_path,
              const std::string& svg_prefix, const std::string& transcripts_dir,
              const std::string& trajectories_path, int jobs, CommonOptions& opt) {
  const auto corpus = dystruct::load_corpus_jsonl(corpus_path);
  const auto config = finalize_config(opt);
  const auto weights = resolve_weights(config);

  std::vector<dystruct::MethodSpec> methods;
  for (const auto& name : split_ws([&] {
         std::string s = methods_csv;
         for (char& ch : s) {
           if (ch == ',') ch = ' ';
         }
         return s;
       }())) {
    dystruct::MethodSpec spec;
    spec.kind = dystruct::method_kind_from_string(name);
    spec.config = config;
    methods.push_back(spec);
  }
  std::vector<std::uint64_t> seeds;
  {
    std::string s = seeds_csv;
    for (char& ch : s) {
      if (ch == ',') ch = ' ';
    }
    for (const auto& tok : split_ws(s)) seeds.push_back(std::strtoull(tok.c_str(), nullptr, 10));
  }

  const auto bench = dystruct::run_benchmark(make_factory(opt, corpus), corpus, methods, seeds,
                                             jobs, &weights, !trajectories_path.empty());
  dystruct::emit_csv(bench.rows, csv_path);
  if (!svg_prefix.empty()) dystruct::emit_svg_plots(bench.rows, svg_prefix);
  if (!transcripts_dir.empty()) {
    fs::create_directories(transcripts_dir);
    for (const auto& [key, transcript] : bench.transcripts) {
      std::ofstream out(fs::path(transcripts_dir) / transcript_filename(key));
      dystruct::require(out.good(), dystruct::Errc::io_error, "cannot write transcript");
      out << dystruct::transcript_to_json(transcript).dump() << "\n";
    }
  }
  if (!trajectories_path.empty()) {
    dystruct::save_trajectories_jsonl(trajectories_path, bench.trajectories);
  }
  for (const auto& err : bench.errors) std::cerr << "error: " << err << "\n";
  std::cerr << "rows=" << bench.rows.size() << " errors=" << bench.errors.size() << "\n";
  return bench.errors.empty() ? 0 : 2;
}

int cmd_calibrate(const std::string& trajectories_path, const std::string& out_path,
                  double lambda) {
  const auto trajectories = dystruct::load_trajectories_jsonl(trajectories_path);
  dystruct::require(!trajectories.empty(), dystruct::Errc::bad_argument,
                    "no trajectories in " + trajectories_path);
  dystruct::FitConfig fcfg;
  fcfg.lambda = lambda;

  dystruct::WeightsArtifact artifact;
  const auto position_examples = dystruct::build_position_examples(trajectories);
  const auto pos_fit = dystruct::fit(position_examples, fcfg);
  artifact.w = pos_fit.w;
  artifact.meta["position_examples"] = position_examples.size();
  artifact.meta["position_imbalance"] = pos_fit.imbalance;
  artifact.meta["position_loss"] = pos_fit.loss;
  artifact.meta["position_iterations"] = pos_fit.iterations;
  artifact.meta["lambda"] = lambda;

  bool have_delims = true;
  for (const auto& t : trajectories) have_delims = have_delims && t.delimiter_gaps.has_value();
  if (have_delims) {
    const auto gap_examples = dystruct::build_gap_examples(trajectories);
    try {
      const auto gap_fit = dystruct::fit(gap_examples, fcfg);
      artifact.w_b = gap_fit.w;
      artifact.meta["gap_examples"] = gap_examples.size();
      artifact.meta["gap_imbalance"] = gap_fit.imbalance;
      artifact.meta["gap_loss"] = gap_fit.loss;
    } catch (const dystruct::Error& e) {
      artifact.meta["gap_fit_skipped"] = e.what();  // keep the hand-set default w_b
    }
  } else {
    artifact.meta["gap_fit_skipped"] = "no delimiter annotations";
  }
  dystruct::save_weights(out_path, artifact);
  std::cerr << "wrote " << out_path << "\n";
  return 0;
}

int cmd_partition(const std::string& input_path) {
  json j;
  if (input_path.empty() || input_path == "-") {
    j = json::parse(std::cin, nullptr, false);
  } else {
    std::ifstream in(input_path);
    dystruct::require(in.good(), dystruct::Errc::io_error, "cannot read " + input_path);
    j = json::parse(in, nullptr, false);
  }
  dystruct::require(!j.is_discarded(), dystruct::Errc::io_error, "input is not valid JSON");

  const auto q = j.at("q").get<std::vector<double>>();
  dystruct::LocalAlphas alphas;
  if (j.contains("alphas")) {
    alphas.alpha = j.at("alphas").get<std::vector<double>>();
  } else {
    const auto logits = j.at("logits").get<std::vector<double>>();
    alphas = dystruct::local_alphas(j.value("alpha0", 1.5), j.value("hbar", 0.5), logits);
  }

  const auto part = dystruct::map_partition(q, alphas);
  json out;
  out["length"] = part.length;
  json blocks = json::array();
  for (const auto& b : part.blocks) blocks.push_back(json::array({b.begin, b.end}));
  out["map_blocks"] = std::move(blocks);
  json cuts = json::array();
  const auto cut_vec = dystruct::cuts_from_blocks(part);
  for (std::size_t g = 0; g < cut_vec.size(); ++g) {
    if (cut_vec[g]) cuts.push_back(g);
  }
  out["map_cuts"] = std::move(cuts);

  if (part.length <= 16) {
    const auto posterior = dystruct::enumerate_log_posterior(q, alphas);
    json table = json::array();
    for (const auto& entry : posterior) {
      json row;
      std::string bits;
      for (auto b : entry.cuts) bits.push_back(b ? '1' : '0');
      row["b"] = bits;
      row["p"] = entry.probability;
      table.push_back(std::move(row));
    }
    out["posterior"] = std::move(table);
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_stats(const std::string& csv_a, const std::string& csv_b, const std::string& out_path) {
  const auto rows_a = dystruct::load_csv(csv_a);
  const auto rows_b = dystruct::load_csv(csv_b);
  const auto pairs = dystruct::pair_outcomes(rows_a, rows_b);
  const auto report = dystruct::mcnemar(pairs);
  const json j = dystruct::mcnemar_to_json(report);
  std::cout << j.dump(2) << "\n";
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    dystruct::require(out.good(), dystruct::Errc::io_error, "cannot write " + out_path);
    out << j.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured decoding engine for masked diffusion language models"};
  app.require_subcommand(1);

  CommonOptions decode_opt, bench_opt;

  // decode
  auto* decode = app.add_subcommand("decode", "decode one prompt to tokens + transcript");
  std::string decode_corpus, decode_id, decode_method = "dystruct", decode_out;
  decode->add_option("--corpus", decode_corpus, "corpus JSONL")->required();
  decode->add_option("--id", decode_id, "prompt id")->required();
  decode->add_option("--method", decode_method, "decoding method");
  decode->add_option("--out", decode_out, "transcript JSON path");
  add_config_flags(decode, decode_opt);

  // bench
  auto* bench = app.add_subcommand("bench", "benchmark methods over a corpus");
  std::string bench_corpus, bench_methods = "dystruct,fixed-length", bench_seeds = "1";
  std::string bench_csv, bench_svg, bench_transcripts, bench_trajectories;
  int bench_jobs = 1;
  bench->add_option("--corpus", bench_corpus, "corpus JSONL")->required();
  bench->add_option("--methods", bench_methods, "comma-separated method list");
  bench->add_option("--seeds", bench_seeds, "comma-separated seed list");
  bench->add_option("--csv", bench_csv, "metrics CSV output")->required();
  bench->add_option("--svg-prefix", bench_svg, "bar chart output prefix");
  bench->add_option("--transcripts", bench_transcripts, "directory for transcript JSON files");
  bench->add_option("--trajectories", bench_trajectories, "calibration trajectories JSONL output");
  bench->add_option("--jobs", bench_jobs, "parallel workers");
  add_config_flags(bench, bench_opt);

  // calibrate
  auto* calibrate = app.add_subcommand("calibrate", "fit weights from decoded trajectories");
  std::string cal_trajectories, cal_out = "weights.json";
  double cal_lambda = 1e-4;
  calibrate->add_option("--trajectories", cal_trajectories, "trajectories JSONL")->required();
  calibrate->add_option("--out", cal_out, "weights artifact path");
  calibrate->add_option("--lambda", cal_lambda, "L2 regularization");

  // partition
  auto* partition = app.add_subcommand("partition", "debug MAP partitioning");
  std::string part_input;
  partition->add_option("--input", part_input, "JSON with q[] and alphas[] or (alpha0,hbar,logits[]); - for stdin");

  // stats
  auto* stats = app.add_subcommand("stats", "paired McNemar test over two result CSVs");
  std::string stats_a, stats_b, stats_out;
  stats->add_option("--a", stats_a, "result CSV for method A")->required();
  stats->add_option("--b", stats_b, "result CSV for method B")->required();
  stats->add_option("--out", stats_out, "report JSON path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (decode->parsed()) {
      return cmd_decode(decode_corpus, decode_id, decode_method, decode_out, decode_opt);
    }
    if (bench->parsed()) {
      return cmd_bench(bench_corpus, bench_methods, bench_seeds, bench_csv, bench_svg,
                       bench_transcripts, bench_trajectories, bench_jobs, bench_opt);
    }
    if (calibrate->parsed()) {
      return cmd_calibrate(cal_trajectories, cal_out, cal_lambda);
    }
    if (partition->parsed()) {
      return cmd_partition(part_input);
    }
    if (stats->parsed()) {
      return cmd_stats(stats_a, stats_b, stats_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
