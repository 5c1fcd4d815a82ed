// Command-line entry point: ingest, train, score, generate, eval, analyze,
// gradcheck and oracle subcommands. Exit codes: 0 success, 1 domain error,
// 2 usage error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tbub/analysis.h"
#include "tbub/checkpoint.h"
#include "tbub/config.h"
#include "tbub/data.h"
#include "tbub/error.h"
#include "tbub/inference.h"
#include "tbub/model.h"
#include "tbub/oracles.h"
#include "tbub/training.h"

using namespace tbub;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, "cannot write " + path);
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot read " + path);
  return is;
}

Model load_model(const std::string& ckpt_path) {
  Checkpoint c = read_checkpoint(ckpt_path);
  return Model(c.model, std::move(c.params));
}

std::vector<TokenId> bos_free_text(const std::string& text) { return ByteTokenizer().encode(text); }

// Settings shared by train, gradcheck and the overfork ablation.
struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "key=value config file");
    app->add_option("--set", sets, "override a config key (key=value), repeatable");
    app->add_option("--seed", seed, "seed for every random choice in the run");
  }

  RunConfig resolve() const {
    KeyValues overrides;
    for (const std::string& s : sets) overrides.push_back(split_assignment(s));
    if (seed) overrides.emplace_back("seed", std::to_string(*seed));
    std::optional<std::filesystem::path> file;
    if (!config.empty()) file = config;
    return resolve_run_config(file, overrides);
  }
};

void echo_config(const RunConfig& c) {
  std::cout << "# resolved configuration\n" << to_text(c) << std::flush;
}

TrainJob make_job(const RunConfig& c) {
  if (c.train_data.empty()) throw Error(ErrorKind::kArgument, "data.train is not set");
  TrainJob job;
  job.model = c.model;
  job.train = c.train;
  job.train.threads = threads_from_env();
  job.train_data = c.train_data;
  if (!c.val_data.empty()) job.val_data = c.val_data;
  job.out_dir = c.out_dir;
  job.run_info = to_json(c);
  return job;
}

std::vector<std::size_t> parse_layers(const std::string& s) {
  RunConfig scratch;
  apply_setting(scratch, "model.fork_layers", s);
  return scratch.model.fork_layers;
}

// Token source shared by score and analyze: a literal string or a token store.
std::vector<TokenId> load_tokens(const std::string& text, const std::string& tokens_path, std::size_t limit = 0) {
  std::vector<TokenId> ids;
  if (!text.empty()) {
    ids = bos_free_text(text);
  } else if (!tokens_path.empty()) {
    ids = read_token_store(tokens_path).ids;
  } else {
    throw Error(ErrorKind::kArgument, "either --text or --tokens/--data is required");
  }
  if (limit > 0 && ids.size() > limit) ids.resize(limit);
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Forking-transformer language modelling toolkit"};
  app.require_subcommand(1);

  // ingest
  std::string in_path, out_path, delimiter = "\n\n";
  auto* ingest_cmd = app.add_subcommand("ingest", "tokenize a text file into a token store");
  ingest_cmd->add_option("--in", in_path, "input text file")->required();
  ingest_cmd->add_option("--out", out_path, "output token store")->required();
  ingest_cmd->add_option("--delimiter", delimiter, "document delimiter");

  // train
  ConfigFlags train_flags;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_flags.add_to(train_cmd);
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");

  // score
  std::string ckpt, text, tokens_path, budget = "dynamic", csv_out;
  auto* score_cmd = app.add_subcommand("score", "perplexity of a sequence");
  score_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();
  auto* score_text = score_cmd->add_option("--text", text, "literal text to score");
  auto* score_tokens = score_cmd->add_option("--tokens", tokens_path, "token store to score");
  score_text->excludes(score_tokens);
  score_cmd->add_option("--budget", budget, "fixed|dynamic")->check(CLI::IsMember({"fixed", "dynamic"}));
  score_cmd->add_option("--out", csv_out, "per-token log-probability CSV");

  // generate
  std::string prompt;
  std::size_t n_new = 32;
  double temperature = 1.0, top_p = 1.0;
  std::uint64_t seed = 0;
  bool show_forks = false;
  auto* gen_cmd = app.add_subcommand("generate", "sample a continuation");
  gen_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();
  gen_cmd->add_option("--prompt", prompt, "prompt text");
  gen_cmd->add_option("--n", n_new, "tokens to generate");
  gen_cmd->add_option("--temp", temperature, "temperature; 0 = greedy");
  gen_cmd->add_option("--top-p", top_p, "nucleus mass");
  gen_cmd->add_option("--seed", seed, "sampling seed");
  gen_cmd->add_option("--budget", budget, "fixed|dynamic")->check(CLI::IsMember({"fixed", "dynamic"}));
  gen_cmd->add_flag("--show-forks", show_forks, "print per-step budget and fork counts to stderr");

  // eval
  std::string task, protocol;
  auto* eval_cmd = app.add_subcommand("eval", "zero-shot evaluation over a JSONL task file");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval_cmd->add_option("--task", task, "task file")->required();
  eval_cmd->add_option("--protocol", protocol, "final_word|multi_choice|pairwise")
      ->required()
      ->check(CLI::IsMember({"final_word", "multi_choice", "pairwise"}));
  eval_cmd->add_option("--budget", budget, "fixed|dynamic")->check(CLI::IsMember({"fixed", "dynamic"}));

  // analyze
  ConfigFlags ablation_flags;
  std::string kind, trace_path, surrogate_path, data_path, out_prefix = "analysis", early = "2", extended = "2,4";
  std::size_t max_tokens = 16384, window = 4, lookup_examples = 0, lookup_pairs = 0, attention_seqs = 4;
  auto* an_cmd = app.add_subcommand("analyze", "offline analyses over trace files");
  an_cmd->add_option("--kind", kind, "trace|entropy|attention|forkmap|overfork")
      ->required()
      ->check(CLI::IsMember({"trace", "entropy", "attention", "forkmap", "overfork"}));
  an_cmd->add_option("--trace", trace_path, "existing trace file");
  an_cmd->add_option("--surrogate-trace", surrogate_path, "trace whose entropies replace the model's own");
  an_cmd->add_option("--ckpt", ckpt, "checkpoint (traces are exported first)");
  an_cmd->add_option("--data", data_path, "token store to trace");
  an_cmd->add_option("--text", text, "literal text to trace");
  an_cmd->add_option("--max-tokens", max_tokens, "tokens to trace from --data");
  an_cmd->add_option("--attention-seqs", attention_seqs, "windows whose attention matrices are exported");
  an_cmd->add_option("--window", window, "entropy window length");
  an_cmd->add_option("--lookup", lookup_examples, "forkmap over this many synthetic lookup examples");
  an_cmd->add_option("--pairs", lookup_pairs, "key/value pairs per lookup example (0 = as many as fit the block)");
  an_cmd->add_option("--budget", budget, "fixed|dynamic")->check(CLI::IsMember({"fixed", "dynamic"}));
  an_cmd->add_option("--out", out_prefix, "output path prefix");
  an_cmd->add_option("--early", early, "overfork: fork layers of the early arm");
  an_cmd->add_option("--extended", extended, "overfork: fork layers of the extended arm");
  ablation_flags.add_to(an_cmd);

  // gradcheck
  ConfigFlags grad_flags;
  double tolerance = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad_flags.add_to(grad_cmd);
  grad_cmd->add_option("--tolerance", tolerance, "maximum relative error");

  // oracle
  std::string suite;
  std::size_t cases = 1000;
  auto* oracle_cmd = app.add_subcommand("oracle", "randomized oracle suites");
  oracle_cmd->add_option("--suite", suite, "topk|fork_step|logsumexp|rope|all")
      ->required()
      ->check(CLI::IsMember({"topk", "fork_step", "logsumexp", "rope", "all"}));
  oracle_cmd->add_option("--cases", cases, "randomized cases");
  oracle_cmd->add_option("--seed", seed, "case seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << app.help();
    return 2;
  }

  try {
    if (*ingest_cmd) {
      const TokenStore s = ingest(in_path, out_path, delimiter);
      std::cout << "tokens " << s.ids.size() << "\n";
    } else if (*train_cmd) {
      const RunConfig c = train_flags.resolve();
      echo_config(c);
      std::filesystem::create_directories(c.out_dir);
      open_out((std::filesystem::path(c.out_dir) / "config.txt").string()) << to_text(c);
      const TrainJob job = make_job(c);
      std::optional<std::filesystem::path> from;
      if (!resume.empty()) from = resume;
      const TrainResult r = train(job, from, &std::cout);
      std::cout << "final_step " << r.final_step << "\n";
      if (r.final_val_loss) std::cout << "final_val_loss " << fmt(*r.final_val_loss) << "\n";
      std::cout << "checkpoint " << r.last_checkpoint.string() << "\n";
    } else if (*score_cmd) {
      const Model m = load_model(ckpt);
      const ModelLM lm(m);
      const std::vector<TokenId> ids = load_tokens(text, tokens_path);
      const BudgetPolicy policy = BudgetPolicy::for_model(m.config(), parse_budget_mode(budget));
      const ScoreResult r = score_sequence(lm, ids, policy);
      std::cout << "tokens " << ids.size() << "\nnll " << fmt(r.total_nll) << "\nperplexity " << fmt(r.perplexity)
                << "\n";
      if (!csv_out.empty()) {
        std::ofstream os = open_out(csv_out);
        write_token_log_probs_csv(os, ids, r.token_log_probs);
      }
    } else if (*gen_cmd) {
      const Model m = load_model(ckpt);
      const ModelLM lm(m);
      const ByteTokenizer tok;
      const std::vector<TokenId> p = tok.encode(prompt);
      SamplerConfig sc;
      sc.temperature = temperature;
      sc.top_p = top_p;
      const GenerateResult r =
          generate(lm, p, n_new, BudgetPolicy::for_model(m.config(), parse_budget_mode(budget)), sc, seed);
      std::cout << tok.decode(r.tokens) << "\n";
      if (show_forks)
        for (std::size_t i = 0; i < r.budgets.size(); ++i)
          std::cerr << "step " << i << " budget " << r.budgets[i] << " forks " << r.forks[i] << "\n";
    } else if (*eval_cmd) {
      const Model m = load_model(ckpt);
      const ModelLM lm(m);
      std::ifstream is = open_in(task);
      const EvalReport r = evaluate_tasks(lm, is, parse_protocol(protocol),
                                          BudgetPolicy::for_model(m.config(), parse_budget_mode(budget)), ByteTokenizer());
      std::cout << "protocol " << to_string(r.protocol) << "\nlines " << r.lines << "\nevaluated " << r.evaluated
                << "\ncorrect " << r.correct << "\naccuracy " << fmt(r.accuracy()) << "\nties " << r.ties
                << "\nmalformed " << r.malformed << "\n";
      for (const std::string& p : r.problems) std::cerr << p << "\n";
    } else if (*an_cmd) {
      const BudgetMode mode = parse_budget_mode(budget);
      // Traces come from --trace, or are exported from --ckpt first so the
      // analysis itself always reads a file.
      auto obtain_trace = [&](bool attention) -> std::string {
        if (!trace_path.empty()) return trace_path;
        if (ckpt.empty()) throw Error(ErrorKind::kArgument, "--trace or --ckpt is required");
        const Model m = load_model(ckpt);
        const std::vector<TokenId> ids = load_tokens(text, data_path, max_tokens);
        TraceOptions o;
        o.budget = mode;
        o.attention = attention;
        o.max_attention_seqs = attention_seqs;
        const std::string path = out_prefix + ".trace.jsonl";
        std::ofstream os = open_out(path);
        write_trace(m, ids, o, os);
        std::cout << "trace " << path << "\n";
        return path;
      };
      auto load = [&](const std::string& path) {
        std::ifstream is = open_in(path);
        return read_trace(is);
      };
      if (kind == "trace") {
        trace_path.clear();
        obtain_trace(attention_seqs > 0);
      } else if (kind == "entropy") {
        const TraceData d = load(obtain_trace(false));
        std::optional<TraceData> sur;
        if (!surrogate_path.empty()) sur = load(surrogate_path);
        const EntropyCurve c = entropy_fork_curve(d.tokens, window, 20, 30, sur ? &sur->tokens : nullptr);
        std::ofstream csv = open_out(out_prefix + ".entropy.csv");
        write_entropy_csv(csv, c);
        std::ofstream svg = open_out(out_prefix + ".entropy.svg");
        write_entropy_svg(svg, c);
        std::cout << "windows " << c.windows.size() << "\nbuckets " << c.buckets.size() << "\nmax_window_forks "
                  << fmt(c.max_window_forks) << "\n";
        write_entropy_csv(std::cout, c);
      } else if (kind == "attention") {
        const TraceData d = load(obtain_trace(true));
        if (d.attention.empty()) throw Error(ErrorKind::kArgument, "trace has no attention records");
        const AttentionReport r = parent_child_attention(d.attention);
        std::ofstream csv = open_out(out_prefix + ".attention.csv");
        write_attention_csv(csv, r);
        if (!r.any_forks) std::cout << "no forks occurred\n";
        write_attention_csv(std::cout, r);
      } else if (kind == "forkmap") {
        if (ckpt.empty()) throw Error(ErrorKind::kArgument, "forkmap needs --ckpt");
        const Model m = load_model(ckpt);
        if (lookup_examples > 0) {
          std::mt19937_64 rng(ablation_flags.seed.value_or(0));
          // "kk:vv;" per pair plus "?kk=vv" must fit after bos.
          const std::size_t L = m.config().block_size;
          const std::size_t pairs = lookup_pairs > 0 ? lookup_pairs : (L > 13 ? (L - 7) / 6 : 1);
          std::vector<LookupExample> ex;
          for (std::size_t i = 0; i < lookup_examples; ++i) ex.push_back(gen_lookup_task(pairs, rng));
          const SpanForkReport r = lookup_fork_report(m, ex);
          std::cout << "examples " << r.examples << "\nquery_tokens " << r.query_tokens << "\nfiller_tokens "
                    << r.filler_tokens << "\nquery_mean_forks " << fmt(r.query_mean) << "\nfiller_mean_forks "
                    << fmt(r.filler_mean) << "\n";
          if (text.empty()) text = ex.front().text;
        }
        std::vector<TokenId> ids = {kBos};
        for (TokenId t : load_tokens(text, data_path)) ids.push_back(t);
        if (ids.size() > m.config().block_size) ids.resize(m.config().block_size);
        const std::size_t b = BudgetPolicy::for_model(m.config(), mode).budget_for(ids.size());
        const ForkLocationMap map = fork_location_map(m, ids, m.config().forks() ? b : 0);
        std::ofstream csv = open_out(out_prefix + ".forkmap.csv");
        write_forkmap_csv(csv, map);
        std::ofstream svg = open_out(out_prefix + ".forkmap.svg");
        write_forkmap_svg(svg, map, ids);
        write_forkmap_csv(std::cout, map);
      } else {  // overfork
        const RunConfig c = ablation_flags.resolve();
        echo_config(c);
        const OverforkReport r = overfork_ablation(make_job(c), parse_layers(early), parse_layers(extended), &std::cerr);
        std::ofstream csv = open_out(out_prefix + ".overfork.csv");
        write_overfork_csv(csv, r);
        write_overfork_csv(std::cout, r);
      }
    } else if (*grad_cmd) {
      const RunConfig c = grad_flags.resolve();
      echo_config(c);
      const Model m(c.model);
      std::mt19937_64 rng(c.model.seed);
      std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(c.model.vocab_size - 1));
      std::vector<TokenId> toks(c.model.block_size), targets(c.model.block_size);
      for (auto& t : toks) t = d(rng);
      for (auto& t : targets) t = d(rng);
      const GradCheckReport r = gradient_check(m, toks, targets);
      for (const GroupGradCheck& g : r.groups)
        std::cout << g.name << " rel_err " << fmt(g.rel_err) << " checked " << g.checked << " skipped " << g.skipped
                  << "\n";
      std::cout << "max_rel_err " << fmt(r.max_rel_err) << "\n";
      const bool ok = r.max_rel_err < tolerance;
      std::cout << (ok ? "PASS" : "FAIL") << "\n";
      return ok ? 0 : 1;
    } else if (*oracle_cmd) {
      std::vector<oracle::SuiteResult> results;
      if (suite == "topk" || suite == "all") results.push_back(oracle::run_topk_suite(cases, seed));
      if (suite == "fork_step" || suite == "all") results.push_back(oracle::run_fork_step_suite(cases, seed));
      if (suite == "logsumexp" || suite == "all") results.push_back(oracle::run_logsumexp_suite(cases, seed));
      if (suite == "rope" || suite == "all") results.push_back(oracle::run_rope_suite(cases, seed));
      bool ok = true;
      for (const auto& r : results) {
        std::cout << r.name << " cases " << r.cases << " mismatches " << r.mismatches << " max_abs_err "
                  << fmt(r.max_abs_err) << "\n";
        ok = ok && r.mismatches == 0;
      }
      return ok ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
