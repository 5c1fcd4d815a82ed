#include "tbub/inference.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"
#include "tbub/error.h"

namespace tbub {

std::string_view to_string(BudgetMode m) { return m == BudgetMode::kFixed ? "fixed" : "dynamic"; }

BudgetMode parse_budget_mode(std::string_view s) {
  if (s == "fixed") return BudgetMode::kFixed;
  if (s == "dynamic") return BudgetMode::kDynamic;
  throw Error(ErrorKind::kArgument, "unknown budget mode '" + std::string(s) + "' (fixed|dynamic)");
}

BudgetPolicy BudgetPolicy::for_model(const ModelConfig& cfg, BudgetMode mode) {
  return BudgetPolicy{mode, cfg.implied_budget(), cfg.block_size};
}

std::size_t BudgetPolicy::budget_for(std::size_t length) const {
  if (mode == BudgetMode::kFixed || l_train == 0) return std::max(kappa_train, length);
  const std::size_t scaled = (kappa_train * length + l_train - 1) / l_train;
  return std::max(length, scaled);
}

Matrix ModelLM::log_probs(std::span<const TokenId> tokens, std::size_t budget, ForwardTrace* trace) const {
  ForwardOptions o;
  o.budget = budget;
  ForwardPass p = forward(model_, tokens, o);
  if (trace != nullptr) *trace = std::move(p.trace);
  return p.log_probs.value();
}

namespace {

void check_vocab(const LanguageModel& lm, std::span<const TokenId> tokens) {
  for (TokenId t : tokens)
    if (t >= lm.vocab_size()) throw Error(ErrorKind::kArgument, "token id " + std::to_string(t) + " outside vocabulary");
}

}  // namespace

ScoreResult score_sequence(const LanguageModel& lm, std::span<const TokenId> tokens, const BudgetPolicy& policy) {
  if (tokens.empty()) throw Error(ErrorKind::kArgument, "score: empty sequence");
  check_vocab(lm, tokens);
  const std::size_t L = lm.block_size();
  ScoreResult r;
  for (std::size_t start = 0; start < tokens.size(); start += L) {
    const std::size_t n = std::min(L, tokens.size() - start);
    std::vector<TokenId> input = {lm.bos()};
    input.insert(input.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start),
                 tokens.begin() + static_cast<std::ptrdiff_t>(start + n - 1));
    const Matrix lp = lm.log_probs(input, policy.budget_for(input.size()));
    for (std::size_t i = 0; i < n; ++i) r.token_log_probs.push_back(lp(i, tokens[start + i]));
  }
  for (double v : r.token_log_probs) r.total_nll -= v;
  r.perplexity = std::exp(r.total_nll / static_cast<double>(tokens.size()));
  return r;
}

std::vector<double> autoregressive_log_probs(const LanguageModel& lm, std::span<const TokenId> tokens,
                                             const BudgetPolicy& policy) {
  if (tokens.empty()) throw Error(ErrorKind::kArgument, "score: empty sequence");
  if (tokens.size() > lm.block_size())
    throw Error(ErrorKind::kArgument, "autoregressive scoring needs the sequence to fit one block");
  check_vocab(lm, tokens);
  std::vector<double> out;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    std::vector<TokenId> input = {lm.bos()};
    input.insert(input.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(j));
    const Matrix lp = lm.log_probs(input, policy.budget_for(input.size()));
    out.push_back(lp(input.size() - 1, tokens[j]));
  }
  return out;
}

std::vector<double> continuation_log_probs(const LanguageModel& lm, std::span<const TokenId> context,
                                           std::span<const TokenId> continuation, const BudgetPolicy& policy) {
  if (continuation.empty()) throw Error(ErrorKind::kArgument, "continuation is empty");
  check_vocab(lm, context);
  check_vocab(lm, continuation);
  std::vector<TokenId> input = {lm.bos()};
  input.insert(input.end(), context.begin(), context.end());
  input.insert(input.end(), continuation.begin(), continuation.end() - 1);
  const std::size_t L = lm.block_size();
  if (continuation.size() > L) throw Error(ErrorKind::kArgument, "continuation longer than the block size");
  const std::size_t drop = input.size() > L ? input.size() - L : 0;
  const std::span<const TokenId> window(input.data() + drop, input.size() - drop);
  const Matrix lp = lm.log_probs(window, policy.budget_for(window.size()));
  std::vector<double> out;
  const std::size_t first = window.size() - continuation.size();
  for (std::size_t i = 0; i < continuation.size(); ++i) out.push_back(lp(first + i, continuation[i]));
  return out;
}

void write_token_log_probs_csv(std::ostream& os, std::span<const TokenId> tokens, std::span<const double> log_probs) {
  if (tokens.size() != log_probs.size()) throw Error(ErrorKind::kArgument, "token/log-prob length mismatch");
  os << "index,token,log_prob\n";
  char buf[40];
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", log_probs[i]);
    os << i << ',' << tokens[i] << ',' << buf << '\n';
  }
}

namespace {

TokenId pick(std::span<const double> log_probs, const SamplerConfig& s, std::mt19937_64& rng) {
  const std::size_t V = log_probs.size();
  if (s.temperature <= 0.0)
    return static_cast<TokenId>(std::max_element(log_probs.begin(), log_probs.end()) - log_probs.begin());
  std::vector<double> scaled(V);
  for (std::size_t v = 0; v < V; ++v) scaled[v] = log_probs[v] / s.temperature;
  const double lse = logsumexp(scaled);
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scaled[a] > scaled[b]; });
  std::vector<double> probs;
  double cum = 0.0;
  for (std::size_t v : order) {
    const double p = std::exp(scaled[v] - lse);
    probs.push_back(p);
    cum += p;
    if (cum >= s.top_p) break;
  }
  const double u = std::uniform_real_distribution<double>(0.0, cum)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[probs.size() - 1]);
}

}  // namespace

GenerateResult generate(const LanguageModel& lm, std::span<const TokenId> prompt, std::size_t n_tokens,
                        const BudgetPolicy& policy, const SamplerConfig& sampler, std::uint64_t seed) {
  if (prompt.empty()) throw Error(ErrorKind::kArgument, "generate: empty prompt");
  if (prompt.size() > lm.block_size())
    throw Error(ErrorKind::kArgument, "generate: prompt of " + std::to_string(prompt.size()) +
                                          " tokens exceeds block size " + std::to_string(lm.block_size()));
  if (!(sampler.top_p > 0.0 && sampler.top_p <= 1.0)) throw Error(ErrorKind::kArgument, "generate: top_p must lie in (0, 1]");
  check_vocab(lm, prompt);
  std::mt19937_64 rng(seed);
  GenerateResult r;
  r.tokens.assign(prompt.begin(), prompt.end());
  const std::size_t L = lm.block_size();
  for (std::size_t step = 0; step < n_tokens; ++step) {
    std::vector<TokenId> input = {lm.bos()};
    input.insert(input.end(), r.tokens.begin(), r.tokens.end());
    const std::size_t drop = input.size() > L ? input.size() - L : 0;
    const std::span<const TokenId> window(input.data() + drop, input.size() - drop);
    const std::size_t budget = policy.budget_for(window.size());
    ForwardTrace trace;
    const Matrix lp = lm.log_probs(window, budget, &trace);
    std::size_t forks = 0;
    if (!trace.fork_layers.empty())
      for (std::size_t f : trace.fork_layers.back().forks) forks += f;
    r.budgets.push_back(budget);
    r.forks.push_back(forks);
    r.tokens.push_back(pick(lp.row(window.size() - 1), sampler, rng));
  }
  return r;
}

std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::kFinalWord: return "final_word";
    case Protocol::kMultiChoice: return "multi_choice";
    case Protocol::kPairwise: return "pairwise";
  }
  return "?";
}

Protocol parse_protocol(std::string_view s) {
  if (s == "final_word") return Protocol::kFinalWord;
  if (s == "multi_choice") return Protocol::kMultiChoice;
  if (s == "pairwise") return Protocol::kPairwise;
  throw Error(ErrorKind::kArgument, "unknown protocol '" + std::string(s) + "' (final_word|multi_choice|pairwise)");
}

namespace {

double mean_nll(std::span<const double> lp) {
  double s = 0.0;
  for (double v : lp) s -= v;
  return s / static_cast<double>(lp.size());
}

std::string require_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) throw Error(ErrorKind::kFormat, std::string("missing string field '") + key + "'");
  const std::string s = j[key].get<std::string>();
  if (s.empty()) throw Error(ErrorKind::kFormat, std::string("field '") + key + "' is empty");
  return s;
}

}  // namespace

EvalReport evaluate_tasks(const LanguageModel& lm, std::istream& jsonl, Protocol protocol, const BudgetPolicy& policy,
                          const Tokenizer& tokenizer) {
  EvalReport rep;
  rep.protocol = protocol;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(jsonl, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++rep.lines;
    try {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kFormat, std::string("invalid JSON: ") + e.what());
      }
      if (!j.is_object()) throw Error(ErrorKind::kFormat, "line is not a JSON object");
      bool correct = false, tie = false;
      switch (protocol) {
        case Protocol::kFinalWord: {
          const auto context = tokenizer.encode(require_string(j, "context"));
          const auto target = tokenizer.encode(require_string(j, "target"));
          std::span<const TokenId> ctx(context);
          if (ctx.size() > lm.block_size()) ctx = ctx.subspan(ctx.size() - lm.block_size());
          const GenerateResult g = generate(lm, ctx, target.size(), policy, SamplerConfig{0.0, 1.0}, 0);
          correct = std::equal(target.begin(), target.end(), g.tokens.end() - static_cast<std::ptrdiff_t>(target.size()));
          break;
        }
        case Protocol::kMultiChoice: {
          const auto prompt = tokenizer.encode(require_string(j, "prompt"));
          if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].size() < 2)
            throw Error(ErrorKind::kFormat, "'choices' must be an array of at least two strings");
          if (!j.contains("answer_idx") || !j["answer_idx"].is_number_integer())
            throw Error(ErrorKind::kFormat, "missing integer field 'answer_idx'");
          const auto answer = j["answer_idx"].get<long long>();
          if (answer < 0 || static_cast<std::size_t>(answer) >= j["choices"].size())
            throw Error(ErrorKind::kFormat, "'answer_idx' out of range");
          std::vector<double> nll;
          for (const auto& c : j["choices"]) {
            if (!c.is_string() || c.get<std::string>().empty())
              throw Error(ErrorKind::kFormat, "every choice must be a non-empty string");
            nll.push_back(mean_nll(continuation_log_probs(lm, prompt, tokenizer.encode(c.get<std::string>()), policy)));
          }
          const std::size_t best = static_cast<std::size_t>(std::min_element(nll.begin(), nll.end()) - nll.begin());
          tie = std::count(nll.begin(), nll.end(), nll[best]) > 1;
          correct = best == static_cast<std::size_t>(answer);
          break;
        }
        case Protocol::kPairwise: {
          const auto good = tokenizer.encode(require_string(j, "good"));
          const auto bad = tokenizer.encode(require_string(j, "bad"));
          const double g = score_sequence(lm, good, policy).perplexity;
          const double b = score_sequence(lm, bad, policy).perplexity;
          tie = g == b;
          correct = g < b;
          break;
        }
      }
      ++rep.evaluated;
      rep.correct += correct;
      if (tie) {
        ++rep.ties;
        rep.problems.push_back("line " + std::to_string(line_no) + ": tie");
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kFormat && e.kind() != ErrorKind::kArgument) throw;
      ++rep.malformed;
      rep.problems.push_back("line " + std::to_string(line_no) + ": malformed: " + e.what());
    }
  }
  return rep;
}

}  // namespace tbub
