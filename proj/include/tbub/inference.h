#pragma once

// Sequence scoring, sampling with fixed or dynamic forking budgets, and
// zero-shot evaluation protocols over JSON-lines task files.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tbub/data.h"
#include "tbub/model.h"

namespace tbub {

enum class BudgetMode { kFixed, kDynamic };
std::string_view to_string(BudgetMode m);
BudgetMode parse_budget_mode(std::string_view s);

// Fixed: always kappa_train. Dynamic: kappa' = max(L', ceil(kappa_train *
// L' / L_train)) for the current input length L' ("rolling top-k").
struct BudgetPolicy {
  BudgetMode mode = BudgetMode::kDynamic;
  std::size_t kappa_train = 0;
  std::size_t l_train = 0;

  static BudgetPolicy for_model(const ModelConfig& cfg, BudgetMode mode);
  std::size_t budget_for(std::size_t length) const;
};

// Anything that maps a token window to per-position next-token
// log-distributions; lets tests substitute reference models.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t block_size() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual TokenId bos() const { return kBos; }
  // tokens.size() <= block_size(); returns tokens.size() x vocab_size().
  virtual Matrix log_probs(std::span<const TokenId> tokens, std::size_t budget, ForwardTrace* trace = nullptr) const = 0;
};

class ModelLM final : public LanguageModel {
 public:
  explicit ModelLM(const Model& model) : model_(model) {}
  std::size_t block_size() const override { return model_.config().block_size; }
  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  Matrix log_probs(std::span<const TokenId> tokens, std::size_t budget, ForwardTrace* trace) const override;

 private:
  const Model& model_;
};

struct ScoreResult {
  std::vector<double> token_log_probs;  // log p(t_i | bos, t_<i) within its block
  double total_nll = 0.0;
  double perplexity = 0.0;
};

// bos-prefixed blockwise scoring. Sequences longer than L are split into
// disjoint chunks of L tokens, each scored from [bos, chunk[0..L-2]].
ScoreResult score_sequence(const LanguageModel& lm, std::span<const TokenId> tokens, const BudgetPolicy& policy);

// Step-by-step re-forwarding: entry j is log p(t_j) from a forward pass on
// [bos, t_0..t_{j-1}] with the budget for that prefix length.
std::vector<double> autoregressive_log_probs(const LanguageModel& lm, std::span<const TokenId> tokens,
                                             const BudgetPolicy& policy);

// Log-probabilities of `continuation` after [bos, context], dropping the
// oldest context tokens if the window exceeds L.
std::vector<double> continuation_log_probs(const LanguageModel& lm, std::span<const TokenId> context,
                                           std::span<const TokenId> continuation, const BudgetPolicy& policy);

void write_token_log_probs_csv(std::ostream& os, std::span<const TokenId> tokens, std::span<const double> log_probs);

struct SamplerConfig {
  double temperature = 1.0;  // <= 0 selects argmax
  double top_p = 1.0;
};

struct GenerateResult {
  std::vector<TokenId> tokens;       // prompt followed by the generated tokens
  std::vector<std::size_t> budgets;  // kappa' used at each step
  std::vector<std::size_t> forks;    // live forks after the last fork layer at each step
};

GenerateResult generate(const LanguageModel& lm, std::span<const TokenId> prompt, std::size_t n_tokens,
                        const BudgetPolicy& policy, const SamplerConfig& sampler, std::uint64_t seed);

enum class Protocol { kFinalWord, kMultiChoice, kPairwise };
std::string_view to_string(Protocol p);
Protocol parse_protocol(std::string_view s);

struct EvalReport {
  Protocol protocol = Protocol::kFinalWord;
  std::size_t lines = 0;      // non-blank lines read
  std::size_t evaluated = 0;
  std::size_t correct = 0;
  std::size_t ties = 0;
  std::size_t malformed = 0;
  std::vector<std::string> problems;  // "line N: reason"
  double accuracy() const { return evaluated == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(evaluated); }
};

// Schemas (one JSON object per line):
//   final_word   {"context": str, "target": str}          greedy continuation must equal target
//   multi_choice {"prompt": str, "choices": [str], "answer_idx": int}
//                lowest perplexity over choice tokens wins; ties go to the first index and are flagged
//   pairwise     {"good": str, "bad": str}                 correct iff ppl(good) < ppl(bad); ties flagged
// Malformed lines are reported, counted and skipped.
EvalReport evaluate_tasks(const LanguageModel& lm, std::istream& jsonl, Protocol protocol, const BudgetPolicy& policy,
                          const Tokenizer& tokenizer);

}  // namespace tbub
