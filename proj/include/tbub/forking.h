#pragma once

// Residual-stream forking: score every live stream, propagate cumulative
// log-scores, force-keep the original stream of each token, pick the top
// `budget` keep/fork actions and assemble the next stream set.
//
// All scores live in log space. A stream's cumulative score is the product
// of the sigmoid keep/fork scores along its lineage, so log_cum <= 0.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "tbub/numcore.h"

namespace tbub {

struct StreamMeta {
  std::size_t origin = 0;     // input token index
  std::size_t fork_rank = 0;  // 0 = the token's original stream; forks get parent rank + 1
  double log_cum = 0.0;
};

// The live streams at one layer, ordered by token; within a token's group
// every fork sits left of its parent and the original is rightmost.
struct ResidualSet {
  Var streams;  // n x d_model
  Var log_cum;  // n x 1
  std::vector<StreamMeta> meta;
  std::size_t n_tokens = 0;

  std::size_t size() const { return meta.size(); }
};

// Per-layer learned parameters of the forking decision.
struct ForkParams {
  Var weight;     // d_model x 2, column 0 = fork logit, column 1 = keep logit
  Var bias;       // 1 x 2
  Var embedding;  // 1 x d_model, added to a parent to create its fork
};

struct ForkScores {
  Var log_fork;      // n x 1
  Var log_keep;      // n x 1
  Var log_fork_hat;  // log_cum + log_fork
  Var log_keep_hat;  // log_cum + log_keep
  std::vector<double> log_keep_forced;  // 0 for originals, log_keep_hat otherwise
};

struct SelectionSet {
  std::vector<char> keep;  // per current row
  std::vector<char> fork;  // per current row
  std::size_t count() const;
};

enum class ForkAction { kKeep, kFork, kDelete };
std::string_view to_string(ForkAction action);

struct ForkEvent {
  std::size_t layer = 0;
  std::size_t token_index = 0;
  std::size_t fork_rank = 0;
  double log_cum = 0.0;
  ForkAction action = ForkAction::kKeep;
};

ForkScores score_streams(const ResidualSet& set, const ForkParams& params);

// Top-`budget` of the candidate list [fork_0, keep_0, fork_1, keep_1, ...].
// Ordering: forced keeps first, then higher score, then keep before fork,
// then lower row. Throws kBudget when budget < n_tokens.
SelectionSet select_topk(std::span<const double> log_fork_hat, std::span<const double> log_keep_forced,
                         std::span<const std::size_t> fork_rank, std::size_t budget, std::size_t n_tokens);
SelectionSet select_topk(const ForkScores& scores, std::span<const StreamMeta> meta, std::size_t budget,
                         std::size_t n_tokens);

// Builds the next stream set. Kept rows carry the unforced keep score as
// their new log_cum; forks carry the fork score. When `events` is non-null
// one record per kept, forked and deleted stream is appended.
ResidualSet assemble(const ResidualSet& set, const ForkScores& scores, const SelectionSet& sel, Var fork_embedding,
                     std::size_t layer = 0, std::vector<ForkEvent>* events = nullptr);

struct ForkStep {
  ResidualSet set;
  SelectionSet selection;
};

ForkStep fork_step(const ResidualSet& set, const ForkParams& params, std::size_t budget, std::size_t layer,
                   std::vector<ForkEvent>* events = nullptr);

// Number of live forks (group size - 1) for each input token.
std::vector<std::size_t> forks_per_token(std::span<const StreamMeta> meta, std::size_t n_tokens);

// Throws kInvariant if ordering, original conservation or log_cum <= 0 fail.
void check_structure(std::span<const StreamMeta> meta, std::size_t n_tokens);

}  // namespace tbub
