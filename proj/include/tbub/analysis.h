#pragma once

// Offline analyses over line-delimited JSON trace files: entropy vs. fork
// count, parent/child attention allocation, per-layer fork-location maps,
// and the over-forking ablation harness. Every analysis is a pure function
// of the records it is given.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tbub/data.h"
#include "tbub/inference.h"
#include "tbub/model.h"
#include "tbub/training.h"

namespace tbub {

// ---- trace records ----------------------------------------------------------

struct ForkRecord {
  std::size_t seq = 0;
  ForkEvent event;
};

struct TokenRecord {
  std::size_t seq = 0;
  std::size_t token_index = 0;
  TokenId token = 0;
  double entropy = 0.0;           // of the mixed output distribution, nats
  std::size_t final_forks = 0;    // live forks after the last fork layer
};

struct AttentionRecord {
  std::size_t seq = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<StreamMeta> rows;  // log_cum unused
  Matrix probs;
};

struct TraceData {
  nlohmann::json header = nlohmann::json::object();
  std::vector<ForkRecord> forks;
  std::vector<TokenRecord> tokens;
  std::vector<AttentionRecord> attention;
};

struct TraceOptions {
  BudgetMode budget = BudgetMode::kDynamic;
  bool attention = false;
  std::size_t max_attention_seqs = 4;  // attention matrices are large
};

// Splits `tokens` into disjoint windows of L and writes, per window, its
// fork events, per-token entropy/fork records and (optionally) attention
// matrices. The first line is a header with the model config.
void write_trace(const Model& model, std::span<const TokenId> tokens, const TraceOptions& options, std::ostream& os);

// Throws kFormat naming the line on malformed input.
TraceData read_trace(std::istream& is);

// ---- entropy vs. forks --------------------------------------------------------

struct EntropyWindow {
  double entropy = 0.0;
  double forks = 0.0;       // mean final-layer forks in the window
  double norm_forks = 0.0;  // forks / max window forks in the run (0 if max is 0)
};

struct EntropyBucket {
  double lo = 0.0, hi = 0.0;
  std::size_t windows = 0;
  double mean_entropy = 0.0;
  double mean_norm_forks = 0.0;
};

struct EntropyCurve {
  std::vector<EntropyWindow> windows;
  std::vector<EntropyBucket> buckets;  // retained buckets only
  double max_window_forks = 0.0;
};

constexpr std::size_t kMinEntropyTokens = 10000;

// Non-overlapping windows of `window` tokens within each sequence; entropy
// comes from `surrogate` (matched by seq/token_index) when given, else from
// the records themselves. Throws kArgument below kMinEntropyTokens tokens.
EntropyCurve entropy_fork_curve(std::span<const TokenRecord> tokens, std::size_t window = 4,
                                std::size_t n_buckets = 20, std::size_t min_windows = 30,
                                const std::vector<TokenRecord>* surrogate = nullptr);
void write_entropy_csv(std::ostream& os, const EntropyCurve& curve);
void write_entropy_svg(std::ostream& os, const EntropyCurve& curve);

// ---- parent/child attention ---------------------------------------------------

// og_* rows are queries from original streams, child_* from forks.
// child_parent pairs (a fork and its token's original) are causally
// masked and therefore always zero.
inline const std::vector<std::string> kAttentionCategories = {
    "og_child", "og_self", "og_other", "child_child", "child_self", "child_other", "child_parent"};

struct AttentionCategory {
  std::size_t pairs = 0;
  double mean = 0.0;
};

struct AttentionReport {
  std::map<std::string, AttentionCategory> categories;
  bool any_forks = false;
};

AttentionReport parent_child_attention(std::span<const AttentionRecord> records);
void write_attention_csv(std::ostream& os, const AttentionReport& report);

// ---- fork-location map --------------------------------------------------------

struct ForkLocationMap {
  std::vector<std::size_t> layers;
  std::vector<std::vector<std::size_t>> counts;  // [fork layer][token]
  std::size_t budget = 0;
  std::size_t n_tokens = 0;

  double token_mean(std::size_t token) const;  // mean over fork layers
};

ForkLocationMap fork_location_map(const Model& model, std::span<const TokenId> tokens, std::size_t budget = 0);
void write_forkmap_csv(std::ostream& os, const ForkLocationMap& map);
void write_forkmap_svg(std::ostream& os, const ForkLocationMap& map, std::span<const TokenId> tokens);

struct SpanForkReport {
  std::size_t examples = 0;
  double query_mean = 0.0;   // query + answer tokens
  double filler_mean = 0.0;
  std::size_t query_tokens = 0, filler_tokens = 0;
};

// Feeds [bos, text] for each example (truncated to the block) under the
// dynamic budget for its length, so short examples keep the training
// forks-per-token ratio, and averages per-token fork counts over the
// query/answer span vs. everything else.
SpanForkReport lookup_fork_report(const Model& model, std::span<const LookupExample> examples);

// ---- over-forking ablation ----------------------------------------------------

struct OverforkArm {
  std::string name;
  std::vector<std::size_t> fork_layers;
  double val_loss = 0.0;
  double val_perplexity = 0.0;
  std::vector<double> fork_utilization;  // final mean forks per token per fork layer
};

struct OverforkReport {
  std::vector<OverforkArm> arms;
};

// Trains `base` twice, differing only in fork_layers, into
// <out_dir>/early and <out_dir>/extended.
OverforkReport overfork_ablation(const TrainJob& base, const std::vector<std::size_t>& early,
                                 const std::vector<std::size_t>& extended, std::ostream* log = nullptr);
void write_overfork_csv(std::ostream& os, const OverforkReport& report);

}  // namespace tbub
