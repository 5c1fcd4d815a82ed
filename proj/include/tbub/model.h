#pragma once

// Full architectures: the forking transformer ("ours"), the plain pre-LN
// decoder baseline, and the copy-k filler baseline.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tbub/blocks.h"
#include "tbub/forking.h"
#include "tbub/numcore.h"

namespace tbub {

enum class Variant { kOurs, kBaseline, kCopyK };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t block_size = 128;  // L
  std::size_t budget = 256;      // kappa: max live streams after a fork step
  // Fork steps run before the block with these 0-based indices; n_layers
  // means after the last block.
  std::vector<std::size_t> fork_layers = {2, 4};
  Variant variant = Variant::kOurs;
  std::size_t copy_k = 2;
  std::size_t vocab_size = 259;
  double rope_base = 10000.0;
  std::uint64_t seed = 0;

  // Throws kArgument describing the first violated constraint.
  void validate() const;
  // Budget implied by the variant: L for baseline, k*L for copy-k.
  std::size_t implied_budget() const;
  bool forks() const { return variant == Variant::kOurs; }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ParamTensor {
  std::string name;
  Matrix value;
  bool decay = false;  // weight decay applies
};

struct ParamStore {
  std::vector<ParamTensor> tensors;

  std::size_t index(std::string_view name) const;
  std::size_t scalar_count() const;
};

using ParamGrads = std::vector<Matrix>;

ParamGrads zero_grads(const ParamStore& params);

class Model {
 public:
  // Fresh parameters initialized from config.seed.
  explicit Model(ModelConfig config);
  Model(ModelConfig config, ParamStore params);

  const ModelConfig& config() const { return config_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

  struct Layout {
    std::size_t wte = 0, lnf_gain = 0, lnf_bias = 0;
    struct Block {
      std::size_t ln1_gain, ln1_bias, w_qkv, b_qkv, w_out, b_out, ln2_gain, ln2_bias, w_fc, b_fc, w_proj, b_proj;
    };
    std::vector<Block> blocks;
    struct Fork {
      std::size_t layer, weight, bias, embedding;
    };
    std::vector<Fork> forks;
  };
  const Layout& layout() const { return layout_; }

 private:
  void build_layout();

  ModelConfig config_;
  ParamStore params_;
  Layout layout_;
};

struct ForkLayerTrace {
  std::size_t layer = 0;
  std::size_t n_before = 0;
  SelectionSet selection;
  std::vector<StreamMeta> meta_after;
  std::vector<std::size_t> forks;  // live forks per token after the step
  std::vector<ForkEvent> events;
};

struct ForwardTrace {
  std::size_t budget = 0;
  std::vector<ForkLayerTrace> fork_layers;
  std::vector<StreamMeta> final_meta;
  std::vector<std::size_t> stream_updates;  // rows processed by each block
};

using AttentionHook =
    std::function<void(std::size_t layer, std::size_t head, const Matrix& probs, std::span<const StreamMeta> meta)>;

struct ForwardOptions {
  std::size_t budget = 0;          // 0 = config budget
  ParamGrads* grads = nullptr;     // when set, parameter gradients accumulate here on backward
  bool record_events = false;
  AttentionHook attention_hook;
};

struct ForwardPass {
  std::unique_ptr<Tape> tape;
  Var log_probs;  // one next-token log-distribution per input position
  ForwardTrace trace;
};

// Runs the configured architecture on `tokens` (1 <= size <= block_size).
ForwardPass forward(const Model& model, std::span<const TokenId> tokens, const ForwardOptions& options = {});

// Walks every fork step of a trace and reports violated invariants: each
// prior row maps to [fork][keep] in order, originals survive, rows stay
// within budget, log_cum never increases along a lineage. Empty = clean.
std::vector<std::string> structural_violations(const ForwardTrace& trace, std::size_t n_tokens);

// Mixes per-stream log-distributions into one per token, weighting stream j
// of token i by p_cum(i,j) / sum_j p_cum(i,j), entirely in log space.
Var output_average(Var stream_log_probs, Var log_cum, std::span<const StreamMeta> meta, std::size_t n_tokens);

// Expanded input for the copy-k baseline: every embedded token repeated k
// times (ranks k-1 .. 0, left to right).
struct CopyExpansion {
  std::vector<std::size_t> source;  // token index of each expanded row
  std::vector<StreamMeta> meta;
  std::vector<std::size_t> decode_rows;  // rank-0 rows, one per token
};
CopyExpansion build_copy_k(std::size_t n_tokens, std::size_t k);

// Mean negative log-likelihood of targets[i] under row i.
Var lm_loss(Var log_dists, std::span<const TokenId> targets);

// Central finite-difference check of every parameter group, skipping
// coordinates whose perturbation changes any top-k selection.
struct GroupGradCheck {
  std::string name;
  double rel_err = 0.0;  // ||backprop - fd|| / max(||backprop||, ||fd||)
  double grad_norm = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};
struct GradCheckReport {
  std::vector<GroupGradCheck> groups;
  double max_rel_err = 0.0;
  std::size_t skipped = 0;
};
GradCheckReport gradient_check(const Model& model, std::span<const TokenId> tokens, std::span<const TokenId> targets,
                               double eps = 1e-5);

}  // namespace tbub
