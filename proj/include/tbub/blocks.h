#pragma once

// Score-attenuated pre-LN transformer blocks and fractional rotary positions.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "tbub/forking.h"
#include "tbub/numcore.h"

namespace tbub {

// Causal structure over the assembled left-to-right stream order. A fork
// sits left of its parent, so parents see their children but not the
// reverse.
struct AttentionMask {
  std::size_t n = 0;
  bool allowed(std::size_t query, std::size_t key) const { return key <= query && query < n; }
};

// Rotary position of every stream: token k's stream p places from the right
// in a group holding q forks gets k - p/q. Originals land on k exactly.
std::vector<double> fork_positions(std::span<const StreamMeta> meta);

// Rotates each head's feature pairs of `streams` by fork_positions(meta).
Matrix partial_rope(const Matrix& streams, std::span<const StreamMeta> meta, std::size_t head_dim, double base);

// Attention with cumulative-score attenuation: log_p is added to every
// logit column and value rows are scaled by exp(log_p) before aggregation.
// With an invalid log_p this is plain causal multi-head attention.
Var attenuated_attention(Var q, Var k, Var v, Var log_p, std::size_t n_heads,
                         const AttentionProbe* probe = nullptr);

struct BlockParams {
  Var ln1_gain, ln1_bias;
  Var w_qkv, b_qkv;  // d x 3d, 1 x 3d
  Var w_out, b_out;  // d x d, 1 x d
  Var ln2_gain, ln2_bias;
  Var w_fc, b_fc;      // d x 4d, 1 x 4d
  Var w_proj, b_proj;  // 4d x d, 1 x d
};

struct BlockOptions {
  std::size_t n_heads = 1;
  double rope_base = 10000.0;
  const AttentionProbe* probe = nullptr;
};

// x' = Attn(LN(x)) * p + x;  out = MLP(LN(x')) * p + x'.
// With an invalid log_p the writes are not attenuated (standard block).
Var block_forward(Var x, Var log_p, std::span<const double> positions, const BlockParams& params,
                  const BlockOptions& options);

}  // namespace tbub
