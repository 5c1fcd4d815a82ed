#include "tbub/blocks.h"

#include "tbub/error.h"

namespace tbub {

std::vector<double> fork_positions(std::span<const StreamMeta> meta) {
  std::vector<double> pos(meta.size());
  std::size_t start = 0;
  while (start < meta.size()) {
    std::size_t end = start;
    while (end < meta.size() && meta[end].origin == meta[start].origin) ++end;
    const std::size_t forks = end - start - 1;
    const double k = static_cast<double>(meta[start].origin);
    for (std::size_t r = start; r < end; ++r) {
      const std::size_t p = end - 1 - r;
      pos[r] = forks == 0 ? k : k - static_cast<double>(p) / static_cast<double>(forks);
    }
    start = end;
  }
  return pos;
}

Matrix partial_rope(const Matrix& streams, std::span<const StreamMeta> meta, std::size_t head_dim, double base) {
  const std::vector<double> pos = fork_positions(meta);
  return rope_apply(streams, pos, head_dim, base);
}

Var attenuated_attention(Var q, Var k, Var v, Var log_p, std::size_t n_heads, const AttentionProbe* probe) {
  if (!log_p.valid()) return causal_attention(q, k, v, Var{}, n_heads, probe);
  Var scaled_v = mul_col(v, exp(log_p));
  return causal_attention(q, k, scaled_v, log_p, n_heads, probe);
}

Var block_forward(Var x, Var log_p, std::span<const double> positions, const BlockParams& p,
                  const BlockOptions& options) {
  const std::size_t d = x.cols();
  if (d % options.n_heads != 0) throw Error(ErrorKind::kDimension, "block: heads must divide width");
  const std::size_t head_dim = d / options.n_heads;
  const bool attenuate = log_p.valid();
  Var gate = attenuate ? exp(log_p) : Var{};

  Var h = layernorm(x, p.ln1_gain, p.ln1_bias);
  Var qkv = add_row(matmul(h, p.w_qkv), p.b_qkv);
  Var q = rope(slice_cols(qkv, 0, d), positions, head_dim, options.rope_base);
  Var k = rope(slice_cols(qkv, d, 2 * d), positions, head_dim, options.rope_base);
  Var v = slice_cols(qkv, 2 * d, 3 * d);
  if (attenuate) v = mul_col(v, gate);
  Var a = causal_attention(q, k, v, log_p, options.n_heads, options.probe);
  a = add_row(matmul(a, p.w_out), p.b_out);
  if (attenuate) a = mul_col(a, gate);
  Var x1 = add(x, a);

  Var m = layernorm(x1, p.ln2_gain, p.ln2_bias);
  m = gelu(add_row(matmul(m, p.w_fc), p.b_fc));
  m = add_row(matmul(m, p.w_proj), p.b_proj);
  if (attenuate) m = mul_col(m, gate);
  return add(x1, m);
}

}  // namespace tbub
