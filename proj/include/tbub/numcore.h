#pragma once

// Reverse-mode differentiation over dense row-major matrices of doubles.
//
// A Tape owns every node created during one forward pass. Nodes are appended
// in creation order, so walking the node list backwards is a valid reverse
// topological order. Graphs are rebuilt on every forward because fork
// decisions change topology per sequence.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace tbub {

using TokenId = std::uint32_t;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix from_rows(std::size_t r, std::size_t c, std::initializer_list<double> values);
  static Matrix from_rows(std::size_t r, std::size_t c, std::span<const double> values);
  static Matrix identity(std::size_t n);

  std::size_t size() const noexcept { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool same_shape(const Matrix& o) const noexcept { return rows == o.rows && cols == o.cols; }
  bool all_finite() const;
};

bool operator==(const Matrix& a, const Matrix& b);

class Tape;

// Lightweight handle to a node on a tape. Copyable; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  bool needs_grad() const;
  double scalar() const { return value().data.at(0); }

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives gradient.
  Var constant(Matrix value);
  // Leaf that receives gradient (readable via Var::grad after backward).
  Var leaf(Matrix value);
  // Leaf whose gradient is added into *sink after backward().
  Var param(const Matrix& value, Matrix* sink);

  // Records an op result. `parents` decide whether the node needs gradient.
  Var push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn);
  Var push(Matrix value, std::span<const Var> parents, BackwardFn fn);

  // Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to all leaves.
  void backward(Var out);

  const Matrix& value(std::uint32_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
  // Mutable gradient buffer of a parent, or nullptr when it needs none.
  Matrix* grad_buffer(std::uint32_t id);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Matrix* sink = nullptr;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;  // stable addresses across push
  bool backward_done_ = false;
};

// ---- scalar helpers -------------------------------------------------------

// Max-shifted log(sum(exp(x))). Throws kArgument on empty input.
double logsumexp(std::span<const double> x);
// log(sigmoid(x)) as -softplus(-x); finite for finite x.
double log_sigmoid(double x);

// ---- differentiable ops ---------------------------------------------------

Var matmul(Var a, Var b);
// a * b^T without materializing the transpose.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a + 1 * row, row is 1 x a.cols.
Var add_row(Var a, Var row);
// a + col * 1^T, col is a.rows x 1.
Var add_col(Var a, Var col);
// Row i of a scaled by col(i, 0).
Var mul_col(Var a, Var col);

Var exp(Var a);
Var log_sigmoid(Var a);
Var gelu(Var a);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layernorm(Var x, Var gain, Var bias, double eps = 1e-5);

// Rows of `table` selected by ids; gradient scatter-adds back.
Var embedding(Var table, std::span<const TokenId> ids);
// Rows of `a` in the given order (repeats allowed); gradient routes to sources.
Var gather_rows(Var a, std::span<const std::size_t> index);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);

Var sum(Var a);
Var mean(Var a);

// Row r of the output is logsumexp over rows of `a` with segment[r'] == r.
// Every segment must be non-empty.
Var segment_logsumexp(Var a, std::span<const std::size_t> segment, std::size_t n_segments);

// Mean over rows of -log_probs(i, targets[i]); rows without a target are
// excluded by passing a shorter target list (targets.size() <= rows).
Var nll_mean(Var log_probs, std::span<const TokenId> targets);

// Rotary embedding over adjacent feature pairs inside each head. Row r is
// rotated by positions[r] * base^(-2m/head_dim) for pair m.
Var rope(Var a, std::span<const double> positions, std::size_t head_dim, double base);
// Same rotation on a plain matrix.
Matrix rope_apply(const Matrix& a, std::span<const double> positions, std::size_t head_dim, double base);

// Receives per-head attention probabilities (n x n) from causal_attention.
using AttentionProbe = std::function<void(std::size_t head, const Matrix& probs)>;

// Multi-head causal attention: softmax(q_h k_h^T / sqrt(d_head) + 1 log_p^T + mask) v_h,
// heads concatenated. Row i may attend column j iff j <= i. `log_p` is an
// n x 1 column added unscaled to every logit column; pass an invalid Var to
// skip it. Value attenuation, if any, is applied by the caller.
Var causal_attention(Var q, Var k, Var v, Var log_p, std::size_t n_heads,
                     const AttentionProbe* probe = nullptr);

}  // namespace tbub
