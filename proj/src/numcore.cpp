#include "tbub/numcore.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tbub/error.h"

namespace tbub {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kAllMasked: return "all-masked row";
    case ErrorKind::kArgument: return "argument error";
    case ErrorKind::kBudget: return "budget error";
    case ErrorKind::kInvariant: return "invariant violation";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kNonFinite: return "non-finite value";
    case ErrorKind::kFormat: return "format error";
  }
  return "error";
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw Error(ErrorKind::kDimension, std::string(op) + ": " + detail);
}

std::string shape(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

void same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(ErrorKind::kArgument, std::string(op) + ": vars on different tapes");
}

}  // namespace

// ---- Matrix ---------------------------------------------------------------

Matrix Matrix::from_rows(std::size_t r, std::size_t c, std::initializer_list<double> values) {
  return from_rows(r, c, std::span<const double>(values.begin(), values.size()));
}

Matrix Matrix::from_rows(std::size_t r, std::size_t c, std::span<const double> values) {
  if (values.size() != r * c) throw Error(ErrorKind::kDimension, "from_rows: value count mismatch");
  Matrix m(r, c);
  std::copy(values.begin(), values.end(), m.data.begin());
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

bool operator==(const Matrix& a, const Matrix& b) {
  return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

// ---- Var / Tape -----------------------------------------------------------

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::needs_grad() const { return tape_->needs_grad(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, nullptr, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::param(const Matrix& value, Matrix* sink) {
  nodes_.push_back(Node{value, {}, sink != nullptr, sink, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::push(Matrix value, std::span<const Var> parents, BackwardFn fn) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.valid() && p.needs_grad()) needs = true;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(fn) : BackwardFn{}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Matrix* Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  return n.needs_grad ? &n.grad : nullptr;
}

void Tape::backward(Var out) {
  if (&out.tape() != this) throw Error(ErrorKind::kArgument, "backward: var from another tape");
  if (out.value().size() != 1) throw Error(ErrorKind::kDimension, "backward: output must be 1x1");
  if (backward_done_) throw Error(ErrorKind::kArgument, "backward: already run on this tape");
  backward_done_ = true;
  for (std::size_t i = 0; i <= out.id(); ++i) {
    Node& n = nodes_[i];
    if (n.needs_grad) n.grad = Matrix(n.value.rows, n.value.cols);
  }
  if (!nodes_[out.id()].needs_grad) return;
  nodes_[out.id()].grad.data[0] = 1.0;
  for (std::size_t i = out.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.sink != nullptr) {
      if (n.sink->size() == 0) *n.sink = Matrix(n.value.rows, n.value.cols);
      for (std::size_t j = 0; j < n.grad.size(); ++j) n.sink->data[j] += n.grad.data[j];
    }
  }
}

// ---- scalar helpers -------------------------------------------------------

double logsumexp(std::span<const double> x) {
  if (x.empty()) throw Error(ErrorKind::kArgument, "logsumexp: empty input");
  if (x.size() == 1) return x[0];
  const double m = *std::max_element(x.begin(), x.end());
  if (m == kNegInf) return kNegInf;
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

double log_sigmoid(double x) {
  // -softplus(-x) = -log1p(exp(-x)), split to avoid overflow for x << 0.
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

// ---- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols == B.rows, "matmul", shape(A) + " * " + shape(B));
  const std::size_t n = A.rows, k = A.cols, m = B.cols;
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A.data[i * k + p];
      const double* br = B.data.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {a, b}, [ia, ib, n, k, m](Tape& t, const Matrix& g) {
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    if (Matrix* ga = t.grad_buffer(ia)) {
      // dA = G B^T
      for (std::size_t i = 0; i < n; ++i) {
        const double* gr = g.data.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double* br = B.data.data() + p * m;
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += gr[j] * br[j];
          ga->data[i * k + p] += s;
        }
      }
    }
    if (Matrix* gb = t.grad_buffer(ib)) {
      // dB = A^T G
      for (std::size_t i = 0; i < n; ++i) {
        const double* gr = g.data.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A.data[i * k + p];
          double* o = gb->data.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) o[j] += av * gr[j];
        }
      }
    }
  });
}

Var matmul_nt(Var a, Var b) {
  same_tape(a, b, "matmul_nt");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols == B.cols, "matmul_nt", shape(A) + " * " + shape(B) + "^T");
  const std::size_t n = A.rows, k = A.cols, m = B.rows;
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = A.data.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = B.data.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out.data[i * m + j] = s;
    }
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {a, b}, [ia, ib, n, k, m](Tape& t, const Matrix& g) {
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    if (Matrix* ga = t.grad_buffer(ia)) {
      // dA = G B
      for (std::size_t i = 0; i < n; ++i) {
        double* o = ga->data.data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
          const double gv = g.data[i * m + j];
          const double* br = B.data.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) o[p] += gv * br[p];
        }
      }
    }
    if (Matrix* gb = t.grad_buffer(ib)) {
      // dB = G^T A
      for (std::size_t i = 0; i < n; ++i) {
        const double* ar = A.data.data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
          const double gv = g.data[i * m + j];
          double* o = gb->data.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) o[p] += gv * ar[p];
        }
      }
    }
  });
}

Var transpose(Var a) {
  const Matrix& A = a.value();
  Matrix out(A.cols, A.rows);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < A.cols; ++j) out(j, i) = A(i, j);
  const auto ia = a.id();
  return a.tape().push(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    Matrix* ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga->rows; ++i)
      for (std::size_t j = 0; j < ga->cols; ++j) (*ga)(i, j) += g(j, i);
  });
}

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
  same_tape(a, b, "add");
  require(a.value().same_shape(b.value()), "add", shape(a.value()) + " vs " + shape(b.value()));
  Matrix out = a.value();
  const Matrix& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    for (auto id : {ia, ib}) {
      if (Matrix* gp = t.grad_buffer(id))
        for (std::size_t i = 0; i < g.size(); ++i) gp->data[i] += g.data[i];
    }
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b, "sub");
  require(a.value().same_shape(b.value()), "sub", shape(a.value()) + " vs " + shape(b.value()));
  Matrix out = a.value();
  const Matrix& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= B.data[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i];
    if (Matrix* gb = t.grad_buffer(ib))
      for (std::size_t i = 0; i < g.size(); ++i) gb->data[i] -= g.data[i];
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b, "mul");
  require(a.value().same_shape(b.value()), "mul", shape(a.value()) + " vs " + shape(b.value()));
  Matrix out = a.value();
  const Matrix& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    if (Matrix* ga = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i] * B.data[i];
    if (Matrix* gb = t.grad_buffer(ib))
      for (std::size_t i = 0; i < g.size(); ++i) gb->data[i] += g.data[i] * A.data[i];
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.data) v *= s;
  const auto ia = a.id();
  return a.tape().push(std::move(out), {a}, [ia, s](Tape& t, const Matrix& g) {
    Matrix* ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i] * s;
  });
}

Var add_row(Var a, Var row) {
  same_tape(a, row, "add_row");
  const Matrix& R = row.value();
  require(R.rows == 1 && R.cols == a.cols(), "add_row", shape(a.value()) + " + " + shape(R));
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += R.data[j];
  const auto ia = a.id(), ir = row.id();
  return a.tape().push(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i];
    if (Matrix* gr = t.grad_buffer(ir))
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) gr->data[j] += g(i, j);
  });
}

Var add_col(Var a, Var col) {
  same_tape(a, col, "add_col");
  const Matrix& C = col.value();
  require(C.cols == 1 && C.rows == a.rows(), "add_col", shape(a.value()) + " + " + shape(C));
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += C.data[i];
  const auto ia = a.id(), ic = col.id();
  return a.tape().push(std::move(out), {a, col}, [ia, ic](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i];
    if (Matrix* gc = t.grad_buffer(ic))
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) gc->data[i] += g(i, j);
  });
}

Var mul_col(Var a, Var col) {
  same_tape(a, col, "mul_col");
  const Matrix& C = col.value();
  require(C.cols == 1 && C.rows == a.rows(), "mul_col", shape(a.value()) + " * " + shape(C));
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) *= C.data[i];
  const auto ia = a.id(), ic = col.id();
  return a.tape().push(std::move(out), {a, col}, [ia, ic](Tape& t, const Matrix& g) {
    const Matrix& A = t.value(ia);
    const Matrix& C = t.value(ic);
    if (Matrix* ga = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) (*ga)(i, j) += g(i, j) * C.data[i];
    if (Matrix* gc = t.grad_buffer(ic))
      for (std::size_t i = 0; i < g.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < g.cols; ++j) s += g(i, j) * A(i, j);
        gc->data[i] += s;
      }
  });
}

Var exp(Var a) {
  Matrix out = a.value();
  for (double& v : out.data) v = std::exp(v);
  const auto ia = a.id();
  const std::uint32_t self = static_cast<std::uint32_t>(a.tape().size());
  return a.tape().push(std::move(out), {a}, [ia, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix* ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i] * y.data[i];
  });
}

Var log_sigmoid(Var a) {
  Matrix out = a.value();
  for (double& v : out.data) v = log_sigmoid(v);
  const auto ia = a.id();
  return a.tape().push(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    Matrix* ga = t.grad_buffer(ia);
    // d/dx log sigmoid(x) = sigmoid(-x) = exp(log_sigmoid(-x))
    for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i] * std::exp(log_sigmoid(-x.data[i]));
  });
}

Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  Matrix out = a.value();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::tanh(kC * (v + 0.044715 * v * v * v)));
  const auto ia = a.id();
  return a.tape().push(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    const Matrix& X = t.value(ia);
    Matrix* ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = X.data[i];
      const double u = kC * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
      ga->data[i] += g.data[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
  });
}

// ---- row-wise -------------------------------------------------------------

namespace {

void softmax_row(std::span<const double> in, std::span<double> out) {
  const double m = *std::max_element(in.begin(), in.end());
  if (m == kNegInf) throw Error(ErrorKind::kAllMasked, "softmax over a row with every entry -inf");
  double s = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = in[j] == kNegInf ? 0.0 : std::exp(in[j] - m);
    s += out[j];
  }
  for (double& v : out) v /= s;
}

}  // namespace

Var softmax_rows(Var a) {
  const Matrix& A = a.value();
  Matrix out(A.rows, A.cols);
  for (std::size_t i = 0; i < A.rows; ++i) softmax_row(A.row(i), out.row(i));
  const auto ia = a.id();
  const std::uint32_t self = static_cast<std::uint32_t>(a.tape().size());
  return a.tape().push(std::move(out), {a}, [ia, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix* ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols; ++j) (*ga)(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

Var log_softmax_rows(Var a) {
  const Matrix& A = a.value();
  Matrix out(A.rows, A.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    const double lse = logsumexp(A.row(i));
    if (lse == kNegInf) throw Error(ErrorKind::kAllMasked, "log_softmax over a row with every entry -inf");
    for (std::size_t j = 0; j < A.cols; ++j) out(i, j) = A(i, j) - lse;
  }
  const auto ia = a.id();
  const std::uint32_t self = static_cast<std::uint32_t>(a.tape().size());
  return a.tape().push(std::move(out), {a}, [ia, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix* ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) gs += g(i, j);
      for (std::size_t j = 0; j < y.cols; ++j) (*ga)(i, j) += g(i, j) - std::exp(y(i, j)) * gs;
    }
  });
}

Var layernorm(Var x, Var gain, Var bias, double eps) {
  same_tape(x, gain, "layernorm");
  same_tape(x, bias, "layernorm");
  const Matrix& X = x.value();
  const std::size_t n = X.rows, d = X.cols;
  require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d, "layernorm",
          "gain/bias must be 1x" + std::to_string(d));
  const Matrix& G = gain.value();
  const Matrix& B = bias.value();
  Matrix out(n, d);
  Matrix xhat(n, d);
  std::vector<double> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += X(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (X(i, j) - mu) * rstd[i];
      out(i, j) = xhat(i, j) * G.data[j] + B.data[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().push(std::move(out), {x, gain, bias},
                       [ix, ig, ib, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Matrix& g) {
                         const Matrix& G = t.value(ig);
                         if (Matrix* gg = t.grad_buffer(ig))
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < d; ++j) gg->data[j] += g(i, j) * xhat(i, j);
                         if (Matrix* gb = t.grad_buffer(ib))
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < d; ++j) gb->data[j] += g(i, j);
                         if (Matrix* gx = t.grad_buffer(ix)) {
                           const double dn = static_cast<double>(d);
                           for (std::size_t i = 0; i < n; ++i) {
                             double s1 = 0.0, s2 = 0.0;
                             for (std::size_t j = 0; j < d; ++j) {
                               const double dy = g(i, j) * G.data[j];
                               s1 += dy;
                               s2 += dy * xhat(i, j);
                             }
                             for (std::size_t j = 0; j < d; ++j) {
                               const double dy = g(i, j) * G.data[j];
                               (*gx)(i, j) += rstd[i] * (dy - s1 / dn - xhat(i, j) * s2 / dn);
                             }
                           }
                         }
                       });
}

// ---- gathers --------------------------------------------------------------

Var embedding(Var table, std::span<const std::uint32_t> ids) {
  const Matrix& T = table.value();
  Matrix out(ids.size(), T.cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= T.rows) throw Error(ErrorKind::kArgument, "embedding: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(T.row(ids[i]).begin(), T.cols, out.row(i).begin());
  }
  const auto it = table.id();
  return table.tape().push(std::move(out), {table},
                           [it, idx = std::vector<std::uint32_t>(ids.begin(), ids.end())](Tape& t, const Matrix& g) {
                             Matrix* gt = t.grad_buffer(it);
                             for (std::size_t i = 0; i < idx.size(); ++i)
                               for (std::size_t j = 0; j < g.cols; ++j) (*gt)(idx[i], j) += g(i, j);
                           });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  const Matrix& A = a.value();
  Matrix out(index.size(), A.cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < A.rows, "gather_rows", "row " + std::to_string(index[i]) + " of " + shape(A));
    std::copy_n(A.row(index[i]).begin(), A.cols, out.row(i).begin());
  }
  const auto ia = a.id();
  return a.tape().push(std::move(out), {a},
                       [ia, idx = std::vector<std::size_t>(index.begin(), index.end())](Tape& t, const Matrix& g) {
                         Matrix* ga = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t j = 0; j < g.cols; ++j) (*ga)(idx[i], j) += g(i, j);
                       });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorKind::kArgument, "concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    same_tape(parts[0], p, "concat_rows");
    require(p.cols() == cols, "concat_rows", "column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off * cols));
    off += p.rows();
    ids.push_back(p.id());
  }
  return parts[0].tape().push(std::move(out), parts, [ids = std::move(ids)](Tape& t, const Matrix& g) {
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t n = t.value(id).size();
      if (Matrix* gp = t.grad_buffer(id))
        for (std::size_t i = 0; i < n; ++i) gp->data[i] += g.data[off + i];
      off += n;
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Matrix& A = a.value();
  require(begin <= end && end <= A.cols, "slice_cols", "range out of bounds for " + shape(A));
  const std::size_t w = end - begin;
  Matrix out(A.rows, w);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = A(i, begin + j);
  const auto ia = a.id();
  return a.tape().push(std::move(out), {a}, [ia, begin, w](Tape& t, const Matrix& g) {
    Matrix* ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < w; ++j) (*ga)(i, begin + j) += g(i, j);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorKind::kArgument, "concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    same_tape(parts[0], p, "concat_cols");
    require(p.rows() == rows, "concat_cols", "row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& P = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < P.cols; ++j) out(i, off + j) = P(i, j);
    off += P.cols;
    ids.push_back(p.id());
  }
  return parts[0].tape().push(std::move(out), parts, [ids = std::move(ids)](Tape& t, const Matrix& g) {
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t w = t.value(id).cols;
      if (Matrix* gp = t.grad_buffer(id))
        for (std::size_t i = 0; i < g.rows; ++i)
          for (std::size_t j = 0; j < w; ++j) (*gp)(i, j) += g(i, off + j);
      off += w;
    }
  });
}

// ---- reductions -----------------------------------------------------------

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const auto ia = a.id();
  return a.tape().push(Matrix(1, 1, s), {a}, [ia](Tape& t, const Matrix& g) {
    Matrix* ga = t.grad_buffer(ia);
    for (double& v : ga->data) v += g.data[0];
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw Error(ErrorKind::kArgument, "mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var segment_logsumexp(Var a, std::span<const std::size_t> segment, std::size_t n_segments) {
  const Matrix& A = a.value();
  require(segment.size() == A.rows, "segment_logsumexp", "segment ids must cover every row");
  std::vector<std::vector<std::size_t>> members(n_segments);
  for (std::size_t r = 0; r < segment.size(); ++r) {
    if (segment[r] >= n_segments) throw Error(ErrorKind::kArgument, "segment_logsumexp: segment id out of range");
    members[segment[r]].push_back(r);
  }
  Matrix out(n_segments, A.cols);
  std::vector<double> buf;
  for (std::size_t s = 0; s < n_segments; ++s) {
    if (members[s].empty()) throw Error(ErrorKind::kArgument, "segment_logsumexp: empty segment " + std::to_string(s));
    buf.resize(members[s].size());
    for (std::size_t c = 0; c < A.cols; ++c) {
      for (std::size_t m = 0; m < members[s].size(); ++m) buf[m] = A(members[s][m], c);
      out(s, c) = logsumexp(buf);
    }
  }
  const auto ia = a.id();
  const std::uint32_t self = static_cast<std::uint32_t>(a.tape().size());
  return a.tape().push(std::move(out), {a},
                       [ia, self, seg = std::vector<std::size_t>(segment.begin(), segment.end())](Tape& t, const Matrix& g) {
                         const Matrix& A = t.value(ia);
                         const Matrix& y = t.value(self);
                         Matrix* ga = t.grad_buffer(ia);
                         for (std::size_t r = 0; r < A.rows; ++r) {
                           const std::size_t s = seg[r];
                           for (std::size_t c = 0; c < A.cols; ++c) {
                             const double w = (A(r, c) == kNegInf) ? 0.0 : std::exp(A(r, c) - y(s, c));
                             (*ga)(r, c) += g(s, c) * w;
                           }
                         }
                       });
}

Var nll_mean(Var log_probs, std::span<const std::uint32_t> targets) {
  const Matrix& P = log_probs.value();
  if (targets.empty()) throw Error(ErrorKind::kArgument, "nll_mean: no targets");
  require(targets.size() <= P.rows, "nll_mean", "more targets than rows");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= P.cols) throw Error(ErrorKind::kArgument, "nll_mean: target out of range");
    s -= P(i, targets[i]);
  }
  const double inv = 1.0 / static_cast<double>(targets.size());
  const auto ip = log_probs.id();
  return log_probs.tape().push(
      Matrix(1, 1, s * inv), {log_probs},
      [ip, inv, tg = std::vector<std::uint32_t>(targets.begin(), targets.end())](Tape& t, const Matrix& g) {
        Matrix* gp = t.grad_buffer(ip);
        for (std::size_t i = 0; i < tg.size(); ++i) (*gp)(i, tg[i]) -= g.data[0] * inv;
      });
}

// ---- rotary ---------------------------------------------------------------

namespace {

void rotate_rows(Matrix& m, std::span<const double> positions, std::size_t head_dim, double base, double sign) {
  const std::size_t heads = m.cols / head_dim;
  const std::size_t pairs = head_dim / 2;
  std::vector<double> freq(pairs);
  for (std::size_t p = 0; p < pairs; ++p)
    freq[p] = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t p = 0; p < pairs; ++p) {
      const double ang = sign * positions[r] * freq[p];
      const double c = std::cos(ang), s = std::sin(ang);
      for (std::size_t h = 0; h < heads; ++h) {
        double& x0 = m(r, h * head_dim + 2 * p);
        double& x1 = m(r, h * head_dim + 2 * p + 1);
        const double a = x0, b = x1;
        x0 = a * c - b * s;
        x1 = a * s + b * c;
      }
    }
  }
}

void check_rope(const Matrix& a, std::span<const double> positions, std::size_t head_dim) {
  require(positions.size() == a.rows, "rope", "one position per row required");
  require(head_dim > 0 && head_dim % 2 == 0 && a.cols % head_dim == 0, "rope",
          "head_dim must be even and divide " + std::to_string(a.cols));
}

}  // namespace

Matrix rope_apply(const Matrix& a, std::span<const double> positions, std::size_t head_dim, double base) {
  check_rope(a, positions, head_dim);
  Matrix out = a;
  rotate_rows(out, positions, head_dim, base, 1.0);
  return out;
}

Var rope(Var a, std::span<const double> positions, std::size_t head_dim, double base) {
  Matrix out = rope_apply(a.value(), positions, head_dim, base);
  const auto ia = a.id();
  return a.tape().push(std::move(out), {a},
                       [ia, head_dim, base, pos = std::vector<double>(positions.begin(), positions.end())](
                           Tape& t, const Matrix& g) {
                         Matrix back = g;
                         rotate_rows(back, pos, head_dim, base, -1.0);
                         Matrix* ga = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < back.size(); ++i) ga->data[i] += back.data[i];
                       });
}

// ---- attention ------------------------------------------------------------

Var causal_attention(Var q, Var k, Var v, Var log_p, std::size_t n_heads, const AttentionProbe* probe) {
  same_tape(q, k, "causal_attention");
  same_tape(q, v, "causal_attention");
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  const std::size_t n = Q.rows, d = Q.cols;
  require(K.rows == n && V.rows == n && K.cols == d && V.cols == d, "causal_attention", "q/k/v shapes differ");
  require(n_heads > 0 && d % n_heads == 0, "causal_attention", "heads must divide width");
  const bool has_p = log_p.valid();
  if (has_p) {
    same_tape(q, log_p, "causal_attention");
    require(log_p.rows() == n && log_p.cols() == 1, "causal_attention", "log_p must be n x 1");
  }
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix* LP = has_p ? &log_p.value() : nullptr;

  std::vector<Matrix> probs(n_heads, Matrix(n, n));
  Matrix out(n, d);
  std::vector<double> logits(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    Matrix& P = probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += Q(i, off + c) * K(j, off + c);
        logits[j] = s * sc + (LP ? LP->data[j] : 0.0);
      }
      softmax_row(std::span<const double>(logits.data(), i + 1), P.row(i).subspan(0, i + 1));
      for (std::size_t j = 0; j <= i; ++j) {
        const double w = P(i, j);
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < dh; ++c) out(i, off + c) += w * V(j, off + c);
      }
    }
    if (probe != nullptr && *probe) (*probe)(h, P);
  }

  const auto iq = q.id(), ik = k.id(), iv = v.id();
  const auto ip = has_p ? log_p.id() : 0u;
  std::vector<Var> parents{q, k, v};
  if (has_p) parents.push_back(log_p);
  return q.tape().push(
      std::move(out), parents,
      [iq, ik, iv, ip, has_p, n, dh, sc, n_heads, probs = std::move(probs)](Tape& t, const Matrix& g) {
        const Matrix& Q = t.value(iq);
        const Matrix& K = t.value(ik);
        const Matrix& V = t.value(iv);
        Matrix* gq = t.grad_buffer(iq);
        Matrix* gk = t.grad_buffer(ik);
        Matrix* gv = t.grad_buffer(iv);
        Matrix* gp = has_p ? t.grad_buffer(ip) : nullptr;
        std::vector<double> dlogit(n);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          const Matrix& P = probs[h];
          for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              double dp = 0.0;
              for (std::size_t c = 0; c < dh; ++c) dp += g(i, off + c) * V(j, off + c);
              dlogit[j] = dp;
              dot += dp * P(i, j);
            }
            for (std::size_t j = 0; j <= i; ++j) {
              const double w = P(i, j);
              if (gv != nullptr && w != 0.0)
                for (std::size_t c = 0; c < dh; ++c) (*gv)(j, off + c) += w * g(i, off + c);
              const double ds = w * (dlogit[j] - dot);
              if (ds == 0.0) continue;
              if (gp != nullptr) gp->data[j] += ds;
              if (gq != nullptr)
                for (std::size_t c = 0; c < dh; ++c) (*gq)(i, off + c) += ds * sc * K(j, off + c);
              if (gk != nullptr)
                for (std::size_t c = 0; c < dh; ++c) (*gk)(j, off + c) += ds * sc * Q(i, off + c);
            }
          }
        }
      });
}

}  // namespace tbub
