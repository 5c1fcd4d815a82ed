#include "tbub/oracles.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <tuple>

#include "tbub/blocks.h"
#include "tbub/forking.h"

namespace tbub::oracle {

Selection topk(std::span<const double> log_fork_hat, std::span<const double> log_keep_forced,
               std::span<const std::size_t> fork_rank, std::size_t budget) {
  const std::size_t n = log_fork_hat.size();
  std::vector<Candidate> all;
  for (std::size_t r = 0; r < n; ++r) {
    all.push_back({r, false, false, log_fork_hat[r]});
    all.push_back({r, true, fork_rank[r] == 0, log_keep_forced[r]});
  }
  auto key = [](const Candidate& c) {
    return std::make_tuple(c.forced ? 1 : 0, c.score, c.keep ? 1 : 0, -static_cast<long long>(c.row));
  };
  std::sort(all.begin(), all.end(), [&](const Candidate& a, const Candidate& b) { return key(a) > key(b); });
  Selection s{std::vector<char>(n, 0), std::vector<char>(n, 0)};
  for (std::size_t i = 0; i < std::min(budget, all.size()); ++i) (all[i].keep ? s.keep : s.fork)[all[i].row] = 1;
  return s;
}

namespace {

double ref_log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

}  // namespace

std::vector<StreamRow> fork_step(const std::vector<StreamRow>& rows, const Matrix& weight, const Matrix& bias,
                                 const std::vector<double>& embedding, std::size_t budget) {
  const std::size_t n = rows.size();
  std::vector<double> fork_hat(n), keep_hat(n), keep_forced(n);
  std::vector<std::size_t> ranks(n);
  for (std::size_t r = 0; r < n; ++r) {
    double lf = 0.0, lk = 0.0;
    for (std::size_t c = 0; c < rows[r].x.size(); ++c) {
      lf += rows[r].x[c] * weight(c, 0);
      lk += rows[r].x[c] * weight(c, 1);
    }
    lf += bias(0, 0);
    lk += bias(0, 1);
    fork_hat[r] = rows[r].log_cum + ref_log_sigmoid(lf);
    keep_hat[r] = rows[r].log_cum + ref_log_sigmoid(lk);
    keep_forced[r] = rows[r].rank == 0 ? 0.0 : keep_hat[r];
    ranks[r] = rows[r].rank;
  }
  const Selection s = topk(fork_hat, keep_forced, ranks, budget);
  std::vector<StreamRow> out;
  for (std::size_t r = 0; r < n; ++r) {
    if (s.fork[r]) {
      StreamRow child = rows[r];
      for (std::size_t c = 0; c < child.x.size(); ++c) child.x[c] += embedding[c];
      child.rank += 1;
      child.log_cum = fork_hat[r];
      out.push_back(std::move(child));
    }
    if (s.keep[r]) {
      StreamRow kept = rows[r];
      kept.log_cum = keep_hat[r];
      out.push_back(std::move(kept));
    }
  }
  return out;
}

std::vector<double> rotate(std::span<const double> x, double position, std::size_t head_dim, double base) {
  std::vector<double> y(x.begin(), x.end());
  for (std::size_t h = 0; h * head_dim < x.size(); ++h) {
    for (std::size_t m = 0; m < head_dim / 2; ++m) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(head_dim));
      const double a = position * theta;
      const std::size_t i = h * head_dim + 2 * m, j = i + 1;
      y[i] = std::cos(a) * x[i] - std::sin(a) * x[j];
      y[j] = std::sin(a) * x[i] + std::cos(a) * x[j];
    }
  }
  return y;
}

std::vector<double> mixture(const std::vector<std::vector<double>>& stream_log_probs,
                            const std::vector<double>& log_cum) {
  long double total = 0.0L;
  for (double lc : log_cum) total += std::exp(static_cast<long double>(lc));
  const std::size_t V = stream_log_probs.at(0).size();
  std::vector<double> out(V);
  for (std::size_t v = 0; v < V; ++v) {
    long double p = 0.0L;
    for (std::size_t j = 0; j < log_cum.size(); ++j)
      p += std::exp(static_cast<long double>(log_cum[j])) / total *
           std::exp(static_cast<long double>(stream_log_probs[j][v]));
    out[v] = static_cast<double>(std::log(p));
  }
  return out;
}

double naive_logsumexp(std::span<const double> x) {
  long double s = 0.0L;
  for (double v : x) s += std::exp(static_cast<long double>(v));
  return static_cast<double>(std::log(s));
}

namespace {

// Random valid group structure: n_tokens originals with forks to their left.
std::vector<std::size_t> random_groups(std::size_t n, std::size_t n_tokens, std::mt19937_64& rng) {
  std::vector<std::size_t> sizes(n_tokens, 1);
  std::uniform_int_distribution<std::size_t> pick(0, n_tokens - 1);
  for (std::size_t extra = n - n_tokens; extra > 0; --extra) ++sizes[pick(rng)];
  return sizes;
}

}  // namespace

SuiteResult run_topk_suite(std::size_t cases, std::uint64_t seed) {
  SuiteResult res{"topk", cases, 0, 0.0};
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    const std::size_t n_tokens = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    const std::size_t budget = std::uniform_int_distribution<std::size_t>(n_tokens, 20)(rng);
    const auto sizes = random_groups(n, n_tokens, rng);
    std::vector<std::size_t> ranks;
    for (std::size_t s : sizes)
      for (std::size_t p = s; p-- > 0;) ranks.push_back(p);
    // Draw from a coarse grid every other case so ties are common.
    const bool coarse = c % 2 == 0;
    std::uniform_real_distribution<double> u(-6.0, -1e-3);
    std::uniform_int_distribution<int> grid(1, 4);
    std::vector<double> fork_hat(n), keep_forced(n);
    for (std::size_t r = 0; r < n; ++r) {
      fork_hat[r] = coarse ? -0.5 * grid(rng) : u(rng);
      keep_forced[r] = ranks[r] == 0 ? 0.0 : (coarse ? -0.5 * grid(rng) : u(rng));
    }
    const SelectionSet got = select_topk(fork_hat, keep_forced, ranks, budget, n_tokens);
    const Selection want = topk(fork_hat, keep_forced, ranks, budget);
    if (got.keep != want.keep || got.fork != want.fork) ++res.mismatches;
  }
  return res;
}

SuiteResult run_fork_step_suite(std::size_t cases, std::uint64_t seed) {
  SuiteResult res{"fork_step", cases, 0, 0.0};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t d = 6;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    const std::size_t n_tokens = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    const std::size_t budget = std::uniform_int_distribution<std::size_t>(n_tokens, 20)(rng);
    const auto sizes = random_groups(n, n_tokens, rng);
    std::vector<StreamRow> rows;
    for (std::size_t t = 0; t < n_tokens; ++t)
      for (std::size_t p = sizes[t]; p-- > 0;) {
        StreamRow r{std::vector<double>(d), t, p, p == 0 ? -std::abs(nd(rng)) : -std::abs(nd(rng)) - 0.1};
        for (double& v : r.x) v = nd(rng);
        rows.push_back(std::move(r));
      }
    Matrix w(d, 2), b(1, 2);
    for (double& v : w.data) v = nd(rng);
    for (double& v : b.data) v = nd(rng);
    std::vector<double> emb(d);
    for (double& v : emb) v = 0.1 * nd(rng);

    Tape tape;
    ResidualSet set;
    Matrix xs(n, d), lc(n, 1);
    for (std::size_t r = 0; r < n; ++r) {
      std::copy(rows[r].x.begin(), rows[r].x.end(), xs.row(r).begin());
      lc.data[r] = rows[r].log_cum;
      set.meta.push_back({rows[r].origin, rows[r].rank, rows[r].log_cum});
    }
    set.streams = tape.constant(xs);
    set.log_cum = tape.constant(lc);
    set.n_tokens = n_tokens;
    Matrix embm(1, d);
    std::copy(emb.begin(), emb.end(), embm.data.begin());
    ForkParams fp{tape.constant(w), tape.constant(b), tape.constant(embm)};
    const ForkStep got = tbub::fork_step(set, fp, budget, 0);
    const auto want = fork_step(rows, w, b, emb, budget);

    bool ok = got.set.size() == want.size();
    for (std::size_t r = 0; ok && r < want.size(); ++r) {
      const StreamMeta& m = got.set.meta[r];
      ok = m.origin == want[r].origin && m.fork_rank == want[r].rank && m.log_cum == want[r].log_cum &&
           got.set.log_cum.value().data[r] == want[r].log_cum;
      for (std::size_t k = 0; ok && k < d; ++k)
        res.max_abs_err = std::max(res.max_abs_err, std::abs(got.set.streams.value()(r, k) - want[r].x[k]));
    }
    if (!ok) ++res.mismatches;
  }
  if (res.max_abs_err > 0.0) ++res.mismatches;
  return res;
}

SuiteResult run_logsumexp_suite(std::size_t cases, std::uint64_t seed) {
  SuiteResult res{"logsumexp", cases, 0, 0.0};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-30.0, 30.0);
  for (std::size_t c = 0; c < cases; ++c) {
    std::vector<double> x(std::uniform_int_distribution<std::size_t>(1, 16)(rng));
    for (double& v : x) v = u(rng);
    const double want = naive_logsumexp(x);
    const double got = logsumexp(x);
    const double rel = std::abs(got - want) / std::max(std::abs(want), 1.0);
    res.max_abs_err = std::max(res.max_abs_err, rel);
    if (rel >= 1e-12 || got < *std::max_element(x.begin(), x.end())) ++res.mismatches;
  }
  return res;
}

SuiteResult run_rope_suite(std::size_t cases, std::uint64_t seed) {
  SuiteResult res{"rope", cases, 0, 0.0};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t head_dim = 4, d = 8;
  const double base = 10000.0;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    const std::size_t n_tokens = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    const auto sizes = random_groups(n, n_tokens, rng);
    std::vector<StreamMeta> meta;
    std::vector<double> expected_pos;
    for (std::size_t k = 0; k < n_tokens; ++k) {
      const std::size_t q = sizes[k] - 1;
      for (std::size_t p = sizes[k]; p-- > 0;) {
        meta.push_back({k, p, 0.0});
        expected_pos.push_back(q == 0 ? static_cast<double>(k)
                                      : static_cast<double>(k) - static_cast<double>(p) / static_cast<double>(q));
      }
    }
    Matrix x(n, d);
    for (double& v : x.data) v = nd(rng);
    const Matrix got = partial_rope(x, meta, head_dim, base);
    for (std::size_t r = 0; r < n; ++r) {
      const auto want = rotate(x.row(r), expected_pos[r], head_dim, base);
      for (std::size_t j = 0; j < d; ++j)
        res.max_abs_err = std::max(res.max_abs_err, std::abs(got(r, j) - want[j]));
    }
  }
  if (res.max_abs_err >= 1e-12) res.mismatches = 1;
  return res;
}

}  // namespace tbub::oracle
