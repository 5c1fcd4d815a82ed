#include "tbub/forking.h"

#include <algorithm>
#include <numeric>
#include <string>

#include "tbub/error.h"

namespace tbub {

std::size_t SelectionSet::count() const {
  std::size_t c = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) c += static_cast<std::size_t>(keep[i] != 0) + (fork[i] != 0);
  return c;
}

std::string_view to_string(ForkAction action) {
  switch (action) {
    case ForkAction::kKeep: return "keep";
    case ForkAction::kFork: return "fork";
    case ForkAction::kDelete: return "delete";
  }
  return "?";
}

ForkScores score_streams(const ResidualSet& set, const ForkParams& params) {
  Var logits = add_row(matmul(set.streams, params.weight), params.bias);
  ForkScores s;
  s.log_fork = log_sigmoid(slice_cols(logits, 0, 1));
  s.log_keep = log_sigmoid(slice_cols(logits, 1, 2));
  s.log_fork_hat = add(set.log_cum, s.log_fork);
  s.log_keep_hat = add(set.log_cum, s.log_keep);
  const Matrix& keep_hat = s.log_keep_hat.value();
  s.log_keep_forced.resize(set.size());
  for (std::size_t i = 0; i < set.size(); ++i)
    s.log_keep_forced[i] = set.meta[i].fork_rank == 0 ? 0.0 : keep_hat.data[i];
  return s;
}

SelectionSet select_topk(std::span<const double> log_fork_hat, std::span<const double> log_keep_forced,
                         std::span<const std::size_t> fork_rank, std::size_t budget, std::size_t n_tokens) {
  const std::size_t n = log_fork_hat.size();
  if (log_keep_forced.size() != n || fork_rank.size() != n)
    throw Error(ErrorKind::kDimension, "select_topk: score/rank lengths differ");
  if (budget < 1 || budget < n_tokens)
    throw Error(ErrorKind::kBudget,
                "budget " + std::to_string(budget) + " cannot hold " + std::to_string(n_tokens) + " originals");

  // Candidate c: row c / 2, keep when c is odd.
  auto before = [&](std::size_t a, std::size_t b) {
    const std::size_t ra = a / 2, rb = b / 2;
    const bool ka = a % 2 == 1, kb = b % 2 == 1;
    const bool fa = ka && fork_rank[ra] == 0, fb = kb && fork_rank[rb] == 0;
    if (fa != fb) return fa;
    const double sa = ka ? log_keep_forced[ra] : log_fork_hat[ra];
    const double sb = kb ? log_keep_forced[rb] : log_fork_hat[rb];
    if (sa != sb) return sa > sb;
    if (ka != kb) return ka;
    return ra < rb;
  };

  std::vector<std::size_t> cand(2 * n);
  std::iota(cand.begin(), cand.end(), std::size_t{0});
  const std::size_t take = std::min(budget, cand.size());
  std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), before);

  SelectionSet sel;
  sel.keep.assign(n, 0);
  sel.fork.assign(n, 0);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t c = cand[i];
    (c % 2 == 1 ? sel.keep : sel.fork)[c / 2] = 1;
  }
  return sel;
}

SelectionSet select_topk(const ForkScores& scores, std::span<const StreamMeta> meta, std::size_t budget,
                         std::size_t n_tokens) {
  std::vector<std::size_t> ranks(meta.size());
  for (std::size_t i = 0; i < meta.size(); ++i) ranks[i] = meta[i].fork_rank;
  return select_topk(scores.log_fork_hat.value().data, scores.log_keep_forced, ranks, budget, n_tokens);
}

ResidualSet assemble(const ResidualSet& set, const ForkScores& scores, const SelectionSet& sel, Var fork_embedding,
                     std::size_t layer, std::vector<ForkEvent>* events) {
  const std::size_t n = set.size();
  if (sel.keep.size() != n || sel.fork.size() != n)
    throw Error(ErrorKind::kDimension, "assemble: selection does not match stream set");

  const Matrix& keep_hat = scores.log_keep_hat.value();
  const Matrix& fork_hat = scores.log_fork_hat.value();

  std::vector<std::size_t> forked;
  for (std::size_t r = 0; r < n; ++r)
    if (sel.fork[r]) forked.push_back(r);

  // Row r of the extended set is stream r; row n + f is the fork of forked[f].
  std::vector<std::size_t> order;
  ResidualSet out;
  out.n_tokens = set.n_tokens;
  std::size_t next_fork = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const StreamMeta& m = set.meta[r];
    if (sel.fork[r]) {
      order.push_back(n + next_fork++);
      out.meta.push_back({m.origin, m.fork_rank + 1, fork_hat.data[r]});
      if (events) events->push_back({layer, m.origin, m.fork_rank + 1, fork_hat.data[r], ForkAction::kFork});
    }
    if (sel.keep[r]) {
      order.push_back(r);
      out.meta.push_back({m.origin, m.fork_rank, keep_hat.data[r]});
      if (events) events->push_back({layer, m.origin, m.fork_rank, keep_hat.data[r], ForkAction::kKeep});
    } else {
      if (m.fork_rank == 0)
        throw Error(ErrorKind::kInvariant, "original stream of token " + std::to_string(m.origin) + " deleted");
      if (events) events->push_back({layer, m.origin, m.fork_rank, keep_hat.data[r], ForkAction::kDelete});
    }
  }

  Var ext_streams = set.streams;
  Var ext_scores = scores.log_keep_hat;
  if (!forked.empty()) {
    Var children = add_row(gather_rows(set.streams, forked), fork_embedding);
    const Var rows[] = {set.streams, children};
    ext_streams = concat_rows(rows);
    const Var cols[] = {scores.log_keep_hat, gather_rows(scores.log_fork_hat, forked)};
    ext_scores = concat_rows(cols);
  }
  out.streams = gather_rows(ext_streams, order);
  out.log_cum = gather_rows(ext_scores, order);
  return out;
}

ForkStep fork_step(const ResidualSet& set, const ForkParams& params, std::size_t budget, std::size_t layer,
                   std::vector<ForkEvent>* events) {
  ForkScores scores = score_streams(set, params);
  SelectionSet sel = select_topk(scores, set.meta, budget, set.n_tokens);
  ResidualSet next = assemble(set, scores, sel, params.embedding, layer, events);
  return {std::move(next), std::move(sel)};
}

std::vector<std::size_t> forks_per_token(std::span<const StreamMeta> meta, std::size_t n_tokens) {
  std::vector<std::size_t> counts(n_tokens, 0);
  for (const StreamMeta& m : meta) {
    if (m.origin >= n_tokens) throw Error(ErrorKind::kInvariant, "stream origin out of range");
    if (m.fork_rank != 0) ++counts[m.origin];
  }
  return counts;
}

void check_structure(std::span<const StreamMeta> meta, std::size_t n_tokens) {
  // Each token's group is a run of forks closed by its rank-0 original.
  std::size_t expected_origin = 0;
  for (std::size_t r = 0; r < meta.size(); ++r) {
    const StreamMeta& m = meta[r];
    if (!(m.log_cum <= 0.0)) throw Error(ErrorKind::kInvariant, "log_cum above zero at row " + std::to_string(r));
    if (m.origin != expected_origin)
      throw Error(ErrorKind::kInvariant, "token groups out of order at row " + std::to_string(r));
    if (m.fork_rank == 0) ++expected_origin;
  }
  if (expected_origin != n_tokens)
    throw Error(ErrorKind::kInvariant, "originals not conserved: saw " + std::to_string(expected_origin) + " of " +
                                           std::to_string(n_tokens));
}

}  // namespace tbub
