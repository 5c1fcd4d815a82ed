#include "tbub/forking.h"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd_oracle.h"
#include "tbub/error.h"
#include "tbub/oracles.h"

namespace tbub {
namespace {

using testing::random_matrix;

ResidualSet originals(Tape& t, const Matrix& x) {
  ResidualSet s;
  s.streams = t.constant(x);
  s.log_cum = t.constant(Matrix(x.rows, 1));
  s.n_tokens = x.rows;
  for (std::size_t i = 0; i < x.rows; ++i) s.meta.push_back({i, 0, 0.0});
  return s;
}

ForkParams zero_params(Tape& t, std::size_t d, double fork_bias, double keep_bias) {
  return {t.constant(Matrix(d, 2)), t.constant(Matrix::from_rows(1, 2, {fork_bias, keep_bias})),
          t.constant(Matrix(1, d, 0.25))};
}

TEST(ScoreStreams, FirstLayerHatEqualsRaw) {
  std::mt19937_64 rng(1);
  Tape t;
  ResidualSet s = originals(t, random_matrix(5, 4, rng));
  ForkParams p{t.constant(random_matrix(4, 2, rng)), t.constant(random_matrix(1, 2, rng)), t.constant(Matrix(1, 4))};
  ForkScores sc = score_streams(s, p);
  EXPECT_EQ(sc.log_fork_hat.value(), sc.log_fork.value());
  EXPECT_EQ(sc.log_keep_hat.value(), sc.log_keep.value());
  for (double v : sc.log_keep_forced) EXPECT_EQ(v, 0.0);
}

TEST(ScoreStreams, ZeroAffineGivesLogHalf) {
  Tape t;
  ResidualSet s = originals(t, Matrix(2, 3, 1.0));
  ForkScores sc = score_streams(s, zero_params(t, 3, 0.0, 0.0));
  for (double v : sc.log_fork.value().data) EXPECT_DOUBLE_EQ(v, std::log(0.5));
  for (double v : sc.log_keep.value().data) EXPECT_DOUBLE_EQ(v, std::log(0.5));
}

TEST(ScoreStreams, CumulativeScoreMultiplies) {
  Tape t;
  ResidualSet s;
  s.streams = t.constant(Matrix(2, 3));
  s.log_cum = t.constant(Matrix::from_rows(2, 1, {std::log(0.5), 0.0}));
  s.meta = {{0, 1, std::log(0.5)}, {0, 0, 0.0}};
  s.n_tokens = 1;
  ForkScores sc = score_streams(s, zero_params(t, 3, 0.0, 0.0));
  EXPECT_NEAR(sc.log_fork_hat.value().data[0], std::log(0.25), 1e-15);
  EXPECT_NEAR(sc.log_keep_forced[0], std::log(0.25), 1e-15);
  EXPECT_EQ(sc.log_keep_forced[1], 0.0);
}

TEST(SelectTopk, BudgetEqualToTokensKeepsOnlyOriginals) {
  std::mt19937_64 rng(2);
  Tape t;
  ResidualSet s = originals(t, random_matrix(6, 4, rng));
  ForkParams p{t.constant(random_matrix(4, 2, rng, 5.0)), t.constant(Matrix::from_rows(1, 2, {30.0, -30.0})),
               t.constant(Matrix(1, 4))};
  ForkScores sc = score_streams(s, p);
  SelectionSet sel = select_topk(sc, s.meta, 6, 6);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_TRUE(sel.keep[i]);
    EXPECT_FALSE(sel.fork[i]);
  }
}

TEST(SelectTopk, FullBudgetSelectsEverything) {
  const std::vector<double> fork = {-1.0, -2.0, -0.1};
  const std::vector<double> keep = {-3.0, -0.5, 0.0};
  const std::vector<std::size_t> rank = {2, 1, 0};
  SelectionSet sel = select_topk(fork, keep, rank, 6, 1);
  EXPECT_EQ(sel.count(), 6u);
}

TEST(SelectTopk, TieBreaksKeepBeforeForkThenLowerRow) {
  const std::vector<double> fork = {-1.0, -1.0, -5.0};
  const std::vector<double> keep = {-1.0, -1.0, 0.0};
  const std::vector<std::size_t> rank = {2, 1, 0};
  // Forced keep of row 2, then keep 0, keep 1, fork 0, fork 1 all at -1.
  SelectionSet sel = select_topk(fork, keep, rank, 2, 1);
  EXPECT_EQ(sel.keep, (std::vector<char>{1, 0, 1}));
  EXPECT_EQ(sel.fork, (std::vector<char>{0, 0, 0}));
  sel = select_topk(fork, keep, rank, 3, 1);
  EXPECT_EQ(sel.keep, (std::vector<char>{1, 1, 1}));
  EXPECT_EQ(sel.fork, (std::vector<char>{0, 0, 0}));
  sel = select_topk(fork, keep, rank, 4, 1);
  EXPECT_EQ(sel.fork, (std::vector<char>{1, 0, 0}));
}

TEST(SelectTopk, BudgetBelowTokensIsBudgetError) {
  const std::vector<double> v = {-1.0, -1.0};
  const std::vector<std::size_t> rank = {0, 0};
  try {
    select_topk(v, v, rank, 1, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kBudget);
  }
}

TEST(SelectTopk, MatchesBruteForceOracle) {
  const auto r = oracle::run_topk_suite(1000, 17);
  EXPECT_EQ(r.mismatches, 0u);
}

TEST(Assemble, NoForksLeavesStreamsAndDecaysScores) {
  std::mt19937_64 rng(3);
  Tape t;
  Matrix x = random_matrix(4, 3, rng);
  ResidualSet s = originals(t, x);
  ForkScores sc = score_streams(s, zero_params(t, 3, 0.0, 1.0));
  SelectionSet sel{{1, 1, 1, 1}, {0, 0, 0, 0}};
  ResidualSet out = assemble(s, sc, sel, t.constant(Matrix(1, 3, 9.0)));
  EXPECT_EQ(out.streams.value(), x);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_LT(out.meta[i].log_cum, s.meta[i].log_cum);
    EXPECT_EQ(out.meta[i].log_cum, out.log_cum.value().data[i]);
  }
}

TEST(Assemble, ForkIsPlacedLeftOfParentWithEmbedding) {
  Tape t;
  Matrix x = Matrix::from_rows(3, 2, {1, 2, 3, 4, 5, 6});
  ResidualSet s = originals(t, x);
  ForkScores sc = score_streams(s, zero_params(t, 2, 0.0, 0.0));
  SelectionSet sel{{1, 1, 1}, {0, 1, 0}};
  Matrix emb = Matrix::from_rows(1, 2, {0.5, -0.5});
  ResidualSet out = assemble(s, sc, sel, t.constant(emb));
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out.meta[1].origin, 1u);
  EXPECT_EQ(out.meta[1].fork_rank, 1u);
  EXPECT_EQ(out.meta[2].origin, 1u);
  EXPECT_EQ(out.meta[2].fork_rank, 0u);
  EXPECT_DOUBLE_EQ(out.streams.value()(1, 0), 3.5);
  EXPECT_DOUBLE_EQ(out.streams.value()(1, 1), 3.5);
  EXPECT_DOUBLE_EQ(out.streams.value()(2, 0), 3.0);
  EXPECT_DOUBLE_EQ(out.meta[1].log_cum, std::log(0.5));
  check_structure(out.meta, 3);
}

TEST(Assemble, DeletedForkDisappearsAndSurvivorOrderHolds) {
  // Three tokens; token 1 already carries two forks (rows 1, 2) before its
  // original (row 3). The keep of row 1 is not selected and token 2 forks.
  Tape t;
  Matrix x(5, 2);
  for (std::size_t r = 0; r < 5; ++r) x(r, 0) = static_cast<double>(r);
  ResidualSet s;
  s.streams = t.constant(x);
  s.log_cum = t.constant(Matrix::from_rows(5, 1, {0.0, -0.7, -0.4, 0.0, 0.0}));
  s.meta = {{0, 0, 0.0}, {1, 2, -0.7}, {1, 1, -0.4}, {1, 0, 0.0}, {2, 0, 0.0}};
  s.n_tokens = 3;
  ForkScores sc = score_streams(s, zero_params(t, 2, 0.0, 0.0));
  SelectionSet sel{{1, 0, 1, 1, 1}, {0, 0, 0, 0, 1}};
  std::vector<ForkEvent> events;
  ResidualSet out = assemble(s, sc, sel, t.constant(Matrix(1, 2)), 3, &events);
  ASSERT_EQ(out.size(), 5u);
  const std::vector<double> first_col = {0, 2, 3, 4, 4};
  for (std::size_t r = 0; r < 5; ++r) EXPECT_EQ(out.streams.value()(r, 0), first_col[r]);
  EXPECT_EQ(out.meta[1].fork_rank, 1u);
  EXPECT_EQ(out.meta[3].fork_rank, 1u);
  EXPECT_EQ(out.meta[3].origin, 2u);
  check_structure(out.meta, 3);
  std::size_t deletes = 0;
  for (const auto& e : events) {
    EXPECT_EQ(e.layer, 3u);
    if (e.action == ForkAction::kDelete) {
      ++deletes;
      EXPECT_EQ(e.token_index, 1u);
      EXPECT_EQ(e.fork_rank, 2u);
    }
  }
  EXPECT_EQ(deletes, 1u);
}

TEST(Assemble, DroppingAnOriginalIsAnInvariantViolation) {
  Tape t;
  ResidualSet s = originals(t, Matrix(2, 2));
  ForkScores sc = score_streams(s, zero_params(t, 2, 0.0, 0.0));
  SelectionSet sel{{1, 0}, {1, 0}};
  try {
    assemble(s, sc, sel, t.constant(Matrix(1, 2)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvariant);
  }
}

TEST(ForkStep, MatchesBruteForceOracle) {
  const auto r = oracle::run_fork_step_suite(1000, 23);
  EXPECT_EQ(r.mismatches, 0u);
  EXPECT_EQ(r.max_abs_err, 0.0);
}

// Repeated fork steps with random parameters: originals conserved, budget
// respected, scores only decay, groups stay ordered.
TEST(ForkStep, StructuralInvariantsOverRepeatedSteps) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t L = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t budget = std::uniform_int_distribution<std::size_t>(L, 3 * L)(rng);
    const std::size_t d = 4;
    Tape t;
    ResidualSet s = originals(t, random_matrix(L, d, rng));
    for (int layer = 0; layer < 4; ++layer) {
      ForkParams p{t.constant(random_matrix(d, 2, rng, 2.0)), t.constant(random_matrix(1, 2, rng)),
                   t.constant(random_matrix(1, d, rng, 0.1))};
      const std::size_t n_prev = s.size();
      std::vector<StreamMeta> before = s.meta;
      ForkStep step = fork_step(s, p, budget, static_cast<std::size_t>(layer));
      s = std::move(step.set);
      ASSERT_NO_THROW(check_structure(s.meta, L));
      EXPECT_LE(s.size(), budget);
      if (2 * n_prev >= budget) EXPECT_EQ(s.size(), budget);
      // Output rows follow [fork(r)], [keep(r)] for each input row r; no row gains score.
      std::size_t j = 0;
      for (std::size_t r = 0; r < n_prev; ++r) {
        if (step.selection.fork[r]) {
          EXPECT_EQ(s.meta[j].fork_rank, before[r].fork_rank + 1);
          EXPECT_LE(s.meta[j].log_cum, before[r].log_cum);
          ++j;
        }
        if (step.selection.keep[r]) {
          EXPECT_EQ(s.meta[j].fork_rank, before[r].fork_rank);
          EXPECT_LE(s.meta[j].log_cum, before[r].log_cum);
          ++j;
        }
      }
      EXPECT_EQ(j, s.size());
    }
  }
}

TEST(ForksPerToken, CountsNonOriginalStreams) {
  std::vector<StreamMeta> meta = {{0, 0, 0}, {1, 2, -1}, {1, 1, -1}, {1, 0, 0}};
  EXPECT_EQ(forks_per_token(meta, 2), (std::vector<std::size_t>{0, 2}));
}

}  // namespace
}  // namespace tbub
