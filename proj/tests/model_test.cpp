#include "tbub/model.h"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "fd_oracle.h"
#include "tbub/error.h"
#include "tbub/oracles.h"

namespace tbub {
namespace {

using testing::random_matrix;

ModelConfig toy(Variant v = Variant::kOurs) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.block_size = 4;
  c.budget = v == Variant::kOurs ? 8 : 4;
  c.fork_layers = {1};
  c.variant = v;
  c.vocab_size = 11;
  c.seed = 3;
  if (v != Variant::kOurs) c.fork_layers = {};
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> u(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> t(n);
  for (auto& x : t) x = u(rng);
  return t;
}

// Perturbs every parameter so LN gains, biases and fork scores are generic.
void jitter(Model& m, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& t : m.params().tensors)
    for (double& v : t.value.data) v += nd(rng);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  EXPECT_TRUE(a.same_shape(b));
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data[i] - b.data[i]));
  return d;
}

TEST(ModelConfig, ValidatesVariantBudgets) {
  ModelConfig c = toy();
  EXPECT_NO_THROW(c.validate());
  c.budget = 3;
  EXPECT_THROW(c.validate(), Error);
  c = toy(Variant::kBaseline);
  c.budget = 5;
  EXPECT_THROW(c.validate(), Error);
  c = toy(Variant::kCopyK);
  c.copy_k = 3;
  c.budget = 12;
  EXPECT_NO_THROW(c.validate());
  c.budget = 8;
  EXPECT_THROW(c.validate(), Error);
  c = toy();
  c.fork_layers = {0};
  EXPECT_THROW(c.validate(), Error);
  c.fork_layers = {3};
  EXPECT_THROW(c.validate(), Error);
  c.fork_layers = {2};
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = toy();
  c.rope_base = 500.0;
  const ModelConfig back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(ModelConfig, DefaultIsScaledToyAnalog) {
  ModelConfig c;
  EXPECT_EQ(c.n_layers, 6u);
  EXPECT_EQ(c.fork_layers, (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(c.budget, 2 * c.block_size);
  EXPECT_EQ(c.vocab_size, 259u);
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelInit, DecayFlagsAndForkBias) {
  Model m(toy());
  const auto& p = m.params();
  EXPECT_TRUE(p.tensors[p.index("wte")].decay);
  EXPECT_TRUE(p.tensors[p.index("h0.attn.w_qkv")].decay);
  EXPECT_FALSE(p.tensors[p.index("h0.attn.b_qkv")].decay);
  EXPECT_FALSE(p.tensors[p.index("h1.ln2.gain")].decay);
  EXPECT_TRUE(p.tensors[p.index("fork1.weight")].decay);
  EXPECT_FALSE(p.tensors[p.index("fork1.embedding")].decay);
  EXPECT_EQ(p.tensors[p.index("fork1.bias")].value, Matrix::from_rows(1, 2, {-2.0, 2.0}));
}

TEST(ModelInit, RejectsMismatchedParameters) {
  Model m(toy());
  ParamStore p = m.params();
  p.tensors[1].value = Matrix(1, 3);
  EXPECT_THROW(Model(toy(), p), Error);
}

TEST(Forward, RejectsOverLengthAndBadIds) {
  Model m(toy());
  std::vector<TokenId> too_long(5, 1);
  try {
    forward(m, too_long);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kArgument);
  }
  std::vector<TokenId> bad = {1, 11};
  EXPECT_THROW(forward(m, bad), Error);
}

TEST(Forward, BitIdenticalAcrossRuns) {
  Model a(toy()), b(toy());
  std::vector<TokenId> t = {1, 5, 9, 2};
  EXPECT_EQ(forward(a, t).log_probs.value(), forward(b, t).log_probs.value());
  EXPECT_EQ(forward(a, t).log_probs.value(), forward(a, t).log_probs.value());
}

TEST(Forward, DistributionsSumToOne) {
  ModelConfig c = toy();
  c.n_layers = 3;
  c.fork_layers = {1, 2};
  Model m(c);
  jitter(m, 17);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_tokens(1 + trial % 4, c.vocab_size, rng);
    Matrix lp = forward(m, t).log_probs.value();
    for (std::size_t r = 0; r < lp.rows; ++r) {
      double s = 0.0;
      for (double v : lp.row(r)) s += std::exp(v);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Forward, OursWithoutForkLayersEqualsBaseline) {
  ModelConfig ours = toy();
  ours.fork_layers = {};
  Model m(ours);
  jitter(m, 21);
  Model base(toy(Variant::kBaseline), m.params());
  std::vector<TokenId> t = {3, 1, 4, 1};
  EXPECT_LT(max_abs_diff(forward(m, t).log_probs.value(), forward(base, t).log_probs.value()), 1e-9);
}

TEST(Forward, CopyOneEqualsBaseline) {
  Model base(toy(Variant::kBaseline));
  jitter(base, 22);
  ModelConfig c = toy(Variant::kCopyK);
  c.copy_k = 1;
  Model copy(c, base.params());
  std::vector<TokenId> t = {7, 0, 10, 2};
  EXPECT_EQ(forward(copy, t).log_probs.value(), forward(base, t).log_probs.value());
}

// With kappa = L only forced keeps survive; the result must equal a plain
// stack whose attenuation is the running sum of keep log-scores.
TEST(Forward, PinnedForksReduceToKeepAttenuatedStack) {
  ModelConfig c = toy();
  c.n_layers = 3;
  c.fork_layers = {1, 2};
  c.budget = c.block_size;
  Model m(c);
  jitter(m, 23);
  for (const auto& f : m.layout().forks) m.params().tensors[f.bias].value(0, 0) = -50.0;
  std::vector<TokenId> t = {2, 8, 8, 5};
  const std::size_t n = t.size();
  ForwardPass got = forward(m, t);
  for (const auto& lt : got.trace.fork_layers) {
    EXPECT_EQ(std::accumulate(lt.selection.fork.begin(), lt.selection.fork.end(), 0), 0);
    EXPECT_EQ(lt.meta_after.size(), n);
  }

  const ParamStore& ps = m.params();
  auto value = [&](std::size_t idx) { return ps.tensors[idx].value; };
  Tape tape;
  Matrix wte = value(m.layout().wte);
  Matrix x(n, c.d_model);
  for (std::size_t i = 0; i < n; ++i) std::copy(wte.row(t[i]).begin(), wte.row(t[i]).end(), x.row(i).begin());
  Matrix log_cum(n, 1);
  const std::vector<double> pos = {0, 1, 2, 3};
  std::size_t next = 0;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    if (next < m.layout().forks.size() && m.layout().forks[next].layer == l) {
      const auto& f = m.layout().forks[next++];
      const Matrix w = value(f.weight), b = value(f.bias);
      for (std::size_t i = 0; i < n; ++i) {
        double z = b(0, 1);
        for (std::size_t k = 0; k < c.d_model; ++k) z += x(i, k) * w(k, 1);
        log_cum.data[i] += z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
      }
    }
    const auto& bl = m.layout().blocks[l];
    auto k = [&](std::size_t idx) { return tape.constant(value(idx)); };
    BlockParams bp{k(bl.ln1_gain), k(bl.ln1_bias), k(bl.w_qkv), k(bl.b_qkv), k(bl.w_out),  k(bl.b_out),
                   k(bl.ln2_gain), k(bl.ln2_bias), k(bl.w_fc),  k(bl.b_fc),  k(bl.w_proj), k(bl.b_proj)};
    x = block_forward(tape.constant(x), tape.constant(log_cum), pos, bp, {c.n_heads, c.rope_base, nullptr}).value();
  }
  Var h = layernorm(tape.constant(x), tape.constant(value(m.layout().lnf_gain)),
                    tape.constant(value(m.layout().lnf_bias)));
  Matrix want = log_softmax_rows(matmul_nt(h, tape.constant(wte))).value();
  EXPECT_LT(max_abs_diff(got.log_probs.value(), want), 1e-12);
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(got.trace.final_meta[i].log_cum, log_cum.data[i], 1e-12);
}

TEST(Forward, ForkingActuallyForksWithRoomInBudget) {
  Model m(toy());
  std::vector<TokenId> t = {1, 2, 3, 4};
  ForwardOptions o;
  o.record_events = true;
  ForwardPass p = forward(m, t, o);
  ASSERT_EQ(p.trace.fork_layers.size(), 1u);
  EXPECT_EQ(p.trace.fork_layers[0].meta_after.size(), 8u);
  EXPECT_EQ(p.trace.stream_updates, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(p.trace.fork_layers[0].events.size(), 8u);
  EXPECT_TRUE(structural_violations(p.trace, t.size()).empty());
}

TEST(Forward, StructuralInvariantsUnderFuzzing) {
  ModelConfig c = toy();
  c.n_layers = 4;
  c.block_size = 6;
  c.budget = 13;
  c.fork_layers = {1, 2, 4};
  std::mt19937_64 rng(31);
  std::size_t violations = 0;
  for (int trial = 0; trial < 200; ++trial) {
    c.seed = trial;
    Model m(c);
    jitter(m, 1000 + trial, 1.0);
    auto t = random_tokens(1 + trial % c.block_size, c.vocab_size, rng);
    violations += structural_violations(forward(m, t).trace, t.size()).size();
  }
  EXPECT_EQ(violations, 0u);
}

TEST(StructuralViolations, DetectsTamperedTrace) {
  Model m(toy());
  std::vector<TokenId> t = {1, 2, 3, 4};
  ForwardTrace tr = forward(m, t).trace;
  tr.fork_layers[0].meta_after[0].log_cum = 0.5;
  EXPECT_FALSE(structural_violations(tr, 4).empty());
  tr = forward(m, t).trace;
  std::swap(tr.fork_layers[0].meta_after[0], tr.fork_layers[0].meta_after[1]);
  EXPECT_FALSE(structural_violations(tr, 4).empty());
  tr = forward(m, t).trace;
  tr.budget = 5;
  EXPECT_FALSE(structural_violations(tr, 4).empty());
}

TEST(OutputAverage, SingleStreamIsPlainLogSoftmax) {
  std::mt19937_64 rng(40);
  Tape tape;
  Var lp = log_softmax_rows(tape.constant(random_matrix(3, 5, rng)));
  std::vector<StreamMeta> meta = {{0, 0, -0.4}, {1, 0, -1.2}, {2, 0, 0.0}};
  Var out = output_average(lp, tape.constant(Matrix::from_rows(3, 1, {-0.4, -1.2, 0.0})), meta, 3);
  EXPECT_LT(max_abs_diff(out.value(), lp.value()), 1e-15);
}

TEST(OutputAverage, IdenticalStreamsAreIdempotent) {
  std::mt19937_64 rng(41);
  Tape tape;
  Matrix row = log_softmax_rows(tape.constant(random_matrix(1, 6, rng))).value();
  Matrix two(2, 6);
  std::copy(row.data.begin(), row.data.end(), two.row(0).begin());
  std::copy(row.data.begin(), row.data.end(), two.row(1).begin());
  std::vector<StreamMeta> meta = {{0, 1, -0.7}, {0, 0, -0.7}};
  Var out = output_average(tape.constant(two), tape.constant(Matrix::from_rows(2, 1, {-0.7, -0.7})), meta, 1);
  EXPECT_LT(max_abs_diff(out.value(), row), 1e-15);
}

TEST(OutputAverage, QuarterMixMatchesProbabilitySpaceOracle) {
  std::mt19937_64 rng(42);
  Tape tape;
  Matrix lp = log_softmax_rows(tape.constant(random_matrix(2, 7, rng, 2.0))).value();
  const std::vector<double> lc = {std::log(0.75), std::log(0.25)};
  std::vector<StreamMeta> meta = {{0, 1, lc[0]}, {0, 0, lc[1]}};
  Var out = output_average(tape.constant(lp), tape.constant(Matrix::from_rows(2, 1, lc)), meta, 1);
  const auto want = oracle::mixture({{lp.row(0).begin(), lp.row(0).end()}, {lp.row(1).begin(), lp.row(1).end()}}, lc);
  for (std::size_t v = 0; v < 7; ++v) EXPECT_NEAR(out.value()(0, v), want[v], 1e-12);
}

TEST(OutputAverage, RandomThreeStreamCases) {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(-8.0, -0.01);
  double worst = 0.0, worst_sum = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    Tape tape;
    Matrix lp = log_softmax_rows(tape.constant(random_matrix(3, 9, rng, 3.0))).value();
    std::vector<double> lc = {u(rng), u(rng), u(rng)};
    std::vector<StreamMeta> meta = {{0, 2, lc[0]}, {0, 1, lc[1]}, {0, 0, lc[2]}};
    Var out = output_average(tape.constant(lp), tape.constant(Matrix::from_rows(3, 1, lc)), meta, 1);
    std::vector<std::vector<double>> rows;
    for (std::size_t r = 0; r < 3; ++r) rows.emplace_back(lp.row(r).begin(), lp.row(r).end());
    const auto want = oracle::mixture(rows, lc);
    double s = 0.0;
    for (std::size_t v = 0; v < 9; ++v) {
      worst = std::max(worst, std::abs(out.value()(0, v) - want[v]));
      s += std::exp(out.value()(0, v));
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  EXPECT_LT(worst, 1e-12);
  EXPECT_LT(worst_sum, 1e-9);
}

TEST(CopyK, ExpandedSizes) {
  EXPECT_EQ(build_copy_k(512, 3).meta.size(), 1536u);
  EXPECT_EQ(build_copy_k(512, 5).meta.size(), 2560u);
  const CopyExpansion e = build_copy_k(2, 3);
  EXPECT_EQ(e.source, (std::vector<std::size_t>{0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(e.decode_rows, (std::vector<std::size_t>{2, 5}));
  EXPECT_EQ(fork_positions(e.meta), (std::vector<double>{-1.0, -0.5, 0.0, 0.0, 0.5, 1.0}));
  EXPECT_THROW(build_copy_k(3, 0), Error);
}

TEST(CopyK, ComputationMatchesSaturatedForking) {
  ModelConfig ours = toy();
  ours.n_layers = 4;
  ours.fork_layers = {1};
  Model m(ours);
  ModelConfig cc = toy(Variant::kCopyK);
  cc.n_layers = 4;
  cc.copy_k = 2;
  cc.budget = 8;
  Model copy(cc);
  std::vector<TokenId> t = {1, 2, 3, 4};
  const auto a = forward(m, t).trace.stream_updates;
  const auto b = forward(copy, t).trace.stream_updates;
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t l = 1; l < a.size(); ++l) EXPECT_EQ(a[l], b[l]);
  EXPECT_LE(std::accumulate(a.begin(), a.end(), std::size_t{0}), std::accumulate(b.begin(), b.end(), std::size_t{0}));
}

TEST(LmLoss, UniformGivesLogVocab) {
  Tape tape;
  Var lp = tape.constant(Matrix(3, 11, -std::log(11.0)));
  std::vector<TokenId> tg = {0, 4, 10};
  EXPECT_NEAR(lm_loss(lp, tg).scalar(), std::log(11.0), 1e-14);
}

TEST(LmLoss, OneHotCorrectGivesZero) {
  Tape tape;
  Matrix m(2, 3, -1e300);
  m(0, 2) = 0.0;
  m(1, 0) = 0.0;
  std::vector<TokenId> tg = {2, 0};
  EXPECT_EQ(lm_loss(tape.constant(m), tg).scalar(), 0.0);
}

TEST(LmLoss, MatchesPerPositionSum) {
  std::mt19937_64 rng(44);
  Tape tape;
  Matrix lp = log_softmax_rows(tape.constant(random_matrix(6, 13, rng))).value();
  std::vector<TokenId> tg = random_tokens(6, 13, rng);
  long double s = 0.0L;
  for (std::size_t i = 0; i < 6; ++i) s -= lp(i, tg[i]);
  const double want = static_cast<double>(s / 6.0L);
  EXPECT_LT(std::abs(lm_loss(tape.constant(lp), tg).scalar() - want) / std::abs(want), 1e-12);
}

TEST(GradientCheck, ToyConfigAllGroups) {
  Model m(toy());
  jitter(m, 50);
  std::vector<TokenId> t = {1, 7, 3, 9}, tg = {7, 3, 9, 2};
  const GradCheckReport r = gradient_check(m, t, tg);
  EXPECT_EQ(r.groups.size(), m.params().tensors.size());
  for (const auto& g : r.groups) EXPECT_LT(g.rel_err, 1e-4) << g.name;
  const auto& fw = r.groups[m.params().index("fork1.weight")];
  EXPECT_GT(fw.grad_norm, 0.0);
}

TEST(GradientCheck, SixLayerTwoForkLayersWithCompetition) {
  ModelConfig c = toy();
  c.n_layers = 6;
  c.fork_layers = {2, 4};
  Model m(c);
  jitter(m, 51);
  std::vector<TokenId> t = {4, 4, 0, 10}, tg = {4, 0, 10, 6};
  const GradCheckReport r = gradient_check(m, t, tg);
  EXPECT_LT(r.max_rel_err, 1e-4);
  for (const auto& g : r.groups) EXPECT_GT(g.checked, 0u) << g.name;
}

}  // namespace
}  // namespace tbub
