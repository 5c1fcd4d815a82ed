#include "tbub/analysis.h"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "tbub/error.h"

using namespace tbub;

namespace {

ModelConfig small_ours(std::size_t L = 12, std::size_t kappa = 24) {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 8;
  c.block_size = L;
  c.budget = kappa;
  c.fork_layers = {1, 2};
  c.vocab_size = 11;
  c.seed = 5;
  return c;
}

void jitter(Model& m, std::uint64_t seed, double scale = 0.4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& t : m.params().tensors)
    for (double& v : t.value.data) v += nd(rng);
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

TraceData trace_of(const Model& m, const std::vector<TokenId>& toks, bool attention) {
  std::stringstream ss;
  TraceOptions o;
  o.attention = attention;
  o.max_attention_seqs = 100;
  write_trace(m, toks, o, ss);
  return read_trace(ss);
}

}  // namespace

TEST(Trace, RoundTripMatchesForwardPass) {
  Model m(small_ours());
  jitter(m, 1);
  const auto toks = random_tokens(30, 11, 2);  // windows of 12, 12, 6
  const TraceData d = trace_of(m, toks, true);

  EXPECT_EQ(model_config_from_json(d.header.at("model")).fork_layers, m.config().fork_layers);
  EXPECT_EQ(d.header.at("n_tokens").get<std::size_t>(), 30u);
  ASSERT_EQ(d.tokens.size(), 30u);

  std::size_t expected_events = 0;
  const BudgetPolicy policy = BudgetPolicy::for_model(m.config(), BudgetMode::kDynamic);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t start = 12 * s, n = std::min<std::size_t>(12, 30 - start);
    std::vector<TokenId> w(toks.begin() + start, toks.begin() + start + n);
    ForwardOptions fo;
    fo.budget = policy.budget_for(n);
    fo.record_events = true;
    ForwardPass p = forward(m, w, fo);
    for (const auto& fl : p.trace.fork_layers) expected_events += fl.events.size();
    const Matrix& lp = p.log_probs.value();
    for (std::size_t i = 0; i < n; ++i) {
      const TokenRecord& r = d.tokens[start + i];
      EXPECT_EQ(r.seq, s);
      EXPECT_EQ(r.token_index, i);
      EXPECT_EQ(r.token, w[i]);
      EXPECT_EQ(r.final_forks, p.trace.fork_layers.back().forks[i]);
      double h = 0.0;
      for (std::size_t v = 0; v < lp.cols; ++v) h -= std::exp(lp(i, v)) * lp(i, v);
      EXPECT_NEAR(r.entropy, h, 1e-12);
    }
  }
  EXPECT_EQ(d.forks.size(), expected_events);
  // One record per (window, block, head).
  EXPECT_EQ(d.attention.size(), 3u * 3u * 2u);
  for (const AttentionRecord& a : d.attention)
    for (std::size_t q = 0; q < a.rows.size(); ++q) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.rows.size(); ++k) s += a.probs(q, k);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Trace, WritingIsDeterministic) {
  Model m(small_ours());
  jitter(m, 4);
  const auto toks = random_tokens(40, 11, 9);
  std::stringstream a, b;
  TraceOptions o;
  o.attention = true;
  write_trace(m, toks, o, a);
  write_trace(m, toks, o, b);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Trace, MalformedInputNamesTheLine) {
  std::stringstream ok("{\"type\":\"header\"}\n{\"type\":\"token\",\"seq\":0}\n");
  try {
    read_trace(ok);
    FAIL() << "expected a format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::stringstream no_header("{\"type\":\"token\",\"seq\":0,\"token_index\":0,\"token\":1,\"entropy\":0.5,\"final_forks\":0}\n");
  EXPECT_THROW(read_trace(no_header), Error);
  std::stringstream junk("{\"type\":\"header\"}\nnot json\n");
  EXPECT_THROW(read_trace(junk), Error);
}

TEST(EntropyCurve, RejectsSmallCorpora) {
  std::vector<TokenRecord> recs(kMinEntropyTokens - 1);
  try {
    entropy_fork_curve(recs);
    FAIL() << "expected an argument error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kArgument);
  }
}

TEST(EntropyCurve, WindowsAndBucketsMatchDirectComputation) {
  // 2600 sequences x 4 tokens; entropy ramps with the sequence index and
  // forks are a deterministic function of it.
  std::vector<TokenRecord> recs;
  for (std::size_t s = 0; s < 2600; ++s)
    for (std::size_t i = 0; i < 4; ++i)
      recs.push_back({s, i, 1, static_cast<double>(s % 100) / 10.0 + 0.01 * static_cast<double>(i), (s % 7) + i});
  const EntropyCurve c = entropy_fork_curve(recs, 4, 20, 30);
  ASSERT_EQ(c.windows.size(), 2600u);
  // Window s: mean entropy = s%100/10 + 0.015, mean forks = s%7 + 1.5, max = 7.5.
  EXPECT_DOUBLE_EQ(c.max_window_forks, 7.5);
  for (std::size_t s = 0; s < 2600; ++s) {
    EXPECT_NEAR(c.windows[s].entropy, static_cast<double>(s % 100) / 10.0 + 0.015, 1e-12);
    EXPECT_NEAR(c.windows[s].norm_forks, (static_cast<double>(s % 7) + 1.5) / 7.5, 1e-12);
  }
  // Range [0.015, 9.915] in 20 buckets of 0.495: entropy values k/10 fall
  // into bucket floor(k/4.95). Each k appears 26 times, so a bucket with
  // 5 values has 130 windows and one with 4 has 104; all clear 30.
  ASSERT_EQ(c.buckets.size(), 20u);
  std::size_t total = 0;
  for (std::size_t b = 0; b < 20; ++b) {
    std::size_t n = 0;
    double e = 0.0, f = 0.0;
    for (std::size_t s = 0; s < 2600; ++s) {
      const double h = static_cast<double>(s % 100) / 10.0 + 0.015;
      std::size_t idx = std::min<std::size_t>(19, static_cast<std::size_t>((h - 0.015) / ((9.915 - 0.015) / 20.0)));
      if (idx != b) continue;
      ++n;
      e += h;
      f += (static_cast<double>(s % 7) + 1.5) / 7.5;
    }
    EXPECT_EQ(c.buckets[b].windows, n) << b;
    EXPECT_NEAR(c.buckets[b].mean_entropy, e / static_cast<double>(n), 1e-12);
    EXPECT_NEAR(c.buckets[b].mean_norm_forks, f / static_cast<double>(n), 1e-12);
    total += n;
  }
  EXPECT_EQ(total, 2600u);
}

TEST(EntropyCurve, SparseBucketsDropAndZeroRangeCollapses) {
  std::vector<TokenRecord> recs;
  for (std::size_t s = 0; s < 2500; ++s)
    for (std::size_t i = 0; i < 4; ++i) recs.push_back({s, i, 1, 1.0, s % 3});
  // One outlier window far to the right: its bucket has a single window.
  for (std::size_t i = 0; i < 4; ++i) recs.push_back({9999, i, 1, 50.0, 0});
  EntropyCurve c = entropy_fork_curve(recs);
  ASSERT_EQ(c.buckets.size(), 1u);
  EXPECT_EQ(c.buckets[0].windows, 2500u);
  EXPECT_DOUBLE_EQ(c.buckets[0].mean_entropy, 1.0);

  recs.resize(10000);
  c = entropy_fork_curve(recs);
  ASSERT_EQ(c.buckets.size(), 1u);
  EXPECT_EQ(c.buckets[0].windows, 2500u);

  // A trailing partial window inside a sequence is dropped.
  recs.push_back({0, 4, 1, 1.0, 0});
  recs.push_back({0, 5, 1, 1.0, 0});
  EXPECT_EQ(entropy_fork_curve(recs).windows.size(), 2500u);

  // No forks anywhere: normalized forks are zero, not NaN.
  for (auto& r : recs) r.final_forks = 0;
  c = entropy_fork_curve(recs);
  EXPECT_EQ(c.max_window_forks, 0.0);
  EXPECT_EQ(c.buckets[0].mean_norm_forks, 0.0);
}

TEST(EntropyCurve, SurrogateEntropyReplacesOwn) {
  std::vector<TokenRecord> recs, alt;
  for (std::size_t s = 0; s < 2500; ++s)
    for (std::size_t i = 0; i < 4; ++i) {
      recs.push_back({s, i, 1, 0.0, 1});
      alt.push_back({s, i, 1, static_cast<double>(s % 2), 9});
    }
  const EntropyCurve c = entropy_fork_curve(recs, 4, 2, 30, &alt);
  ASSERT_EQ(c.buckets.size(), 2u);
  EXPECT_DOUBLE_EQ(c.buckets[0].mean_entropy, 0.0);
  EXPECT_DOUBLE_EQ(c.buckets[1].mean_entropy, 1.0);
  alt.pop_back();
  EXPECT_THROW(entropy_fork_curve(recs, 4, 2, 30, &alt), Error);
}

TEST(EntropyCurve, CsvAndSvgAreWellFormed) {
  std::vector<TokenRecord> recs;
  for (std::size_t s = 0; s < 2500; ++s)
    for (std::size_t i = 0; i < 4; ++i) recs.push_back({s, i, 1, static_cast<double>(s % 10), s % 4});
  const EntropyCurve c = entropy_fork_curve(recs);
  std::stringstream csv, svg;
  write_entropy_csv(csv, c);
  write_entropy_svg(svg, c);
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "bucket_lo,bucket_hi,windows,mean_entropy,mean_norm_forks");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, c.buckets.size());
  EXPECT_EQ(svg.str().rfind("<svg", 0), 0u);
  EXPECT_NE(svg.str().find("</svg>"), std::string::npos);
}

TEST(ParentChildAttention, MatchesIndependentRecomputationFromJson) {
  Model m(small_ours());
  jitter(m, 7);
  const auto toks = random_tokens(24, 11, 3);
  std::stringstream ss;
  TraceOptions o;
  o.attention = true;
  write_trace(m, toks, o, ss);
  const std::string text = ss.str();
  std::stringstream in(text);
  const TraceData d = read_trace(in);
  const AttentionReport rep = parent_child_attention(d.attention);
  ASSERT_TRUE(rep.any_forks);

  // Recompute from the raw JSON lines: within a token's group every stream
  // left of the original is one of its forks.
  std::map<std::string, std::pair<double, std::size_t>> acc;
  std::stringstream raw(text);
  std::string line;
  while (std::getline(raw, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] != "attention") continue;
    const auto& rows = j["rows"];
    const auto& probs = j["probs"];
    for (std::size_t q = 0; q < rows.size(); ++q) {
      const std::size_t qo = rows[q][0], qr = rows[q][1];
      for (std::size_t k = 0; k <= q; ++k) {
        const std::size_t ko = rows[k][0], kr = rows[k][1];
        const double p = probs[q][k];
        std::string cat;
        if (k == q) cat = qr == 0 ? "og_self" : "child_self";
        else if (ko != qo) cat = qr == 0 ? "og_other" : "child_other";
        else if (qr == 0) cat = "og_child";
        else if (kr > 0) cat = "child_child";
        else FAIL() << "the original must be the rightmost stream of its group";
        acc[cat].first += p;
        acc[cat].second += 1;
      }
      for (std::size_t k = q + 1; k < rows.size(); ++k)
        if (qr > 0 && rows[k][0] == qo && rows[k][1] == 0) acc["child_parent"].second += 1;
    }
  }
  for (const auto& name : kAttentionCategories) {
    const auto& c = rep.categories.at(name);
    EXPECT_EQ(c.pairs, acc[name].second) << name;
    const double mean = acc[name].second ? acc[name].first / static_cast<double>(acc[name].second) : 0.0;
    EXPECT_NEAR(c.mean, mean, 1e-12) << name;
  }
  EXPECT_GT(rep.categories.at("og_child").pairs, 0u);
  EXPECT_EQ(rep.categories.at("child_parent").mean, 0.0);
}

TEST(ParentChildAttention, NoForksGivesEmptyChildCategories) {
  ModelConfig c = small_ours();
  c.variant = Variant::kBaseline;
  c.fork_layers = {};
  c.budget = c.block_size;
  Model m(c);
  const TraceData d = trace_of(m, random_tokens(12, 11, 1), true);
  const AttentionReport rep = parent_child_attention(d.attention);
  EXPECT_FALSE(rep.any_forks);
  for (const char* name : {"og_child", "child_child", "child_self", "child_other", "child_parent"})
    EXPECT_EQ(rep.categories.at(name).pairs, 0u) << name;
  EXPECT_GT(rep.categories.at("og_self").pairs, 0u);
  std::stringstream csv;
  write_attention_csv(csv, rep);
  EXPECT_NE(csv.str().find("og_child,0,\n"), std::string::npos);
}

TEST(ForkLocationMap, PinnedNegativeAtTightBudgetIsAllZero) {
  ModelConfig c = small_ours(12, 12);
  Model m(c);
  for (const auto& f : m.layout().forks) m.params().tensors[f.bias].value(0, 0) = -50.0;
  const auto toks = random_tokens(12, 11, 2);
  const ForkLocationMap map = fork_location_map(m, toks);
  ASSERT_EQ(map.layers, c.fork_layers);
  for (const auto& row : map.counts)
    for (std::size_t v : row) EXPECT_EQ(v, 0u);
}

TEST(ForkLocationMap, RowSumsStayWithinSpareBudget) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t L = 4 + rng() % 10, kappa = L + rng() % (2 * L);
    Model m(small_ours(L, kappa));
    jitter(m, rng());
    const std::size_t n = 1 + rng() % L;
    const auto toks = random_tokens(n, 11, rng());
    const std::size_t budget = std::max(n, kappa * n / L);
    const ForkLocationMap map = fork_location_map(m, toks, budget);
    EXPECT_EQ(map.budget, budget);
    for (const auto& row : map.counts) {
      ASSERT_EQ(row.size(), n);
      std::size_t s = 0;
      for (std::size_t v : row) s += v;
      EXPECT_LE(s, budget - n);
    }
  }
}

TEST(ForkLocationMap, CsvAndHeatmap) {
  Model m(small_ours());
  jitter(m, 2);
  const auto toks = random_tokens(12, 11, 5);
  const ForkLocationMap map = fork_location_map(m, toks);
  std::stringstream csv, svg;
  write_forkmap_csv(csv, map);
  write_forkmap_svg(svg, map, toks);
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("layer,t0,t1", 0), 0u);
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("1,", 0), 0u);
  EXPECT_NE(svg.str().find("layer 2"), std::string::npos);
  // token_mean averages the layers.
  for (std::size_t t = 0; t < 12; ++t)
    EXPECT_DOUBLE_EQ(map.token_mean(t), (map.counts[0][t] + map.counts[1][t]) / 2.0);
}

TEST(LookupForkReport, PartitionsEveryToken) {
  ModelConfig c = small_ours(32, 64);
  c.vocab_size = kByteVocab;
  Model m(c);
  jitter(m, 3, 0.2);
  std::mt19937_64 rng(4);
  std::vector<LookupExample> ex;
  for (int i = 0; i < 5; ++i) ex.push_back(gen_lookup_task(3, rng));
  const SpanForkReport r = lookup_fork_report(m, ex);
  EXPECT_EQ(r.examples, 5u);
  std::size_t q = 0, total = 0;
  for (const auto& e : ex) {
    const std::size_t n = std::min<std::size_t>(e.text.size(), 31);
    total += n;
    for (std::size_t p = 0; p < n; ++p)
      q += (p >= e.query_begin && p < e.query_end) || (p >= e.answer_begin && p < e.answer_end);
  }
  EXPECT_EQ(r.query_tokens, q);
  EXPECT_EQ(r.query_tokens + r.filler_tokens, total);
  EXPECT_GE(r.query_mean, 0.0);
  EXPECT_GE(r.filler_mean, 0.0);
}

namespace {

TrainJob tiny_job(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string text;
  for (int i = 0; i < 60; ++i) text += "the cat sat on the mat. ";
  const auto data = dir / "train.tbtk";
  std::ofstream(dir / "train.txt") << text;
  ingest(dir / "train.txt", data);
  TrainJob job;
  job.model = small_ours(8, 16);
  job.model.n_layers = 4;
  job.model.fork_layers = {1};
  job.model.vocab_size = kByteVocab;
  job.train.total_steps = 6;
  job.train.eval_interval = 3;
  job.train.eval_batches = 1;
  job.train.batch_size = 2;
  job.train.max_lr = 1e-2;
  job.train.log_timing = false;
  job.train_data = data;
  job.out_dir = dir / "runs";
  return job;
}

}  // namespace

TEST(Overfork, IdenticalArmsGiveIdenticalResults) {
  const auto dir = std::filesystem::temp_directory_path() / "tbub_overfork_same";
  std::filesystem::remove_all(dir);
  const TrainJob job = tiny_job(dir);
  const OverforkReport r = overfork_ablation(job, {1, 2}, {1, 2});
  ASSERT_EQ(r.arms.size(), 2u);
  EXPECT_EQ(r.arms[0].val_loss, r.arms[1].val_loss);
  EXPECT_EQ(r.arms[0].fork_utilization, r.arms[1].fork_utilization);
  std::ifstream a(dir / "runs" / "early" / "metrics.csv"), b(dir / "runs" / "extended" / "metrics.csv");
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_FALSE(sa.str().empty());
  EXPECT_EQ(sa.str(), sb.str());
  std::filesystem::remove_all(dir);
}

TEST(Overfork, ArmsDifferOnlyInForkLayers) {
  const auto dir = std::filesystem::temp_directory_path() / "tbub_overfork_diff";
  std::filesystem::remove_all(dir);
  const TrainJob job = tiny_job(dir);
  const OverforkReport r = overfork_ablation(job, {1}, {1, 2, 3});
  ASSERT_EQ(r.arms.size(), 2u);
  EXPECT_EQ(r.arms[0].fork_utilization.size(), 1u);
  EXPECT_EQ(r.arms[1].fork_utilization.size(), 3u);
  for (const auto& a : r.arms) {
    EXPECT_TRUE(std::isfinite(a.val_loss));
    EXPECT_NEAR(a.val_perplexity, std::exp(a.val_loss), 1e-12 * a.val_perplexity);
    for (double u : a.fork_utilization) EXPECT_GE(u, 0.0);
  }
  std::stringstream csv;
  write_overfork_csv(csv, r);
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  EXPECT_EQ(line, "arm,fork_layer,val_loss,val_perplexity,mean_forks_per_token");
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4u);
  std::filesystem::remove_all(dir);
}

TEST(Overfork, RejectsNonForkingVariant) {
  TrainJob job;
  job.model.variant = Variant::kBaseline;
  EXPECT_THROW(overfork_ablation(job, {1}, {2}), Error);
}
