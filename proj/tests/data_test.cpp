#include "tbub/data.h"

#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "tbub/error.h"

namespace tbub {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("tbub_data_test_" + std::to_string(::getpid()) + "_" + name);
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

TEST(Tokenize, TwoBytesGetBos) {
  ByteTokenizer tok;
  EXPECT_EQ(tokenize_documents("ab", tok), (std::vector<TokenId>{kBos, 97, 98}));
}

TEST(Tokenize, DocumentsSplitOnDelimiterKeepingIt) {
  ByteTokenizer tok;
  EXPECT_EQ(tokenize_documents("a\n\nb", tok), (std::vector<TokenId>{kBos, 'a', '\n', '\n', kBos, 'b'}));
  EXPECT_EQ(tokenize_documents("a|b|", tok, "|"), (std::vector<TokenId>{kBos, 'a', '|', kBos, 'b', '|'}));
  EXPECT_TRUE(tokenize_documents("", tok).empty());
}

TEST(Tokenize, HighBytesAreUnsigned) {
  ByteTokenizer tok;
  EXPECT_EQ(tok.encode("\xff\x80"), (std::vector<TokenId>{255, 128}));
}

TEST(Ingest, EmptyFileGivesHeaderOnlyStore) {
  const auto in = temp_path("empty.txt"), out = temp_path("empty.tbtk");
  write_file(in, "");
  EXPECT_EQ(ingest(in, out).count(), 0u);
  EXPECT_EQ(fs::file_size(out), 4u + 4 + 4 + 8);
  EXPECT_EQ(read_token_store(out).count(), 0u);
  fs::remove(in);
  fs::remove(out);
}

TEST(Ingest, RoundTripsOneKibibyteExactly) {
  std::mt19937_64 rng(1);
  std::string text(1024, '\0');
  for (char& c : text) c = static_cast<char>(std::uniform_int_distribution<int>(0, 255)(rng));
  text.replace(100, 2, "\n\n");
  const auto in = temp_path("kib.txt"), out = temp_path("kib.tbtk");
  write_file(in, text);
  const TokenStore a = ingest(in, out);
  const TokenStore b = read_token_store(out);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(ByteTokenizer().decode(b.ids), text);
  // Idempotent: a second ingest writes identical bytes.
  const auto out2 = temp_path("kib2.tbtk");
  ingest(in, out2);
  std::ifstream f1(out, std::ios::binary), f2(out2, std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(f1), {}), std::string(std::istreambuf_iterator<char>(f2), {}));
  for (const auto& p : {in, out, out2}) fs::remove(p);
}

TEST(Ingest, UnreadableInputIsIoError) {
  try {
    ingest("/nonexistent/corpus.txt", temp_path("x.tbtk"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
}

TEST(TokenStoreFormat, RejectsCorruption) {
  const auto p = temp_path("bad.tbtk");
  TokenStore s;
  s.ids = {1, 2, 3};
  write_token_store(p, s);
  {
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("XBTK", 4);
  }
  EXPECT_THROW(read_token_store(p), Error);
  write_token_store(p, s);
  fs::resize_file(p, fs::file_size(p) - 2);
  EXPECT_THROW(read_token_store(p), Error);
  s.ids = {300};
  write_token_store(p, s);
  EXPECT_THROW(read_token_store(p), Error);
  fs::remove(p);
}

TEST(SampleBatch, TargetsAreSuccessors) {
  TokenStore s;
  for (TokenId i = 0; i < 200; ++i) s.ids.push_back(i % 250);
  std::mt19937_64 rng(3);
  Batch b = sample_batch(s, 6, 16, rng);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t i = 0; i < 16; ++i) {
      EXPECT_EQ(b.inputs[r][i], s.ids[b.offsets[r] + i]);
      EXPECT_EQ(b.targets[r][i], s.ids[b.offsets[r] + i + 1]);
    }
}

TEST(SampleBatch, MinimalStoreHasOneOffset) {
  TokenStore s;
  s.ids = {1, 2, 3, 4, 5};
  std::mt19937_64 rng(4);
  Batch b = sample_batch(s, 20, 4, rng);
  for (std::size_t o : b.offsets) EXPECT_EQ(o, 0u);
  s.ids.pop_back();
  EXPECT_THROW(sample_batch(s, 1, 4, rng), Error);
}

TEST(SampleBatch, SeedDeterminesSequence) {
  TokenStore s;
  s.ids.assign(1000, 7);
  std::mt19937_64 a(9), b(9);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(sample_batch(s, 4, 8, a).offsets, sample_batch(s, 4, 8, b).offsets);
}

TEST(SampleBatch, OffsetsUniformByChiSquare) {
  TokenStore s;
  s.ids.assign(60, 1);
  const std::size_t L = 9, bins = 60 - L;  // offsets 0..50
  std::vector<double> hist(bins, 0.0);
  std::mt19937_64 rng(5);
  const std::size_t draws = 100000;
  for (std::size_t i = 0; i < draws / 100; ++i)
    for (std::size_t o : sample_batch(s, 100, L, rng).offsets) hist.at(o) += 1.0;
  const double expected = static_cast<double>(draws) / static_cast<double>(bins);
  double chi2 = 0.0;
  for (double h : hist) chi2 += (h - expected) * (h - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(bins - 1));
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.001);
}

TEST(LookupTask, SinglePair) {
  std::mt19937_64 rng(6);
  LookupExample ex = gen_lookup_task(1, rng);
  EXPECT_EQ(ex.text.size(), 2u + 1 + 2 + 1 + 2 + 1 + 2);
  EXPECT_EQ(ex.text.substr(3, 2), ex.answer);
  EXPECT_EQ(ex.text.substr(ex.answer_begin, ex.answer_end - ex.answer_begin), ex.answer);
  EXPECT_EQ(ex.text[ex.query_begin], '?');
}

TEST(LookupTask, QueriedKeyAppearsEarlierAndOracleIsPerfect) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 500; ++i) {
    LookupExample ex = gen_lookup_task(1 + i % 8, rng);
    const std::string key = ex.text.substr(ex.query_begin + 1, ex.query_end - ex.query_begin - 2);
    EXPECT_LT(ex.text.find(key + ":"), ex.query_begin);
    EXPECT_EQ(lookup_oracle(ex.text.substr(0, ex.answer_begin)), ex.answer);
  }
  EXPECT_THROW(gen_lookup_task(0, rng), Error);
}

}  // namespace
}  // namespace tbub
