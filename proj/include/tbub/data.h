#pragma once

// Byte-level corpus ingestion, the TBTK token store, random-offset batch
// sampling and a synthetic key/value lookup task.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tbub/numcore.h"

namespace tbub {

constexpr TokenId kBos = 256;
constexpr TokenId kEos = 257;
constexpr TokenId kPad = 258;
constexpr std::size_t kByteVocab = 259;

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  // Special ids are dropped.
  virtual std::string decode(std::span<const TokenId> ids) const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual TokenId bos() const = 0;
};

class ByteTokenizer final : public Tokenizer {
 public:
  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::size_t vocab_size() const override { return kByteVocab; }
  TokenId bos() const override { return kBos; }
};

// Tokenizes text with bos at the start of every document. Documents end at
// each occurrence of `delimiter`; the delimiter bytes stay in the stream.
std::vector<TokenId> tokenize_documents(std::string_view text, const Tokenizer& tok,
                                        std::string_view delimiter = "\n\n");

struct TokenStore {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t vocab_size = kByteVocab;
  std::vector<TokenId> ids;

  std::size_t count() const { return ids.size(); }
};

void write_token_store(const std::filesystem::path& path, const TokenStore& store);
TokenStore read_token_store(const std::filesystem::path& path);

// Reads text_path, tokenizes it and writes the store. Throws kIo when the
// input cannot be read or the output cannot be written.
TokenStore ingest(const std::filesystem::path& text_path, const std::filesystem::path& out_path,
                  std::string_view delimiter = "\n\n");

struct Batch {
  std::size_t length = 0;
  std::vector<std::vector<TokenId>> inputs;
  std::vector<std::vector<TokenId>> targets;
  std::vector<std::size_t> offsets;
};

// B windows with offsets uniform in [0, count - L - 1]; targets are the
// inputs shifted by one.
Batch sample_batch(const TokenStore& store, std::size_t batch_size, std::size_t length, std::mt19937_64& rng);

// "k1:v1;k2:v2;...?kj=vj" over lowercase letters. `query` covers "?kj=" and
// `answer` covers "vj"; everything else is filler.
struct LookupExample {
  std::string text;
  std::size_t query_begin = 0, query_end = 0;    // byte offsets [begin, end)
  std::size_t answer_begin = 0, answer_end = 0;
  std::string answer;
};
LookupExample gen_lookup_task(std::size_t n_pairs, std::mt19937_64& rng, std::size_t key_len = 2,
                              std::size_t value_len = 2);

// Zero-parameter reference: finds the queried key among the pairs and
// copies its value.
std::string lookup_oracle(std::string_view text);

}  // namespace tbub
