#include "tbub/data.h"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

#include "tbub/error.h"

namespace tbub {

std::vector<TokenId> ByteTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::string ByteTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (TokenId t : ids)
    if (t < 256) out.push_back(static_cast<char>(t));
  return out;
}

std::vector<TokenId> tokenize_documents(std::string_view text, const Tokenizer& tok, std::string_view delimiter) {
  std::vector<TokenId> out;
  if (text.empty()) return out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = delimiter.empty() ? std::string_view::npos : text.find(delimiter, start);
    end = end == std::string_view::npos ? text.size() : end + delimiter.size();
    out.push_back(tok.bos());
    const auto piece = tok.encode(text.substr(start, end - start));
    out.insert(out.end(), piece.begin(), piece.end());
    start = end;
  }
  return out;
}

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw Error(ErrorKind::kFormat, "token store: truncated " + what);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void write_token_store(const std::filesystem::path& path, const TokenStore& store) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  os.write("TBTK", 4);
  put<std::uint32_t>(os, TokenStore::kVersion);
  put<std::uint32_t>(os, store.vocab_size);
  put<std::uint64_t>(os, store.ids.size());
  std::vector<unsigned char> buf(store.ids.size() * 4);
  for (std::size_t i = 0; i < store.ids.size(); ++i)
    for (std::size_t k = 0; k < 4; ++k) buf[4 * i + k] = static_cast<unsigned char>((store.ids[i] >> (8 * k)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw Error(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

TokenStore read_token_store(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot open token store '" + path.string() + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "TBTK")
    throw Error(ErrorKind::kFormat, "'" + path.string() + "' is not a token store");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != TokenStore::kVersion)
    throw Error(ErrorKind::kFormat, "unsupported token store version " + std::to_string(version));
  TokenStore s;
  s.vocab_size = get<std::uint32_t>(is, "vocab size");
  const auto count = get<std::uint64_t>(is, "count");
  std::vector<unsigned char> buf(count * 4);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw Error(ErrorKind::kFormat, "token store payload shorter than its count");
  if (is.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::kFormat, "token store has trailing bytes");
  s.ids.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    TokenId t = 0;
    for (std::size_t k = 0; k < 4; ++k) t |= static_cast<TokenId>(buf[4 * i + k]) << (8 * k);
    if (t >= s.vocab_size) throw Error(ErrorKind::kFormat, "token id out of vocabulary at index " + std::to_string(i));
    s.ids[i] = t;
  }
  return s;
}

TokenStore ingest(const std::filesystem::path& text_path, const std::filesystem::path& out_path,
                  std::string_view delimiter) {
  std::ifstream is(text_path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot read '" + text_path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (is.bad()) throw Error(ErrorKind::kIo, "error reading '" + text_path.string() + "'");
  ByteTokenizer tok;
  TokenStore s;
  s.vocab_size = static_cast<std::uint32_t>(tok.vocab_size());
  s.ids = tokenize_documents(text, tok, delimiter);
  write_token_store(out_path, s);
  return s;
}

Batch sample_batch(const TokenStore& store, std::size_t batch_size, std::size_t length, std::mt19937_64& rng) {
  if (length == 0) throw Error(ErrorKind::kArgument, "sample_batch: length must be positive");
  if (store.count() < length + 1)
    throw Error(ErrorKind::kArgument, "sample_batch: store has " + std::to_string(store.count()) +
                                          " tokens, need at least " + std::to_string(length + 1));
  std::uniform_int_distribution<std::size_t> offset(0, store.count() - length - 1);
  Batch b;
  b.length = length;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t o = offset(rng);
    const auto first = store.ids.begin() + static_cast<std::ptrdiff_t>(o);
    b.offsets.push_back(o);
    b.inputs.emplace_back(first, first + static_cast<std::ptrdiff_t>(length));
    b.targets.emplace_back(first + 1, first + 1 + static_cast<std::ptrdiff_t>(length));
  }
  return b;
}

LookupExample gen_lookup_task(std::size_t n_pairs, std::mt19937_64& rng, std::size_t key_len, std::size_t value_len) {
  if (n_pairs < 1) throw Error(ErrorKind::kArgument, "lookup task needs at least one pair");
  if (key_len < 1 || value_len < 1) throw Error(ErrorKind::kArgument, "lookup task key/value length must be positive");
  std::uniform_int_distribution<int> letter(0, 25);
  auto word = [&](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + letter(rng)));
    return s;
  };
  std::vector<std::string> keys, values;
  std::set<std::string> seen;
  while (keys.size() < n_pairs) {
    std::string k = word(key_len);
    if (!seen.insert(k).second) continue;
    keys.push_back(std::move(k));
    values.push_back(word(value_len));
  }
  LookupExample ex;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    if (i > 0) ex.text += ';';
    ex.text += keys[i] + ':' + values[i];
  }
  const std::size_t j = std::uniform_int_distribution<std::size_t>(0, n_pairs - 1)(rng);
  ex.query_begin = ex.text.size();
  ex.text += '?' + keys[j] + '=';
  ex.query_end = ex.text.size();
  ex.answer_begin = ex.text.size();
  ex.text += values[j];
  ex.answer_end = ex.text.size();
  ex.answer = values[j];
  return ex;
}

std::string lookup_oracle(std::string_view text) {
  const std::size_t q = text.rfind('?');
  const std::size_t eq = text.find('=', q);
  if (q == std::string_view::npos || eq == std::string_view::npos) return {};
  const std::string_view key = text.substr(q + 1, eq - q - 1);
  const std::string_view pairs = text.substr(0, q);
  std::size_t start = 0;
  while (start <= pairs.size()) {
    std::size_t end = pairs.find(';', start);
    if (end == std::string_view::npos) end = pairs.size();
    const std::string_view pair = pairs.substr(start, end - start);
    const std::size_t colon = pair.find(':');
    if (colon != std::string_view::npos && pair.substr(0, colon) == key) return std::string(pair.substr(colon + 1));
    start = end + 1;
  }
  return {};
}

}  // namespace tbub
