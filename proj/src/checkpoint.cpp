#include "tbub/checkpoint.h"

#include <bit>
#include <fstream>

#include "tbub/error.h"

namespace tbub {

OptimizerState zero_optimizer_state(const ParamStore& params) {
  OptimizerState s;
  s.m = zero_grads(params);
  s.v = zero_grads(params);
  return s;
}

namespace {

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void matrix_data(const Matrix& m) {
    for (double v : m.data) f64(v);
  }

 private:
  void le(std::uint64_t v, int n) {
    unsigned char b[8];
    for (int i = 0; i < n; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    bytes(b, n);
  }
  void bytes(const void* p, int n) { os_.write(static_cast<const char*>(p), n); }
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string str(std::uint64_t limit = 1u << 30) {
    const auto n = u64();
    if (n > limit) throw Error(ErrorKind::kFormat, "checkpoint: implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void matrix_data(Matrix& m) {
    for (double& v : m.data) v = f64();
  }
  void read(char* p, std::uint64_t n) {
    if (!is_.read(p, static_cast<std::streamsize>(n))) throw Error(ErrorKind::kFormat, "checkpoint: truncated file");
  }

 private:
  std::uint64_t le(int n) {
    unsigned char b[8];
    read(reinterpret_cast<char*>(b), static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::istream& is_;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto& tensors = ckpt.params.tensors;
  if (ckpt.optimizer.m.size() != tensors.size() || ckpt.optimizer.v.size() != tensors.size())
    throw Error(ErrorKind::kArgument, "checkpoint: optimizer state does not match parameters");
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::kIo, "cannot open '" + tmp.string() + "' for writing");
    Writer w(os);
    os.write("TBUB", 4);
    w.u32(Checkpoint::kVersion);
    w.str(nlohmann::json{{"model", to_json(ckpt.model)}, {"run", ckpt.run}}.dump());
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      w.u32(static_cast<std::uint32_t>(t.name.size()));
      os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      w.u8(t.decay ? 1 : 0);
      w.u64(t.value.rows);
      w.u64(t.value.cols);
      w.matrix_data(t.value);
    }
    w.u64(ckpt.optimizer.step);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (!ckpt.optimizer.m[i].same_shape(tensors[i].value) || !ckpt.optimizer.v[i].same_shape(tensors[i].value))
        throw Error(ErrorKind::kArgument, "checkpoint: moment shape mismatch for '" + tensors[i].name + "'");
      w.matrix_data(ckpt.optimizer.m[i]);
      w.matrix_data(ckpt.optimizer.v[i]);
    }
    w.str(ckpt.rng_state);
    os.flush();
    if (!os) throw Error(ErrorKind::kIo, "failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot open checkpoint '" + path.string() + "'");
  Reader r(is);
  char magic[4];
  r.read(magic, 4);
  if (std::string_view(magic, 4) != "TBUB") throw Error(ErrorKind::kFormat, "'" + path.string() + "' is not a checkpoint");
  const auto version = r.u32();
  if (version != Checkpoint::kVersion)
    throw Error(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("checkpoint header: ") + e.what());
  }
  if (!header.contains("model")) throw Error(ErrorKind::kFormat, "checkpoint header lacks model config");
  c.model = model_config_from_json(header["model"]);
  c.run = header.value("run", nlohmann::json::object());
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    ParamTensor t;
    t.name = std::string(r.u32(), '\0');
    if (t.name.size() > 4096) throw Error(ErrorKind::kFormat, "checkpoint: implausible tensor name");
    r.read(t.name.data(), t.name.size());
    t.decay = r.u8() != 0;
    const auto rows = r.u64(), cols = r.u64();
    if (rows * cols > (std::uint64_t{1} << 32)) throw Error(ErrorKind::kFormat, "checkpoint: implausible tensor size");
    t.value = Matrix(rows, cols);
    r.matrix_data(t.value);
    c.params.tensors.push_back(std::move(t));
  }
  c.optimizer.step = r.u64();
  for (const auto& t : c.params.tensors) {
    c.optimizer.m.emplace_back(t.value.rows, t.value.cols);
    c.optimizer.v.emplace_back(t.value.rows, t.value.cols);
    r.matrix_data(c.optimizer.m.back());
    r.matrix_data(c.optimizer.v.back());
  }
  c.rng_state = r.str();
  if (is.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::kFormat, "checkpoint has trailing bytes");
  return c;
}

}  // namespace tbub
