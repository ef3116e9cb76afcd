#include "sensor/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sensor/common.hpp"

namespace sensor::model_io {

static_assert(std::numeric_limits<float>::is_iec559, "float32 must be IEEE-754");

const Tensor& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw ValidationError("model file has no tensor '" + name + "'");
}

const std::string& Container::config_value(const std::string& key) const {
  auto it = config.find(key);
  if (it == config.end()) throw ValidationError("model file config lacks '" + key + "'");
  return it->second;
}

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in, std::size_t end) : in_(in), end_(end) {}

  void need(std::size_t n) const {
    if (pos_ + n > end_) throw ValidationError("model file is truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize(const Container& c) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(c.type));
  std::string cfg;
  for (const auto& [k, v] : c.config) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ValidationError("config entry '" + k + "' cannot be serialized");
    }
    cfg += k + "=" + v + "\n";
  }
  w.str(cfg);
  w.u64(c.vocab_hash);
  w.u32(static_cast<std::uint32_t>(c.vocab.size()));
  for (const auto& t : c.vocab) w.str(t);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.data.size() != static_cast<std::size_t>(t.rows) * t.cols) {
      throw ValidationError("tensor '" + t.name + "' has inconsistent shape");
    }
    w.str(t.name);
    w.u32(t.rows);
    w.u32(t.cols);
    for (float f : t.data) w.u32(std::bit_cast<std::uint32_t>(f));
  }
  w.u64(fnv1a64(w.bytes()));
  return std::move(w.bytes());
}

Container deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw ValidationError("not a model file (bad magic)");
  }
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);

  Container c;
  Reader rr(bytes, body);
  rr.u64();  // magic
  const auto version = rr.u32();
  if (version == kFormatVersion && stored != fnv1a64(std::string_view(bytes).substr(0, body))) {
    throw ValidationError("model file checksum mismatch");
  }
  if (version != kFormatVersion) {
    throw ValidationError("model file version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kFormatVersion) + ")");
  }
  c.type = static_cast<TypeTag>(rr.u32());
  std::istringstream cfg(rr.str());
  std::string line;
  while (std::getline(cfg, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("model file config line without '='");
    c.config[line.substr(0, eq)] = line.substr(eq + 1);
  }
  c.vocab_hash = rr.u64();
  const auto nvocab = rr.u32();
  c.vocab.reserve(nvocab);
  for (std::uint32_t i = 0; i < nvocab; ++i) c.vocab.push_back(rr.str());
  const auto ntensors = rr.u32();
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    Tensor t;
    t.name = rr.str();
    t.rows = rr.u32();
    t.cols = rr.u32();
    const std::size_t n = static_cast<std::size_t>(t.rows) * t.cols;
    rr.need(n * 4);
    t.data.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.data[k] = std::bit_cast<float>(rr.u32());
    c.tensors.push_back(std::move(t));
  }
  if (rr.pos() != body) throw ValidationError("model file has trailing bytes");
  return c;
}

void write_file(const Container& c, const std::filesystem::path& path) {
  const auto bytes = serialize(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw RuntimeError("write failed: " + path.string());
}

Container read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open model file " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  return deserialize(buf.str());
}

}  // namespace sensor::model_io
