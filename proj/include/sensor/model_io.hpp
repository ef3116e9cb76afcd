#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sensor::model_io {

// Binary container shared by every trained model. All integers little-endian.
//
//   magic      8 bytes  "SNSRMDL\0"
//   version    u32
//   type tag   u32
//   config     u32 length + UTF-8 "key=value\n" lines (sorted by key)
//   vocab hash u64
//   vocab      u32 count, then per token u32 length + bytes
//   tensors    u32 count, then per tensor:
//                u32 name length + name, u32 rows, u32 cols,
//                rows*cols float32 (IEEE-754, row-major)
//   checksum   u64 FNV-1a over every preceding byte
inline constexpr char kMagic[8] = {'S', 'N', 'S', 'R', 'M', 'D', 'L', '\0'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class TypeTag : std::uint32_t {
  Grace = 1,
  LinearBaseline = 2,
  HierarchicalBaseline = 3,
};

struct Tensor {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> data;

  bool operator==(const Tensor&) const = default;
};

struct Container {
  TypeTag type = TypeTag::Grace;
  std::map<std::string, std::string> config;
  std::uint64_t vocab_hash = 0;
  std::vector<std::string> vocab;
  std::vector<Tensor> tensors;

  const Tensor& tensor(const std::string& name) const;
  const std::string& config_value(const std::string& key) const;

  bool operator==(const Container&) const = default;
};

std::string serialize(const Container& c);
// Throws ValidationError on bad magic, version, checksum, or truncation.
Container deserialize(const std::string& bytes);

void write_file(const Container& c, const std::filesystem::path& path);
Container read_file(const std::filesystem::path& path);

}  // namespace sensor::model_io
