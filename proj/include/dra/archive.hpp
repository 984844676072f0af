#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dra/tensor.hpp"

namespace dra {

inline constexpr int kArchiveSchemaVersion = 1;

enum class DType { kF64, kU8, kI64 };

struct ArchiveArray {
  DType dtype = DType::kF64;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian payload
};

// Named-array archive in the safetensors layout: an 8-byte little-endian
// header length, a JSON header (dtype, shape, byte offsets per array plus a
// "__metadata__" string map), then the concatenated payloads. Arrays are laid
// out in name order, so identical contents always serialize to identical
// bytes.
class TensorArchive {
 public:
  void put(const std::string& name, const Tensor& t);
  void put_u8(const std::string& name, Shape shape, std::vector<std::uint8_t> values);
  void put_i64(const std::string& name, Shape shape, const std::vector<std::int64_t>& values);

  bool contains(const std::string& name) const { return arrays_.count(name) != 0; }
  const ArchiveArray& array(const std::string& name) const;
  std::vector<std::string> names() const;

  // F64 arrays come back as-is; U8 and I64 are widened to double.
  Tensor get(const std::string& name) const;
  std::vector<std::uint8_t> get_u8(const std::string& name) const;
  std::vector<std::int64_t> get_i64(const std::string& name) const;

  // Free-form metadata, stored as one JSON string under "__metadata__".
  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  std::string serialize() const;
  static TensorArchive parse(const std::string& bytes, const std::string& origin);

  void save(const std::filesystem::path& path) const;
  // Throws IngestionError naming the path on any read or format problem.
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::map<std::string, ArchiveArray> arrays_;
  nlohmann::json meta_ = nlohmann::json::object();
};

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace dra
