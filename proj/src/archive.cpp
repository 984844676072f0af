#include "dra/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "dra/errors.hpp"

namespace dra {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

const char* dtype_name(DType d) {
  switch (d) {
    case DType::kF64: return "F64";
    case DType::kU8: return "U8";
    case DType::kI64: return "I64";
  }
  return "?";
}

std::size_t dtype_size(DType d) { return d == DType::kU8 ? 1 : 8; }

DType parse_dtype(const std::string& s, const std::string& origin) {
  if (s == "F64") return DType::kF64;
  if (s == "U8") return DType::kU8;
  if (s == "I64") return DType::kI64;
  throw IngestionError(origin + ": unsupported dtype '" + s + "'");
}

}  // namespace

void TensorArchive::put(const std::string& name, const Tensor& t) {
  ArchiveArray a{DType::kF64, t.shape(), std::vector<std::uint8_t>(t.size() * sizeof(double))};
  if (t.size()) std::memcpy(a.bytes.data(), t.data(), a.bytes.size());
  arrays_[name] = std::move(a);
}

void TensorArchive::put_u8(const std::string& name, Shape shape, std::vector<std::uint8_t> values) {
  if (values.size() != shape_size(shape)) throw ArgumentError("put_u8: size does not match shape");
  arrays_[name] = ArchiveArray{DType::kU8, std::move(shape), std::move(values)};
}

void TensorArchive::put_i64(const std::string& name, Shape shape, const std::vector<std::int64_t>& values) {
  if (values.size() != shape_size(shape)) throw ArgumentError("put_i64: size does not match shape");
  ArchiveArray a{DType::kI64, std::move(shape), std::vector<std::uint8_t>(values.size() * 8)};
  if (!values.empty()) std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
  arrays_[name] = std::move(a);
}

const ArchiveArray& TensorArchive::array(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw ArgumentError("archive has no array named '" + name + "'");
  return it->second;
}

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : arrays_) out.push_back(k);
  return out;
}

Tensor TensorArchive::get(const std::string& name) const {
  const ArchiveArray& a = array(name);
  Tensor t(a.shape);
  switch (a.dtype) {
    case DType::kF64:
      if (t.size()) std::memcpy(t.data(), a.bytes.data(), a.bytes.size());
      break;
    case DType::kU8:
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = a.bytes[i];
      break;
    case DType::kI64: {
      auto v = get_i64(name);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(v[i]);
      break;
    }
  }
  return t;
}

std::vector<std::uint8_t> TensorArchive::get_u8(const std::string& name) const {
  const ArchiveArray& a = array(name);
  if (a.dtype != DType::kU8) throw ArgumentError("array '" + name + "' is not U8");
  return a.bytes;
}

std::vector<std::int64_t> TensorArchive::get_i64(const std::string& name) const {
  const ArchiveArray& a = array(name);
  if (a.dtype != DType::kI64) throw ArgumentError("array '" + name + "' is not I64");
  std::vector<std::int64_t> v(a.bytes.size() / 8);
  if (!v.empty()) std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
  return v;
}

std::string TensorArchive::serialize() const {
  nlohmann::json header = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, a] : arrays_) {
    header[name] = {{"dtype", dtype_name(a.dtype)}, {"shape", a.shape}, {"data_offsets", {offset, offset + a.bytes.size()}}};
    offset += a.bytes.size();
  }
  header["__metadata__"] = {{"schema_version", std::to_string(kArchiveSchemaVersion)}, {"meta", meta_.dump()}};
  std::string h = header.dump();
  while ((h.size() + 8) % 8 != 0) h.push_back(' ');
  std::string out(8, '\0');
  const std::uint64_t n = h.size();
  std::memcpy(out.data(), &n, 8);
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& [name, a] : arrays_) out.append(reinterpret_cast<const char*>(a.bytes.data()), a.bytes.size());
  return out;
}

TensorArchive TensorArchive::parse(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 8) throw IngestionError(origin + ": truncated archive header");
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  if (n > bytes.size() - 8) throw IngestionError(origin + ": header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, n));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(origin + ": malformed archive header (" + e.what() + ")");
  }
  const std::size_t base = 8 + n;
  TensorArchive ar;
  try {
    for (auto it = header.begin(); it != header.end(); ++it) {
      if (it.key() == "__metadata__") {
        const auto& md = it.value();
        if (md.contains("schema_version") && std::stoi(md.at("schema_version").get<std::string>()) > kArchiveSchemaVersion) {
          throw IngestionError(origin + ": archive schema version is newer than this build");
        }
        if (md.contains("meta")) ar.meta_ = nlohmann::json::parse(md.at("meta").get<std::string>());
        continue;
      }
      ArchiveArray a;
      a.dtype = parse_dtype(it.value().at("dtype").get<std::string>(), origin);
      a.shape = it.value().at("shape").get<Shape>();
      const auto off = it.value().at("data_offsets").get<std::vector<std::size_t>>();
      if (off.size() != 2 || off[1] < off[0] || base + off[1] > bytes.size()) {
        throw IngestionError(origin + ": array '" + it.key() + "' points outside the file");
      }
      if (off[1] - off[0] != shape_size(a.shape) * dtype_size(a.dtype)) {
        throw IngestionError(origin + ": array '" + it.key() + "' has a size inconsistent with its shape");
      }
      a.bytes.assign(bytes.begin() + base + off[0], bytes.begin() + base + off[1]);
      ar.arrays_[it.key()] = std::move(a);
    }
  } catch (const IngestionError&) {
    throw;
  } catch (const std::exception& e) {
    throw IngestionError(origin + ": malformed archive entry (" + e.what() + ")");
  }
  return ar;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp);
    const std::string bytes = serialize();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError(path.string() + ": cannot open file");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  return parse(read_file(path), path.string());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace dra
