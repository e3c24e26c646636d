#include "cadp/array_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cadp {

static_assert(std::endian::native == std::endian::little, "array container assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'A', 'D', 'P'};

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kF32; }
template <>
constexpr DType dtype_of<double>() { return DType::kF64; }

class Writer {
 public:
  template <typename U>
  void pod(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes(b) {}
  template <typename U>
  U pod(const char* what) {
    U v;
    raw(&v, sizeof(U), what);
    return v;
  }
  void raw(void* dst, std::size_t n, const char* what) {
    if (n > bytes.size() - pos) {
      throw FormatError(FormatError::Kind::kTruncated, std::string("archive truncated while reading ") + what);
    }
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  }
  std::size_t remaining() const { return bytes.size() - pos; }
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
};

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
    case DType::kU32: return 4;
    case DType::kU64: return 8;
  }
  throw FormatError(FormatError::Kind::kMalformed, "unknown dtype tag " + std::to_string(static_cast<int>(t)));
}

void Archive::put_record(ArrayRecord r) {
  if (contains(r.name)) throw FormatError(FormatError::Kind::kMalformed, "duplicate array '" + r.name + "'");
  arrays_.push_back(std::move(r));
}

template <typename T>
void Archive::put(const std::string& name, const Tensor<T>& t) {
  ArrayRecord r{name, dtype_of<T>(), t.shape(), {}};
  r.bytes.resize(t.size() * sizeof(T));
  if (!r.bytes.empty()) std::memcpy(r.bytes.data(), t.ptr(), r.bytes.size());
  put_record(std::move(r));
}

void Archive::put_u64(const std::string& name, const std::vector<std::uint64_t>& v) {
  ArrayRecord r{name, DType::kU64, {v.size()}, {}};
  r.bytes.resize(v.size() * 8);
  if (!v.empty()) std::memcpy(r.bytes.data(), v.data(), r.bytes.size());
  put_record(std::move(r));
}

void Archive::put_u8(const std::string& name, const std::vector<std::uint8_t>& v, const Shape& shape) {
  if (numel(shape) != v.size()) throw ShapeError("put_u8: shape does not match data size");
  put_record(ArrayRecord{name, DType::kU8, shape, v});
}

bool Archive::contains(const std::string& name) const {
  for (const auto& r : arrays_)
    if (r.name == name) return true;
  return false;
}

const ArrayRecord& Archive::record(const std::string& name) const {
  for (const auto& r : arrays_)
    if (r.name == name) return r;
  throw FormatError(FormatError::Kind::kMalformed, "archive has no array '" + name + "'");
}

template <typename T>
Tensor<T> Archive::get(const std::string& name) const {
  const ArrayRecord& r = record(name);
  if (r.dtype != dtype_of<T>()) throw FormatError(FormatError::Kind::kMalformed, "array '" + name + "' has another dtype");
  Tensor<T> t(r.shape);
  if (!r.bytes.empty()) std::memcpy(t.ptr(), r.bytes.data(), r.bytes.size());
  return t;
}

std::vector<std::uint64_t> Archive::get_u64(const std::string& name) const {
  const ArrayRecord& r = record(name);
  if (r.dtype != DType::kU64) throw FormatError(FormatError::Kind::kMalformed, "array '" + name + "' is not u64");
  std::vector<std::uint64_t> v(r.bytes.size() / 8);
  if (!v.empty()) std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
  return v;
}

const std::string& Archive::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError(FormatError::Kind::kMalformed, "archive metadata lacks '" + key + "'");
  return it->second;
}

std::string canonical_meta(const std::map<std::string, std::string>& meta) {
  std::string s;
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError(FormatError::Kind::kMalformed, "metadata key/value contains a reserved character: " + k);
    }
    s += k;
    s += '=';
    s += v;
    s += '\n';
  }
  return s;
}

std::vector<std::uint8_t> encode_archive(const Archive& a, std::uint32_t version) {
  Writer w;
  w.raw(kMagic, 4);
  w.pod<std::uint32_t>(version);
  const std::string text = canonical_meta(a.meta);
  w.pod<std::uint64_t>(text.size());
  w.raw(text.data(), text.size());
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.arrays().size()));
  for (const auto& r : a.arrays()) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.raw(r.name.data(), r.name.size());
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (std::size_t d : r.shape) w.pod<std::uint64_t>(d);
    w.raw(r.bytes.data(), r.bytes.size());
  }
  return std::move(w.out);
}

Archive decode_archive(const std::vector<std::uint8_t>& bytes, std::uint32_t expected_version) {
  using K = FormatError::Kind;
  Reader rd(bytes);
  char magic[4];
  rd.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(K::kBadMagic, "not a CADP archive (bad magic bytes)");
  const auto version = rd.pod<std::uint32_t>("version");
  if (version != expected_version) {
    throw FormatError(K::kVersionMismatch, "archive version " + std::to_string(version) + ", expected " +
                                               std::to_string(expected_version));
  }
  const auto text_len = rd.pod<std::uint64_t>("metadata length");
  if (text_len > rd.remaining()) throw FormatError(K::kTruncated, "archive truncated in metadata block");
  std::string text(text_len, '\0');
  rd.raw(text.data(), text_len, "metadata");
  Archive a;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(K::kMalformed, "metadata line without '=': " + line);
    a.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = rd.pod<std::uint32_t>("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    ArrayRecord r;
    const auto name_len = rd.pod<std::uint32_t>("name length");
    if (name_len > rd.remaining()) throw FormatError(K::kTruncated, "archive truncated in array name");
    r.name.resize(name_len);
    rd.raw(r.name.data(), name_len, "array name");
    r.dtype = static_cast<DType>(rd.pod<std::uint8_t>("dtype"));
    const std::size_t esize = dtype_size(r.dtype);
    const auto rank = rd.pod<std::uint32_t>("rank");
    if (rank > 16) throw FormatError(K::kMalformed, "array '" + r.name + "' has implausible rank");
    std::uint64_t count_elems = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = rd.pod<std::uint64_t>("dims");
      if (dim != 0 && count_elems > (std::uint64_t{1} << 48) / dim) {
        throw FormatError(K::kMalformed, "array '" + r.name + "' is implausibly large");
      }
      count_elems *= dim;
      r.shape.push_back(static_cast<std::size_t>(dim));
    }
    const std::uint64_t nbytes = count_elems * esize;
    if (nbytes > rd.remaining()) throw FormatError(K::kTruncated, "archive truncated in array '" + r.name + "'");
    r.bytes.resize(nbytes);
    rd.raw(r.bytes.data(), nbytes, "payload");
    a.put_record(std::move(r));
  }
  if (rd.remaining() != 0) throw FormatError(K::kMalformed, "trailing bytes after last array");
  return a;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::remove(tmp.c_str());
      throw FormatError(FormatError::Kind::kIo, "write failed for " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw FormatError(FormatError::Kind::kIo, "cannot rename " + tmp + " to " + path + ": " + ec.message());
  }
}

void write_archive(const std::string& path, const Archive& a, std::uint32_t version) {
  write_file_atomic(path, encode_archive(a, version));
}

Archive read_archive(const std::string& path, std::uint32_t expected_version) {
  return decode_archive(read_file_bytes(path), expected_version);
}

template void Archive::put<float>(const std::string&, const Tensor<float>&);
template void Archive::put<double>(const std::string&, const Tensor<double>&);
template Tensor<float> Archive::get<float>(const std::string&) const;
template Tensor<double> Archive::get<double>(const std::string&) const;

}  // namespace cadp
