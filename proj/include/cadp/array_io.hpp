#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cadp/errors.hpp"
#include "cadp/tensor.hpp"

namespace cadp {

/// Binary container shared by checkpoints and dataset caches.
///
/// Layout (little-endian): magic "CADP", u32 version, u64 text length, text
/// block of sorted `key=value` lines, u32 array count, then per array: u32
/// name length, name bytes, u8 dtype tag, u32 rank, u64 dims, payload.
enum class DType : std::uint8_t { kF32 = 1, kF64 = 2, kU8 = 3, kU32 = 4, kU64 = 5 };

std::size_t dtype_size(DType t);

struct ArrayRecord {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

class Archive {
 public:
  std::map<std::string, std::string> meta;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t);
  void put_u64(const std::string& name, const std::vector<std::uint64_t>& v);
  void put_u8(const std::string& name, const std::vector<std::uint8_t>& v, const Shape& shape);
  /// Throws FormatError (kMalformed) on a duplicate name.
  void put_record(ArrayRecord r);

  bool contains(const std::string& name) const;
  const ArrayRecord& record(const std::string& name) const;
  /// Reads an array stored with the matching dtype; throws FormatError
  /// (kMalformed) on a missing name or dtype mismatch.
  template <typename T>
  Tensor<T> get(const std::string& name) const;
  std::vector<std::uint64_t> get_u64(const std::string& name) const;
  const std::string& meta_at(const std::string& key) const;

  const std::vector<ArrayRecord>& arrays() const { return arrays_; }

 private:
  std::vector<ArrayRecord> arrays_;
};

/// Canonical text of the metadata block.
std::string canonical_meta(const std::map<std::string, std::string>& meta);

std::vector<std::uint8_t> encode_archive(const Archive& a, std::uint32_t version);
/// Throws FormatError: kBadMagic, kVersionMismatch, kTruncated, kMalformed.
Archive decode_archive(const std::vector<std::uint8_t>& bytes, std::uint32_t expected_version);

/// Writes to `path.tmp` and renames, so readers never observe a partial file.
void write_archive(const std::string& path, const Archive& a, std::uint32_t version);
Archive read_archive(const std::string& path, std::uint32_t expected_version);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace cadp
