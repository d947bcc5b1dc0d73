#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "snr/error.hpp"
#include "snr/tensor.hpp"

// SNRT0001 tensor records: 8-byte magic, u32 rank, u32 dims[rank], then the
// little-endian f32 payload. Files may hold several records back to back.

namespace snr::io {

inline constexpr std::array<char, 8> kMagic{'S', 'N', 'R', 'T', '0', '0', '0', '1'};
inline constexpr std::uint32_t kMaxRank = 16;

struct Record {
  Shape shape;
  std::vector<float> values;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace detail

template <typename T>
void write_record(std::ostream& os, const Shape& shape, std::span<const T> values) {
  os.write(kMagic.data(), kMagic.size());
  detail::put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (const auto d : shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (const T v : values) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

template <typename T>
void write_record(std::ostream& os, const Tensor<T>& t) {
  write_record<T>(os, t.shape(), t.data());
}

/// Reads one record. Returns false at a clean end of stream; throws
/// FormatError on a bad magic and CorruptionError on a truncated record.
inline bool read_record(std::istream& is, Record& out) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() == 0) return false;
  if (is.gcount() != static_cast<std::streamsize>(magic.size())) throw CorruptionError("SNRT: truncated header");
  if (magic != kMagic) throw FormatError("SNRT: bad magic");
  std::uint32_t rank = 0;
  if (!detail::get_u32(is, rank)) throw CorruptionError("SNRT: truncated rank");
  if (rank > kMaxRank) throw FormatError("SNRT: implausible rank " + std::to_string(rank));
  out.shape.assign(rank, 0);
  for (auto& d : out.shape) {
    std::uint32_t v = 0;
    if (!detail::get_u32(is, v)) throw CorruptionError("SNRT: truncated dims");
    d = v;
  }
  out.values.resize(numel(out.shape));
  for (auto& v : out.values) {
    std::uint32_t bits = 0;
    if (!detail::get_u32(is, bits)) throw CorruptionError("SNRT: truncated payload");
    v = std::bit_cast<float>(bits);
  }
  return true;
}

inline std::vector<Record> read_all(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<Record> records;
  Record r;
  while (read_record(is, r)) records.push_back(std::move(r));
  return records;
}

inline Record read_one(const std::filesystem::path& path) {
  auto all = read_all(path);
  if (all.size() != 1) throw FormatError(path.string() + ": expected exactly one tensor record");
  return std::move(all.front());
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Shape& shape, std::span<const T> values) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  write_record<T>(os, shape, values);
  if (!os) throw IoError("write failed for " + path.string());
}

inline std::string to_hex(std::span<const unsigned char> bytes) {
  std::ostringstream os;
  for (const unsigned char b : bytes) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return os.str();
}

/// Lower-case hex SHA-256 of a file's bytes (same digest `sha256sum` prints).
inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> owner(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_MD_CTX* ctx = owner.get();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw IoError("sha256: digest init failed");
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  return to_hex({digest, len});
}

}  // namespace snr::io
