#pragma once

// Versioned float container shared by clip files, checkpoints and signature
// exports.
//
// Layout (all integers little-endian):
//   magic       8 bytes  "GAITDIS\0"
//   version     u32      kContainerVersion
//   header_len  u64      byte length of the JSON header
//   header      JSON     UTF-8; always carries "kind", "schema",
//                        "payload_floats" and "payload_fnv1a"
//   payload     f32[payload_floats], little-endian IEEE-754

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gaitdis/core/error.hpp"

namespace gaitdis {

inline constexpr char kContainerMagic[8] = {'G', 'A', 'I', 'T', 'D', 'I', 'S', '\0'};
inline constexpr std::uint32_t kContainerVersion = 1;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[i] = digits[v & 0xf];
  return out;
}

namespace detail {

template <typename U>
U byteswap(U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <typename U>
void put_le(std::string& out, U v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get_le(const char* p) {
  U v;
  std::memcpy(&v, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  return v;
}

inline std::string payload_bytes(std::span<const float> payload) {
  std::string out;
  out.reserve(payload.size() * 4);
  for (float f : payload) put_le(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

}  // namespace detail

struct FloatContainer {
  nlohmann::json header;
  std::vector<float> payload;
};

/// Serializes to an in-memory byte string. The "payload_floats" and
/// "payload_fnv1a" header fields are filled in here.
inline std::string encode_container(nlohmann::json header, std::span<const float> payload) {
  const std::string body = detail::payload_bytes(payload);
  header["payload_floats"] = payload.size();
  header["payload_fnv1a"] = hex64(fnv1a64(body));
  const std::string head = header.dump();
  std::string out(kContainerMagic, sizeof(kContainerMagic));
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  detail::put_le<std::uint64_t>(out, head.size());
  out += head;
  out += body;
  return out;
}

/// Parses bytes produced by encode_container. Checks the magic, the container
/// version, the header kind and schema version, and the payload length and
/// checksum. Never returns partially decoded data.
inline FloatContainer decode_container(std::string_view bytes, std::string_view expected_kind,
                                       int expected_schema) {
  constexpr std::size_t kFixed = sizeof(kContainerMagic) + 4 + 8;
  if (bytes.size() < kFixed || std::memcmp(bytes.data(), kContainerMagic, sizeof(kContainerMagic)) != 0)
    throw CorruptionError("container: bad magic or truncated preamble");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kContainerVersion)
    throw VersionError("container: version " + std::to_string(version) + ", expected " +
                       std::to_string(kContainerVersion));
  const auto head_len = detail::get_le<std::uint64_t>(bytes.data() + 12);
  if (head_len > bytes.size() - kFixed) throw CorruptionError("container: truncated header");

  FloatContainer c;
  try {
    c.header = nlohmann::json::parse(bytes.substr(kFixed, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("container: unreadable header: ") + e.what());
  }
  if (!c.header.is_object() || c.header.value("kind", "") != expected_kind)
    throw VersionError("container: expected kind '" + std::string(expected_kind) + "'");
  const int schema = c.header.value("schema", -1);
  if (schema != expected_schema)
    throw VersionError("container: schema " + std::to_string(schema) + ", expected " +
                       std::to_string(expected_schema));

  const std::size_t n = c.header.value("payload_floats", std::size_t{0});
  const std::string_view body = bytes.substr(kFixed + head_len);
  if (body.size() != n * 4)
    throw CorruptionError("container: payload is " + std::to_string(body.size()) + " bytes, header declares " +
                          std::to_string(n * 4));
  if (hex64(fnv1a64(body)) != c.header.value("payload_fnv1a", ""))
    throw CorruptionError("container: payload checksum mismatch");
  c.payload.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    c.payload[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(body.data() + 4 * i));
  return c;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IngestionError("write failed for " + path.string());
}

inline void write_container(const std::filesystem::path& path, nlohmann::json header,
                            std::span<const float> payload) {
  write_file_bytes(path, encode_container(std::move(header), payload));
}

inline FloatContainer read_container(const std::filesystem::path& path, std::string_view expected_kind,
                                     int expected_schema) {
  return decode_container(read_file_bytes(path), expected_kind, expected_schema);
}

}  // namespace gaitdis
