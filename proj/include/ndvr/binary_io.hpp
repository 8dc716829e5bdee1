#pragma once

// Little-endian primitives shared by the NDVF / NDKP / NDIX / NDSG containers.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ndvr/error.hpp"

namespace ndvr::io {

static_assert(std::endian::native == std::endian::little,
              "containers are written with native little-endian stores");

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw Error(ErrorCode::kIo, "write failed");
    count_ += n;
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void i32(std::int32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }

  void f32s(std::span<const float> v) { bytes(v.data(), v.size_bytes()); }
  void f64s(std::span<const double> v) { bytes(v.data(), v.size_bytes()); }

  void magic(std::string_view tag, std::uint8_t version) {
    bytes(tag.data(), tag.size());
    u8(version);
  }

  // 4-byte length prefix followed by UTF-8 JSON (keys sorted, no whitespace).
  void json_header(const nlohmann::json& header) {
    const std::string text = header.dump();
    u32(static_cast<std::uint32_t>(text.size()));
    bytes(text.data(), text.size());
  }

  std::size_t count() const { return count_; }

 private:
  std::ostream& out_;
  std::size_t count_ = 0;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(void* data, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw Error(ErrorCode::kCorruption, std::string("truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) { std::uint8_t v; bytes(&v, 1, what); return v; }
  std::uint32_t u32(const char* what) { std::uint32_t v; bytes(&v, 4, what); return v; }
  std::uint64_t u64(const char* what) { std::uint64_t v; bytes(&v, 8, what); return v; }
  std::int32_t i32(const char* what) { std::int32_t v; bytes(&v, 4, what); return v; }
  float f32(const char* what) { float v; bytes(&v, 4, what); return v; }
  double f64(const char* what) { double v; bytes(&v, 8, what); return v; }

  void f32s(std::span<float> out, const char* what) { bytes(out.data(), out.size_bytes(), what); }
  void f64s(std::span<double> out, const char* what) { bytes(out.data(), out.size_bytes(), what); }

  // Throws kFormat when the tag or version differ. A short read here is also a
  // format error: the stream is not this container at all.
  void expect_magic(std::string_view tag, std::uint8_t version) {
    std::array<char, 8> buf{};
    in_.read(buf.data(), static_cast<std::streamsize>(tag.size() + 1));
    if (static_cast<std::size_t>(in_.gcount()) != tag.size() + 1 ||
        std::string_view(buf.data(), tag.size()) != tag)
      throw Error(ErrorCode::kFormat, "bad magic, expected " + std::string(tag));
    if (static_cast<std::uint8_t>(buf[tag.size()]) != version)
      throw Error(ErrorCode::kFormat, "unsupported " + std::string(tag) + " version " +
                                          std::to_string(static_cast<int>(buf[tag.size()])));
  }

  nlohmann::json json_header(std::size_t max_len = 1u << 26) {
    const std::uint32_t len = u32("header length");
    if (len > max_len) throw Error(ErrorCode::kCorruption, "implausible header length");
    std::string text(len, '\0');
    bytes(text.data(), len, "header");
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kCorruption, std::string("header is not valid JSON: ") + e.what());
    }
  }

  // True when the stream has no bytes left.
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
};

template <typename T>
T header_field(const nlohmann::json& header, const char* key) {
  if (!header.contains(key)) throw Error(ErrorCode::kCorruption, std::string("header missing '") + key + "'");
  try {
    return header.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kCorruption, std::string("header field '") + key + "' has the wrong type");
  }
}

}  // namespace ndvr::io
