#pragma once

// Little-endian primitives shared by the TRACE-v1 and FEAT-v1 codecs.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "attnhd/errors.hpp"

namespace attnhd::io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_f32s(std::string& out, std::span<const float> values) {
  for (float v : values) put_f32(out, v);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

// Reads from a stream while tracking the absolute byte offset, so that
// truncation can be reported at the position where it happened.
class CountingReader {
 public:
  explicit CountingReader(std::istream& in) : in_(&in) {}

  std::uint64_t offset() const noexcept { return offset_; }

  // True when the stream has no more bytes.
  bool at_eof() {
    return in_->peek() == std::char_traits<char>::eof();
  }

  // Reads exactly n bytes or throws CorruptionError at the start offset.
  void read_exact(std::span<unsigned char> buf, const char* what) {
    in_->read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    const auto got = static_cast<std::size_t>(in_->gcount());
    if (got != buf.size()) {
      throw CorruptionError(std::string("truncated ") + what + ": expected " +
                                std::to_string(buf.size()) + " bytes, got " + std::to_string(got),
                            offset_);
    }
    offset_ += buf.size();
  }

  std::uint32_t u32(const char* what) {
    std::array<unsigned char, 4> b{};
    read_exact(b, what);
    return get_u32(b.data());
  }

  std::uint64_t u64(const char* what) {
    std::array<unsigned char, 8> b{};
    read_exact(b, what);
    return get_u64(b.data());
  }

  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    read_exact({reinterpret_cast<unsigned char*>(s.data()), n}, what);
    return s;
  }

  // Reads n little-endian floats into out (resized).
  void f32s(std::vector<float>& out, std::size_t n, const char* what) {
    scratch_.resize(4 * n);
    read_exact(scratch_, what);
    out.resize(n);
    if constexpr (std::endian::native == std::endian::little) {
      if (n != 0) std::memcpy(out.data(), scratch_.data(), 4 * n);
    } else {
      for (std::size_t i = 0; i < n; ++i) out[i] = get_f32(scratch_.data() + 4 * i);
    }
  }

 private:
  std::istream* in_;
  std::uint64_t offset_ = 0;
  std::vector<unsigned char> scratch_;
};

}  // namespace attnhd::io
