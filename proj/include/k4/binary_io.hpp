#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>

#include "k4/core.hpp"

namespace k4 {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

// Little-endian byte sink.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.append(s); }

  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void f64s(std::span<const double> v) {
    for (double x : v) f64(x);
  }

  const std::string& buffer() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

// Little-endian byte source over a borrowed buffer; every read is bounds-checked.
class ByteReader {
 public:
  ByteReader(std::string_view data, std::string context) : data_(data), context_(std::move(context)) {}

  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  // Reads a count and checks it is plausible given the remaining bytes.
  std::size_t count(std::size_t bytes_per_item) {
    auto n = u64();
    if (bytes_per_item > 0 && n > remaining() / bytes_per_item) fail("declared count exceeds payload");
    return static_cast<std::size_t>(n);
  }

  std::vector<double> f64s(std::size_t n) {
    if (n > remaining() / 8) fail("payload shorter than declared");
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  void expect_end() const {
    if (remaining() != 0) fail(std::to_string(remaining()) + " trailing bytes");
  }

  [[noreturn]] void fail(const std::string& what) const { throw FormatError(context_ + ": " + what); }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) fail("unexpected end of data");
  }

  std::string_view data_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(std::string_view s) {
    for (unsigned char c : s) {
      h_ ^= c;
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::span<const double> v) {
    for (double x : v) {
      auto bits = std::bit_cast<std::uint64_t>(x);
      for (int i = 0; i < 8; ++i) {
        h_ ^= (bits >> (8 * i)) & 0xff;
        h_ *= 0x100000001b3ULL;
      }
    }
  }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace k4
