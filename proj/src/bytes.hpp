#pragma once

// Little-endian byte packing shared by the binary artifact formats.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "todsynth/errors.hpp"

namespace todsynth::detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void floats(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  void bytes(std::span<const std::uint8_t> v) { buf_.insert(buf_.end(), v.begin(), v.end()); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void reserve(std::size_t n) { buf_.reserve(n); }
  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked reader; every overrun is a FormatError at the failing offset.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> buf) : buf_(std::move(buf)) {}

  static ByteReader load(const std::filesystem::path& path, const std::string& what) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifactError(what + " not found: " + path.string());
    return ByteReader({std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()});
  }

  std::size_t offset() const noexcept { return off_; }
  std::size_t size() const noexcept { return buf_.size(); }
  std::size_t remaining() const noexcept { return buf_.size() - off_; }
  const std::uint8_t* data() const noexcept { return buf_.data(); }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, " +
                            std::to_string(remaining()) + " left",
                        buf_.size());
    }
  }
  std::uint8_t u8() {
    need(1, "u8");
    return buf_[off_++];
  }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  void floats(std::span<float> out) {
    need(out.size() * 4, "float block");
    for (float& x : out) x = f32();
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n, "string");
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(off_),
                  buf_.begin() + static_cast<std::ptrdiff_t>(off_ + n));
    off_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n, "block");
    off_ += n;
  }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n), "integer");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[off_ + i]) << (8 * i);
    off_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<std::uint8_t> buf_;
  std::size_t off_ = 0;
};

}  // namespace todsynth::detail
