#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "uvlm/common.hpp"

namespace uvlm::io {

// All on-disk integers and reals are little-endian regardless of host order.

inline void write_u8(std::ostream& os, uint8_t v) { os.put(char(v)); }

inline void write_u16(std::ostream& os, uint16_t v) {
  for (int i = 0; i < 2; ++i) os.put(char((v >> (8 * i)) & 0xff));
}

inline void write_u32(std::ostream& os, uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(char((v >> (8 * i)) & 0xff));
}

inline void write_u64(std::ostream& os, uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(char((v >> (8 * i)) & 0xff));
}

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<uint32_t>(v)); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

class Reader {
 public:
  Reader(std::istream& is, std::string origin) : is_(is), origin_(std::move(origin)) {}

  uint8_t u8() {
    int c = is_.get();
    if (c == EOF) fail("unexpected end of file");
    ++offset_;
    return uint8_t(c);
  }

  uint16_t u16() {
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v = uint16_t(v | (uint16_t(u8()) << (8 * i)));
    return v;
  }

  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(u8()) << (8 * i);
    return v;
  }

  uint64_t u64() {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(u8()) << (8 * i);
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  void f32_block(float* dst, size_t n) {
    std::vector<char> buf(n * 4);
    is_.read(buf.data(), std::streamsize(buf.size()));
    if (size_t(is_.gcount()) != buf.size()) fail("unexpected end of file");
    offset_ += buf.size();
    for (size_t i = 0; i < n; ++i) {
      uint32_t v = 0;
      for (int b = 0; b < 4; ++b) v |= uint32_t(uint8_t(buf[i * 4 + size_t(b)])) << (8 * b);
      dst[i] = std::bit_cast<float>(v);
    }
  }

  std::string str() {
    uint32_t n = u32();
    if (n > (1u << 20)) fail("string length " + std::to_string(n) + " implausibly large");
    std::string s(n, '\0');
    for (auto& c : s) c = char(u8());
    return s;
  }

  void expect_magic(const char (&magic)[5]) {
    size_t at = offset_;
    char got[4];
    for (char& c : got) c = char(u8());
    if (std::string(got, 4) != std::string(magic, 4))
      fail("bad magic at offset " + std::to_string(at) + ": expected \"" + magic + "\", got \"" +
           std::string(got, 4) + "\"");
  }

  size_t offset() const { return offset_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(origin_ + " (offset " + std::to_string(offset_) + "): " + what);
  }

  bool at_eof() { return is_.peek() == EOF; }

 private:
  std::istream& is_;
  std::string origin_;
  size_t offset_ = 0;
};

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + path.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + path.string());
  return is;
}

// ---------------------------------------------------------------------------
// Visual payload files: magic "UVLM", version u16, rank u8, dims u32 each,
// then 32-bit reals row-major. Videos carry a leading T dimension.
// ---------------------------------------------------------------------------

constexpr uint16_t kPayloadVersion = 1;

struct Payload {
  std::vector<int> dims;  // rank 3 = H,W,C image; rank 4 = T,H,W,C video
  std::vector<float> values;
};

inline void write_payload(const std::filesystem::path& path, const Payload& p) {
  require(p.dims.size() == 3 || p.dims.size() == 4,
          "payload rank must be 3 or 4, got " + std::to_string(p.dims.size()));
  size_t numel = 1;
  for (int d : p.dims) {
    require(d > 0, "payload dimensions must be positive");
    numel *= size_t(d);
  }
  require(numel == p.values.size(), "payload value count does not match dims");
  std::ofstream os = open_out(path);
  os.write("UVLM", 4);
  write_u16(os, kPayloadVersion);
  write_u8(os, uint8_t(p.dims.size()));
  for (int d : p.dims) write_u32(os, uint32_t(d));
  for (float v : p.values) write_f32(os, v);
  if (!os) throw Error("short write: " + path.string());
}

inline Payload read_payload(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  Reader r(is, path.string());
  r.expect_magic("UVLM");
  uint16_t version = r.u16();
  if (version != kPayloadVersion)
    r.fail("unsupported payload version " + std::to_string(version));
  uint8_t rank = r.u8();
  if (rank != 3 && rank != 4) r.fail("payload rank must be 3 or 4, got " + std::to_string(rank));
  Payload p;
  size_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    uint32_t d = r.u32();
    if (d == 0 || d > (1u << 16)) r.fail("implausible dimension " + std::to_string(d));
    p.dims.push_back(int(d));
    numel *= d;
  }
  p.values.resize(numel);
  r.f32_block(p.values.data(), numel);
  if (!r.at_eof()) r.fail("trailing bytes after payload data");
  return p;
}

}  // namespace uvlm::io
