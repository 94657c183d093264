#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vim/tensor.hpp"

namespace vim {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// All container formats are little-endian with length-prefixed strings and
// no alignment padding. The writer/reader pair below is the single place
// that knows the byte-level encoding.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<std::byte>(v)); }

  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i)
      buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
  }

  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i)
      buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
  }

  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    for (char c : s) buf_.push_back(static_cast<std::byte>(c));
  }

  void raw(std::span<const std::byte> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }

  void magic(const char (&m)[5]) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::byte>(m[i]));
  }

  const std::vector<std::byte>& bytes() const { return buf_; }
  std::vector<std::byte> take() { return std::move(buf_); }
  size_t size() const { return buf_.size(); }

 private:
  std::vector<std::byte> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(bytes_[pos_++]);
  }

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void expect_magic(const char (&m)[5]) {
    need(4);
    for (int i = 0; i < 4; ++i) {
      if (static_cast<char>(bytes_[pos_ + i]) != m[i])
        throw FormatError(std::string("bad magic, expected ") + m);
    }
    pos_ += 4;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("truncated file");
  }

  std::span<const std::byte> bytes_;
  size_t pos_ = 0;
};

// One named-tensor entry: name, rank, extents as u32, raw f32 payload.
inline void write_tensor_entry(ByteWriter& w, const std::string& name,
                               const Tensor& t) {
  w.str(name);
  w.u32(static_cast<uint32_t>(t.shape.size()));
  for (int64_t e : t.shape) w.u32(static_cast<uint32_t>(e));
  for (float v : t.data) w.f32(v);
}

inline std::pair<std::string, Tensor> read_tensor_entry(ByteReader& r) {
  std::string name = r.str();
  uint32_t rank = r.u32();
  if (rank > 8) throw FormatError("tensor rank out of range: " + name);
  Shape shape;
  int64_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t e = r.u32();
    if (e == 0) throw FormatError("zero extent in tensor: " + name);
    shape.push_back(static_cast<int64_t>(e));
    n *= e;
  }
  std::vector<float> data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = r.f32();
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

void write_file(const std::filesystem::path& path,
                std::span<const std::byte> bytes);
std::vector<std::byte> read_file(const std::filesystem::path& path);

// Generic named-tensor container ("VIMT"): used for backbone checkpoints,
// task heads, provider parameters and dataset dumps. Same tensor-entry
// encoding and checksum footer as the zoo container.
struct TensorContainer {
  static constexpr uint32_t kVersion = 1;

  std::string kind;       // e.g. "backbone", "head", "dataset"
  std::string meta_json;  // free-form metadata, may be empty
  std::vector<std::pair<std::string, Tensor>> tensors;

  std::vector<std::byte> serialize() const;
  static TensorContainer deserialize(std::span<const std::byte> bytes);

  void save(const std::filesystem::path& path) const;
  static TensorContainer load(const std::filesystem::path& path);

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

}  // namespace vim
