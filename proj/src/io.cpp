#include "vim/io.hpp"

#include <fstream>

#include "vim/digest.hpp"

namespace vim {

void write_file(const std::filesystem::path& path,
                std::span<const std::byte> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open: " + path.string());
  std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<std::byte> bytes(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw IoError("read failed: " + path.string());
  return bytes;
}

std::vector<std::byte> TensorContainer::serialize() const {
  ByteWriter w;
  w.magic("VIMT");
  w.u32(kVersion);
  w.str(kind);
  w.str(meta_json);
  w.u32(static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) write_tensor_entry(w, name, t);
  uint64_t sum = fnv1a64(w.bytes());
  w.u64(sum);
  return w.take();
}

TensorContainer TensorContainer::deserialize(
    std::span<const std::byte> bytes) {
  if (bytes.size() < 8) throw FormatError("truncated file");
  uint64_t stored;
  {
    ByteReader tail(bytes.subspan(bytes.size() - 8));
    stored = tail.u64();
  }
  std::span<const std::byte> body = bytes.subspan(0, bytes.size() - 8);
  if (fnv1a64(body) != stored) throw FormatError("checksum mismatch");

  ByteReader r(body);
  r.expect_magic("VIMT");
  uint32_t version = r.u32();
  if (version > kVersion) {
    throw FormatError("unsupported format_version " + std::to_string(version));
  }
  TensorContainer c;
  c.kind = r.str();
  c.meta_json = r.str();
  uint32_t n = r.u32();
  c.tensors.reserve(n);
  for (uint32_t i = 0; i < n; ++i) c.tensors.push_back(read_tensor_entry(r));
  if (r.remaining() != 0) throw FormatError("trailing bytes in container");
  return c;
}

void TensorContainer::save(const std::filesystem::path& path) const {
  write_file(path, serialize());
}

TensorContainer TensorContainer::load(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return deserialize(bytes);
}

}  // namespace vim
