#include "vim/digest.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace vim {

std::string sha256_hex(std::span<const std::byte> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &md_len, EVP_sha256(),
                 nullptr) != 1) {
    throw std::runtime_error("sha256: EVP_Digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(md_len * 2);
  for (unsigned int i = 0; i < md_len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(const std::vector<std::byte>& bytes) {
  return sha256_hex(std::span<const std::byte>(bytes.data(), bytes.size()));
}

uint64_t fnv1a64(std::span<const std::byte> bytes) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (std::byte b : bytes) {
    h ^= static_cast<uint64_t>(b);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace vim
