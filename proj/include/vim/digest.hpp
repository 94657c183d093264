#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vim {

// SHA-256 hex digest (via OpenSSL). Used for backbone fingerprints and
// module duplicate detection.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(const std::vector<std::byte>& bytes);

// FNV-1a 64-bit checksum. Used as the whole-file corruption check in the
// container formats; not collision resistant and not meant to be.
uint64_t fnv1a64(std::span<const std::byte> bytes);

}  // namespace vim
