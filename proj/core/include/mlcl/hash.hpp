#ifndef MLCL_HASH_HPP
#define MLCL_HASH_HPP

#include <cstdint>
#include <cstddef>
#include <string>

namespace mlcl {

/// FNV-1a 64-bit. Used for config and parameter fingerprints; not cryptographic.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), seed);
}

/// Fingerprints are rendered as 16 lowercase hex digits.
std::string to_hex64(std::uint64_t v);

/// splitmix64 finalizer; used to derive independent seeds from (base, stream).
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return mix64(base ^ mix64(stream));
}

} // namespace mlcl

#endif
