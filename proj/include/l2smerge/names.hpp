// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace l2smerge {

inline constexpr std::uint64_t fnv1a64_offset = 0xcbf29ce484222325ull;
inline constexpr std::uint64_t fnv1a64_prime = 0x100000001b3ull;

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = fnv1a64_offset) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= fnv1a64_prime;
    }
    return h;
}

inline std::uint64_t fnv1a64_bytes(std::span<const std::uint8_t> bytes, std::uint64_t h = fnv1a64_offset) {
    for (std::uint8_t c : bytes) {
        h ^= c;
        h *= fnv1a64_prime;
    }
    return h;
}

/// Shell-style glob (`*`, `?`, `[...]`); `*` also matches '.'.
bool glob_match(std::string_view pattern, std::string_view text);

bool matches_any(const std::vector<std::string>& patterns, std::string_view text);

} // namespace l2smerge
