#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace ptqlab {

std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::span<const std::uint8_t> data, std::uint64_t h = 0xcbf29ce484222325ULL);
// 16 lowercase hex digits.
std::string hex64(std::uint64_t v);

}  // namespace ptqlab
