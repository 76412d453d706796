#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace maladv {

using Rng = std::mt19937_64;

/// Independent generator for the stream identified by (seed, ids...).
/// Used to give each candidate/attack cell its own reproducible sequence
/// regardless of scheduling order.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * stream.size());
  auto push = [&words](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (auto id : stream) push(id);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

inline std::uint8_t random_byte(Rng& rng) {
  return static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 255)(rng));
}

}  // namespace maladv
