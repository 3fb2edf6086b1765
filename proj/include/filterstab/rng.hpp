#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "filterstab/core.hpp"

namespace filterstab {

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

/// Deterministic seed for (master, role, index). Each component goes through a
/// splitmix64 round so neighbouring indices and similar role labels land far
/// apart.
inline Seed derive_seed(Seed master, std::string_view role, std::uint64_t index) {
  std::uint64_t h = detail::splitmix64(master);
  h = detail::splitmix64(h ^ detail::fnv1a(role));
  h = detail::splitmix64(h ^ detail::splitmix64(index + 0x632BE59BD9B4E019ull));
  return h;
}

using Engine = std::mt19937_64;

inline Engine make_engine(Seed seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  return Engine(seq);
}

inline void fill_standard_normal(Engine& eng, Eigen::Ref<Eigen::VectorXd> out) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = normal(eng);
}

}  // namespace filterstab
