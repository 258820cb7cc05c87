#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

// Portable draws on top of std::mt19937_64. The standard distributions are
// implementation-defined, so seeded artifacts would differ across standard
// libraries if we used them.
namespace gradsae::rng {

using Engine = std::mt19937_64;

inline std::size_t uniform_index(Engine& e, std::size_t n) { return n == 0 ? 0 : static_cast<std::size_t>(e() % n); }

// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Engine& e) { return static_cast<double>(e() >> 11) * 0x1.0p-53; }

inline double normal(Engine& e) {
  double u1 = uniform01(e);
  while (u1 <= 0.0) u1 = uniform01(e);
  const double u2 = uniform01(e);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <class T>
void shuffle(std::vector<T>& v, Engine& e) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = uniform_index(e, i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace gradsae::rng
