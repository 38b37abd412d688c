#pragma once

// Seeding helpers. Every random draw in the project goes through these so that
// artifacts are bit-identical across standard-library implementations
// (std::*_distribution output is implementation-defined).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace bimag {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Independent stream id for (base seed, counter); used for per-episode,
// per-step and per-sample generators.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(splitmix64(base) ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t base, std::uint64_t stream = 0) {
  return Rng(derive_seed(base, stream));
}

template <typename G>
double uniform01(G& g) {
  return static_cast<double>(g() >> 11) * (1.0 / 9007199254740992.0);
}

template <typename G>
double uniform(G& g, double lo, double hi) {
  return lo + (hi - lo) * uniform01(g);
}

template <typename G>
double standard_normal(G& g) {
  double u1 = uniform01(g);
  while (u1 <= 0.0) u1 = uniform01(g);
  const double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename G>
std::uint64_t uniform_index(G& g, std::uint64_t n) {
  // Multiply-shift; bias is negligible for the small n used here.
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(g()) * n) >> 64);
}

template <typename T, typename G>
void shuffle(std::vector<T>& v, G& g) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(g, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace bimag
