#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>

#include "dpsplit/common.hpp"

namespace dpsplit {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  // FNV-1a, folded through splitmix for diffusion.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64_next(h);
}

// Deterministic seed ladder. Every randomized stage of the pipeline draws its
// seed as derive_seed(root, "stage-tag", index...), so any cell or run can be
// reproduced in isolation from the root seed alone.
inline std::uint64_t derive_seed(std::uint64_t root) { return root; }

// Both overloads are declared up front so the recursive calls can alternate
// between numeric and string components in any order.
template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t component, Rest... rest);
template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, Rest... rest);

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t component, Rest... rest) {
  std::uint64_t s = root ^ (0x9e3779b97f4a7c15ULL + component);
  s = splitmix64_next(s);
  return derive_seed(s, rest...);
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, Rest... rest) {
  return derive_seed(root, hash_tag(tag), rest...);
}

// xoshiro256++ with explicit inverse-CDF samplers. std:: distributions are
// implementation-defined, so every draw here goes through our own transforms
// to keep streams reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64_next(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0 (Lemire's multiply-shift with rejection).
  std::uint64_t uniform_index(std::uint64_t n) {
    check(n > 0, "uniform_index needs n > 0");
    std::uint64_t x = next_u64();
    unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        x = next_u64();
        m = static_cast<unsigned __int128>(x) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = std::numeric_limits<double>::min();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Laplace(0, scale) via inverse CDF: u ~ U(-1/2, 1/2),
  // x = -scale * sign(u) * ln(1 - 2|u|).
  double laplace(double scale) {
    check(scale > 0.0, "laplace scale must be positive");
    const double u = uniform() - 0.5;
    if (u == 0.0) return 0.0;
    double t = 1.0 - 2.0 * std::abs(u);
    if (t <= 0.0) t = std::numeric_limits<double>::min();
    const double s = u > 0.0 ? 1.0 : -1.0;
    return -scale * s * std::log(t);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = uniform_index(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  template <typename Container>
  void shuffle(Container& c) {
    shuffle(c.begin(), c.end());
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dpsplit
