#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace sdelearn::rng {

// Counter-based random streams: every draw is a pure function of
// (seed, index...) so replicate simulations are reproducible regardless
// of scheduling or thread count.

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t combine(std::uint64_t h, std::uint64_t v) {
  return mix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

inline constexpr std::uint64_t word(std::uint64_t seed, std::uint64_t a,
                                    std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = mix64(seed);
  h = combine(h, a);
  h = combine(h, b);
  h = combine(h, c);
  return h;
}

// Uniform in the open interval (0, 1); never returns 0, safe under log().
inline double to_unit(std::uint64_t w) {
  return (static_cast<double>(w >> 11) + 0.5) * 0x1.0p-53;
}

inline double uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                      std::uint64_t c = 0) {
  return to_unit(word(seed, a, b, c));
}

// Box-Muller pair from one counter key.
inline void normal_pair(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                        std::uint64_t c, double& z0, double& z1) {
  const double u1 = to_unit(word(seed, a, b, c));
  const double u2 = to_unit(word(seed, a, b, c + 0x517cc1b727220a95ULL));
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double phi = 6.283185307179586476925286766559 * u2;
  z0 = r * std::cos(phi);
  z1 = r * std::sin(phi);
}

// Small stateful stream for sequential draws (parameter init, shuffles).
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : key_(mix64(seed)) {}

  std::uint64_t next_u64() { return word(key_, ctr_++); }
  double next_uniform() { return to_unit(next_u64()); }

  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double z0, z1;
    normal_pair(key_, ctr_++, 0, 0, z0, z1);
    spare_ = z1;
    have_spare_ = true;
    return z0;
  }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// In-place Fisher-Yates with a seeded stream (stable across platforms).
template <class T>
void shuffle(std::vector<T>& v, std::uint64_t seed) {
  Stream s(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(s.next_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace sdelearn::rng
