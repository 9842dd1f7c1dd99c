#include "curvecov/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace curvecov {

namespace {

uint64_t mix(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double to_unit(uint64_t bits) {
  // top 53 bits -> [0,1)
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace

uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double unit_hash(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  uint64_t h = mix(a);
  h = mix(h ^ b);
  h = mix(h ^ c);
  h = mix(h ^ d);
  return to_unit(h);
}

Rng::Rng(uint64_t seed, uint64_t stream) {
  state_ = mix(seed);
  state_ = mix(state_ ^ (0xda3e39cb94b95bdbULL + stream));
}

uint64_t Rng::next_u64() { return splitmix64_next(state_); }

double Rng::uniform() { return to_unit(next_u64()); }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 in (0,1] so log stays finite
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

long Rng::uniform_index(long n) {
  if (n <= 0) throw std::invalid_argument("uniform_index requires n > 0");
  return static_cast<long>((static_cast<unsigned __int128>(next_u64()) *
                            static_cast<unsigned __int128>(n)) >> 64);
}

}  // namespace curvecov
