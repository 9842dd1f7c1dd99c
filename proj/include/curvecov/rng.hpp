#pragma once

#include <cstdint>

namespace curvecov {

// All randomness in the project flows through these generators so that
// results are reproducible bit-for-bit from a single seed. Standard-library
// distributions are avoided on purpose: their output is implementation
// defined, which would break the determinism contract of the CLI.

uint64_t splitmix64_next(uint64_t& state);

// Stateless counter-based draw in [0,1); used for per-(t,i,j) edge factors.
double unit_hash(uint64_t a, uint64_t b, uint64_t c, uint64_t d);

class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0);

  uint64_t next_u64();
  double uniform();                 // [0, 1)
  double uniform(double lo, double hi);
  double normal();                  // standard normal via Box-Muller
  long uniform_index(long n);       // [0, n), unbiased

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace curvecov
