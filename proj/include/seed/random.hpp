#ifndef SEED_RANDOM_HPP_
#define SEED_RANDOM_HPP_

#include <cstdint>
#include <random>

#include "seed/tensor.hpp"

namespace seed {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

// Normal(0, std) entries rounded to float so they survive checkpointing.
Tensor randn(Shape shape, double std, Rng& rng, bool requires_grad = false);
Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);

}  // namespace seed

#endif  // SEED_RANDOM_HPP_
