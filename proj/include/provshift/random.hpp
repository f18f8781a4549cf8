#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace provshift {

using Rng = std::mt19937_64;

// Stream splitting: every consumer of randomness (model init, batching,
// per-cell sampling, ...) gets its own engine seeded from a base seed and a
// tag, so adding a consumer never perturbs another consumer's stream.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);
inline Rng make_rng(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
  return Rng(derive_seed(base, tag, index));
}

// Uniform in [0, 1) from the top 53 bits of one engine draw.
double uniform01(Rng& rng);
double sample_beta(Rng& rng, double a, double b);

}  // namespace provshift
