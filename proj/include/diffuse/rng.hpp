#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace diffuse {

/// SplitMix64 finalizer. Used to derive independent stream seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Seed for item `index` of a stream rooted at `base` (seed_i = hash(base, i)).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept;

/// Seed for a named sub-stream, e.g. derive_seed(seed, "split").
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) noexcept;

/// FNV-1a over raw bytes; used for manifest and parameter fingerprints.
std::uint64_t fnv1a(std::span<const std::byte> bytes,
                    std::uint64_t h = 0xcbf29ce484222325ULL) noexcept;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  /// Uniform on [0, 1).
  double uniform() { return uniform_(engine_); }
  /// Uniform on (0, 1]; safe for negative powers.
  double uniform_pos() { return 1.0 - uniform_(engine_); }
  double exponential() { return -std::log(uniform_pos()); }
  bool coin() { return uniform_(engine_) < 0.5; }
  /// Uniform integer on [lo, hi].
  std::uint64_t integer(std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace diffuse
