#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace relax {

/// Named, independent random streams derived from one experiment seed.
///
/// Stream identity is (seed, id) where id is a short label like "train" or
/// "probe". Distinct ids are mixed through splitmix64 so a probe stream can
/// never perturb the training stream.
class RngStream {
public:
  RngStream(std::uint64_t seed, std::string_view id)
      : engine_(mix(seed, id)) {}

  explicit RngStream(std::uint64_t raw_state) : engine_(raw_state) {}

  double uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }

  double normal() {
    return std::normal_distribution<double>(0.0, 1.0)(engine_);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

  static std::uint64_t mix(std::uint64_t seed, std::string_view id) {
    std::uint64_t h = seed;
    for (char c : id) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h = splitmix64(h);
    }
    return splitmix64(h);
  }

private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace relax
