#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace calliope {

/// Deterministic random stream. mt19937_64 is fully specified by the
/// standard; the uniform/normal transforms are hand-rolled so that two
/// builds of this project draw identical sequences from the same seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0,1), 53-bit resolution.
  double uniform();
  /// Standard normal via Box-Muller (pairs cached).
  double normal();
  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(0, i)]);
    }
  }

  /// Combines a seed with a stream tag into a fresh substream seed.
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace calliope
