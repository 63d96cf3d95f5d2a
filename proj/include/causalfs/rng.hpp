#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace causalfs {

// splitmix64 step; used to derive independent substream seeds from (seed, stream id).
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed;
  std::uint64_t a = splitmix64(s);
  s ^= stream * 0x9e3779b97f4a7c15ull + 0x7f4a7c15ull;
  std::uint64_t b = splitmix64(s);
  return a ^ (b + 0x632be59bd9b4e019ull + (stream << 1));
}

// Deterministic RNG. All distribution logic is implemented here (not via std::
// distributions) so that streams are bit-identical across platforms and compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  Rng(std::uint64_t seed, std::uint64_t stream) : engine_(derive_stream_seed(seed, stream)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, n). Rejection sampling keeps the distribution exactly uniform.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::next_below: n must be positive");
    std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int next_int(int lo, int hi) {  // inclusive bounds
    if (lo > hi) throw std::invalid_argument("Rng::next_int: lo > hi");
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi) - lo + 1));
  }

  // Uniform in [0, 1) with 53 random bits.
  double real01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double real(double lo, double hi) { return lo + (hi - lo) * real01(); }

  // Standard normal via Box-Muller (both values used, deterministic order).
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = real01(), u2 = real01();
    while (u1 <= 0.0) u1 = real01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  bool bernoulli(double p) { return real01() < p; }

  // First k elements of a uniformly random permutation of items (partial Fisher-Yates).
  template <typename T>
  std::vector<T> sample_without_replacement(const std::vector<T>& items, std::size_t k) {
    if (k > items.size())
      throw std::invalid_argument("sample_without_replacement: k=" + std::to_string(k) +
                                  " exceeds population " + std::to_string(items.size()));
    std::vector<T> pool = items;
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(next_below(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    if (items.empty()) return;
    for (std::size_t i = items.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i + 1));
      std::swap(items[i], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

// Named substreams so consumers can't accidentally couple their draws.
namespace stream {
inline constexpr std::uint64_t kInit = 0x11;
inline constexpr std::uint64_t kEpisodes = 0x22;
inline constexpr std::uint64_t kAugment = 0x33;
inline constexpr std::uint64_t kDataset = 0x44;
inline constexpr std::uint64_t kEval = 0x55;
inline constexpr std::uint64_t kScm = 0x66;
}  // namespace stream

}  // namespace causalfs
