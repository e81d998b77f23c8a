#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ilm {

// Scalar type for all numeric buffers. Double by default; define ILM_REAL32
// to build a float32 variant for long experiment runs.
#if defined(ILM_REAL32)
using real = float;
#else
using real = double;
#endif

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

/// Fixed-length sequence of discrete tokens in [0, vocab).
struct Utterance {
  std::vector<int> tokens;

  auto operator<=>(const Utterance&) const = default;
  int size() const { return static_cast<int>(tokens.size()); }
};

/// Deterministic xoshiro256++ stream. Hand-rolled so that runs are
/// bit-reproducible across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix(x);
  }

  uint64_t next() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n == 0) throw ValueError("Rng::below: n must be positive");
    __uint128_t m = static_cast<__uint128_t>(next()) * n;
    auto lo = static_cast<uint64_t>(m);
    if (lo < n) {
      const uint64_t t = (0 - n) % n;
      while (lo < t) {
        m = static_cast<__uint128_t>(next()) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  /// Draw an index from an (approximately normalized) probability vector.
  template <typename T>
  int categorical(const T* probs, int n) {
    const double r = uniform();
    double cum = 0.0;
    for (int i = 0; i < n; ++i) {
      cum += static_cast<double>(probs[i]);
      if (r < cum) return i;
    }
    return n - 1;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices drawn without replacement from [0, n).
  std::vector<int64_t> sample_indices(int64_t n, int64_t k) {
    if (k > n) throw ValueError("Rng::sample_indices: k exceeds n");
    std::vector<int64_t> pool(n);
    for (int64_t i = 0; i < n; ++i) pool[i] = i;
    for (int64_t i = 0; i < k; ++i) {
      const int64_t j = i + static_cast<int64_t>(below(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

  /// Independent substream; does not disturb this stream.
  Rng fork(uint64_t tag) const {
    uint64_t x = s_[0] ^ rotl(tag + 0x9e3779b97f4a7c15ULL, 32) ^ s_[2];
    return Rng(x);
  }

  std::array<uint64_t, 4> state() const { return s_; }

 private:
  static uint64_t splitmix(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> s_;
};

/// Shortest round-trippable decimal form, stable across runs.
inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace ilm
