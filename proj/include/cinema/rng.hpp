#pragma once

// Deterministic random streams. mt19937_64 is fully specified by the standard,
// but the std distributions are not, so sampling is implemented here to keep
// results bit-identical across platforms.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cinema/common.hpp"

namespace cinema {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Mixes an arbitrary tag list into a single stream seed. Used to derive
// independent per-(epoch, step, item) streams from one experiment seed,
// so training state never depends on generator call order.
inline uint64_t mix_seed(uint64_t seed) { return splitmix64(seed); }
template <class... Rest>
uint64_t mix_seed(uint64_t seed, uint64_t tag, Rest... rest) {
  return mix_seed(splitmix64(seed ^ splitmix64(tag)), rest...);
}

class Rng {
public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n), unbiased via rejection
  int64_t uniform_int(int64_t n) {
    require(n > 0, errc::invalid_argument, "uniform_int: n must be positive");
    uint64_t un = uint64_t(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return int64_t(x % un);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller; u clamped away from 0 so log stays finite
    double u = uniform();
    if (u <= 0.0) u = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u));
    double t = 2.0 * M_PI * uniform();
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // first k entries of a uniformly random permutation of {0..n-1}
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    require(k >= 0 && k <= n, errc::invalid_argument, "sample_without_replacement: k out of range");
    std::vector<int64_t> idx(n);
    for (int64_t i = 0; i < n; ++i) idx[i] = i;
    for (int64_t i = 0; i < k; ++i) {
      int64_t j = i + uniform_int(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[size_t(i)], v[size_t(j)]);
    }
  }

private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cinema
