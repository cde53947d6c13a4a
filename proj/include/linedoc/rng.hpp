#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

// Hand-rolled deterministic RNG. std::mt19937 + distributions are
// implementation-defined across standard libraries; everything here is
// fully specified so runs reproduce bit-for-bit on any platform.
namespace linedoc {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Mix several seeds into one stream key.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a;
  (void)splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
  return s;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // warm up so nearby seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform integer in [lo, hi] inclusive
  int64_t next_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  bool next_bool(double p) { return next_double() < p; }

  // standard normal via Box-Muller
  double next_normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Fisher-Yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in increasing order
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> all(n);
    for (int i = 0; i < n; ++i) all[i] = i;
    shuffle(all);
    all.resize(static_cast<size_t>(k < n ? k : n));
    std::sort(all.begin(), all.end());
    return all;
  }

 private:
  uint64_t state_;
};

}  // namespace linedoc
