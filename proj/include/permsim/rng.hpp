#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace permsim {

/* Mixing function used to derive independent seed streams from a base
 * seed plus arbitrary tags (user index, day index, ...).  */
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/* mt19937_64 with hand-rolled variate transforms.  The engine output is
 * pinned by the standard; the <random> distributions are not, and golden
 * file tests require byte-identical streams across toolchains.  */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return eng_(); }

  /* [0, 1) with 53 random bits. */
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /* [0, n) without modulo bias (rejection). */
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double exponential(double rate) {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return -std::log(u) / rate;
  }

  double normal(double mu, double sigma) {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    return mu + sigma * z;
  }

  /* Knuth multiplication method; for large lambda falls back to a
   * rounded normal, which is fine at the rates used here.  */
  std::uint64_t poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda > 200.0) {
      double v = normal(lambda, std::sqrt(lambda));
      return v < 0.0 ? 0 : static_cast<std::uint64_t>(v + 0.5);
    }
    double l = std::exp(-lambda);
    std::uint64_t k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > l);
    return k - 1;
  }

  /* Weighted index draw; weights need not be normalized. */
  std::size_t weighted_index(const std::vector<double>& w) {
    double total = 0.0;
    for (double v : w) total += v;
    double r = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (r < acc) return i;
    }
    return w.empty() ? 0 : w.size() - 1;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace permsim
