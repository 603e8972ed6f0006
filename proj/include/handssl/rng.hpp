#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace handssl {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// A seeded random stream. All draws are stateless functions of the engine
// output, so the engine state is the complete stream state (normal() does
// not cache a spare value the way std::normal_distribution does).
class RngStream {
 public:
  RngStream() : eng_(0) {}
  explicit RngStream(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform01() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("RngStream::uniform: lo > hi");
    return lo + (hi - lo) * uniform01();
  }

  // Uniform integer in [0, n).
  uint64_t uniform_index(uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngStream::uniform_index: n == 0");
    // Rejection sampling to avoid modulo bias.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return r % n;
  }

  // Box-Muller without caching the second value.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = size_t(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw std::runtime_error("RngStream::load_state: bad state string");
  }

  bool operator==(const RngStream& other) const { return eng_ == other.eng_; }

 private:
  std::mt19937_64 eng_;
};

// Derives an independent stream for a named subsystem from one root seed.
inline RngStream derive_stream(uint64_t root_seed, std::string_view name) {
  return RngStream(splitmix64(splitmix64(root_seed) ^ fnv1a64(name)));
}

}  // namespace handssl
