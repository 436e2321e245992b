#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace enp {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Deterministic random stream. mt19937_64 has a standardized sequence and all
// transforms below are implemented here rather than via std distributions, so
// identical seeds give identical draws on every platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller, second value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n). n must be > 0.
  std::size_t index(std::size_t n) {
    std::size_t i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return i >= n ? n - 1 : i;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream_id) {
  std::uint64_t x = master + 0x9E3779B97F4A7C15ULL * (stream_id + 1);
  return splitmix64(x);
}

// The four independent streams used by training. Keeping SGLD draws on their
// own stream lets the lambda_s = 0 run consume exactly the same env/init/
// shuffle sequences as a BC run.
struct RngSet {
  RngStream env;
  RngStream init;
  RngStream sgld;
  RngStream shuffle;

  static RngSet from_seed(std::uint64_t master) {
    return RngSet{RngStream(derive_seed(master, 0)), RngStream(derive_seed(master, 1)),
                  RngStream(derive_seed(master, 2)), RngStream(derive_seed(master, 3))};
  }
};

}  // namespace enp
