#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uvlm {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad argument, missing precondition, malformed request. The CLI maps these
// to exit code 1 (usage error).
struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& msg) : Error(msg) {}
};

// Corrupt or mismatched file content (bad magic, truncation, unknown names).
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// A checked numeric operation produced NaN or infinity. Carries the name of
// the operation that failed.
struct NumericFault : Error {
  NumericFault(const std::string& op, const std::string& detail)
      : Error(op + ": " + detail), op_name(op) {}
  std::string op_name;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

// Deterministic, serializable RNG (PCG32, O'Neill). std::mt19937 is avoided
// on purpose: distribution implementations differ between standard libraries,
// and checkpoints carry this state as two u64 words.
class Rng {
 public:
  Rng() : Rng(0x853c49e6748fea9bULL) {}
  explicit Rng(uint64_t seed, uint64_t seq = 0xda3e39cb94b95bdbULL) { reseed(seed, seq); }

  void reseed(uint64_t seed, uint64_t seq = 0xda3e39cb94b95bdbULL) {
    state_ = 0;
    inc_ = (seq << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  uint64_t next_u64() {
    uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform in [0, n).
  uint32_t below(uint32_t n) {
    // rejection sampling keeps the distribution exact
    uint32_t threshold = (-n) % n;
    for (;;) {
      uint32_t r = next_u32();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform in [0, 1) with 24 bits of precision.
  double uniform() { return (next_u32() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, no cached spare so the state stays two words.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Fisher-Yates permutation driven by below().
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[size_t(below(uint32_t(i)))]);
  }

  // Normal truncated at +/-2 sigma, resampled.
  double truncated_normal(double sigma) {
    for (;;) {
      double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * sigma;
    }
  }

  uint64_t state() const { return state_; }
  uint64_t inc() const { return inc_; }
  void restore(uint64_t state, uint64_t inc) {
    state_ = state;
    inc_ = inc;
  }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 0;
};

// splitmix64; used to derive independent child seeds (per record, per shard)
// so output does not depend on how work is divided.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace uvlm
