#ifndef NCA_RNG_HPP
#define NCA_RNG_HPP

#include <cmath>
#include <cstdint>

namespace nca {

/// Deterministic, portable random stream.
///
/// Algorithm (pinned, do not change — checkpoints and tests depend on it):
///   * Generator: PCG32 (pcg-random.org), the XSH-RR 64/32 variant.
///     state' = state * 6364136223846793005 + inc   (inc odd)
///     output = rotr32(uint32((state ^ (state >> 18)) >> 27), state >> 59)
///   * Stream derivation: SplitMix64. A stream for ids (a,b,c) under seed s is
///     obtained by folding each id into the key: k = splitmix64(k ^ (id + GOLDEN)),
///     starting from k = splitmix64(s). PCG32 is then seeded with
///     state = splitmix64(k), inc = (splitmix64(k + GOLDEN) << 1) | 1.
///   * float01: next_u32() >> 8, scaled by 2^-24 — uniform in [0,1).
///
/// Identical seeds and ids produce identical streams on every platform; only
/// integer arithmetic and IEEE-754 single/double multiplies are involved.
class Rng {
  public:
    explicit Rng(uint64_t seed) : Rng(FromKey{}, splitmix64(seed)) {}

    /// Independent child stream for a hierarchical id tuple, e.g.
    /// (epoch, batch, replicate). Does not advance this stream.
    Rng derive(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
        uint64_t k = key_;
        k = splitmix64(k ^ (a + GOLDEN));
        k = splitmix64(k ^ (b + GOLDEN));
        k = splitmix64(k ^ (c + GOLDEN));
        return Rng(FromKey{}, k);
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    /// Uniform in [0,1) with 24 random bits.
    float next_float01() { return static_cast<float>(next_u32() >> 8) * 0x1.0p-24f; }

    /// Uniform in (0,1), never exactly 0 — safe under log().
    double next_open01() { return (static_cast<double>(next_u32() >> 8) + 0.5) * 0x1.0p-24; }

    template <typename S>
    S uniform(S lo, S hi) {
        return lo + (hi - lo) * static_cast<S>(next_float01());
    }

    /// Inclusive range. Modulo bias is < 2^-25 for the ranges used here.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u32() % static_cast<uint32_t>(hi - lo + 1));
    }

    bool bernoulli(float p) { return next_float01() < p; }

    /// Standard normal via Box-Muller; draws two uniforms per call.
    template <typename S>
    S normal() {
        double u1 = next_open01();
        double u2 = next_open01();
        return static_cast<S>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2));
    }

    static uint64_t splitmix64(uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

  private:
    static constexpr uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL;
    struct FromKey {};
    Rng(FromKey, uint64_t k) : key_(k), state_(splitmix64(k)), inc_((splitmix64(k + GOLDEN) << 1u) | 1u) {
        next_u32();
    }

    uint64_t key_ = 0;
    uint64_t state_ = 0;
    uint64_t inc_ = 1;
};

}  // namespace nca

#endif
