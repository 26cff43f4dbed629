#pragma once

#include <cstdint>

namespace rfga {

// Counter-based generator built on the SplitMix64 finalizer. Every draw is a
// pure function of (seed, stream, counter), so per-index substreams reproduce
// identically under any parallel schedule. No global state anywhere.
class Prng {
  public:
    explicit Prng(uint64_t seed, uint64_t stream = 0)
        : base_(finalize(finalize(seed + kGolden) ^ finalize(stream ^ kStreamSalt))) {}

    uint64_t next_u64() {
        ++counter_;
        return finalize(base_ + counter_ * kGolden);
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), unbiased
    int64_t uniform_int(int64_t n) {
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t threshold = (~uint64_t{0} - un + 1) % un;  // 2^64 mod n
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return static_cast<int64_t>(r % un);
        }
    }

    // inclusive integer range
    int64_t uniform_int(int64_t lo, int64_t hi) { return lo + uniform_int(hi - lo + 1); }

    bool coin() { return (next_u64() & 1u) != 0; }

    // independent stream derived from this one; does not advance the parent
    Prng substream(uint64_t idx) const {
        Prng child(0);
        child.base_ = finalize(base_ ^ finalize(idx + kStreamSalt));
        return child;
    }

  private:
    static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
    static constexpr uint64_t kStreamSalt = 0xD1B54A32D192ED03ull;

    static uint64_t finalize(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    uint64_t base_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace rfga
