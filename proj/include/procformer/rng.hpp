#pragma once

#include <cstdint>
#include <vector>

namespace procformer {

/// Splittable counter-based pseudo-random generator (SplitMix64 finalizer
/// applied to key + counter). Output depends only on (seed, split path,
/// draw index), so every consumer is reproducible independent of thread
/// count or evaluation order elsewhere in the program.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(mix64(seed + kGamma)) {}

    /// Derive an independent stream. Children with distinct ids never
    /// collide with each other or with the parent.
    Rng split(uint64_t stream_id) const {
        Rng child(0);
        child.key_ = mix64(key_ ^ mix64(stream_id * kGamma + 0x632BE59BD9B4E019ull));
        child.ctr_ = 0;
        return child;
    }

    uint64_t next_u64() { return mix64(key_ + (++ctr_) * kGamma); }

    /// Uniform in [0, 1) with 53 bits of precision.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Unbiased integer in [0, n) via rejection sampling.
    uint64_t below(uint64_t n) {
        for (;;) {
            const uint64_t v = next_u64();
            const uint64_t r = v % n;
            if (v - r <= ~uint64_t{0} - (n - 1)) return r;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;

    static uint64_t mix64(uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    uint64_t key_;
    uint64_t ctr_ = 0;
};

} // namespace procformer
