#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace capst {

// Counter-based splittable generator. Every stochastic choice in the
// artifact (weight init, shuffling, synthetic data) draws from a stream
// derived from (seed, stream name), so results are reproducible and
// independent of evaluation order. State is three u64 words and is
// serialized into checkpoints verbatim.
class Rng {
public:
    Rng() : Rng(0, 0) {}
    Rng(std::uint64_t seed, std::uint64_t stream)
        : seed_(seed), stream_(stream), counter_(0) {}

    // Derive a named substream; the parent is not advanced.
    Rng split(std::string_view name) const {
        return Rng(seed_, mix(stream_ ^ fnv1a(name)));
    }
    Rng split(std::uint64_t n) const { return Rng(seed_, mix(stream_ ^ n)); }

    std::uint64_t next_u64() {
        std::uint64_t x = seed_ + 0x9e3779b97f4a7c15ull * (counter_++ + 1);
        x ^= stream_ * 0xbf58476d1ce4e5b9ull;
        return mix(x);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) {
        // Rejection-free modulo is fine here; n is tiny relative to 2^64.
        return next_u64() % n;
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }
    std::uint64_t counter() const { return counter_; }
    void restore(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
        seed_ = seed;
        stream_ = stream;
        counter_ = counter;
    }

private:
    static std::uint64_t mix(std::uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return x;
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_;
};

}  // namespace capst
