#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace uniap::numkit {

// Counter-based generator: every draw is a pure function of (key, counter).
// Streams are split by name so sampling sites stay reproducible regardless
// of the order other sites consume randomness.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::string_view name)
        : key_(mix(seed ^ 0x9e3779b97f4a7c15ull, fnv1a(name))), counter_(0) {}

    RngStream split(std::string_view name) const {
        RngStream s(*this);
        s.key_ = mix(key_, fnv1a(name));
        s.counter_ = 0;
        return s;
    }

    std::uint64_t next_u64() { return mix(key_, counter_++); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // Box-Muller; consumes two counter slots.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // Normal truncated to +-2 std, the usual ViT init.
    double trunc_normal(double std) {
        for (;;) {
            double v = normal();
            if (std::fabs(v) <= 2.0) return v * std;
        }
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }
    void restore(std::uint64_t key, std::uint64_t counter) {
        key_ = key;
        counter_ = counter;
    }

private:
    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    // splitmix64 finalizer over key+counter
    static std::uint64_t mix(std::uint64_t key, std::uint64_t ctr) {
        std::uint64_t z = key + 0x9e3779b97f4a7c15ull * (ctr + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_;
};

}  // namespace uniap::numkit
