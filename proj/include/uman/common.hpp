#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace uman {

// Error taxonomy. Everything derives from Error so callers can catch broadly;
// the CLI maps UsageError/IoError to exit 1 and NumericError to exit 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid shapes or mismatched dimensions between operands.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values, failed gradient checks, NaN aborts.
struct NumericError : Error {
    using Error::Error;
};

// Malformed files, truncated payloads, missing paths.
struct IoError : Error {
    using Error::Error;
};

// API misuse and bad configuration (unknown keys, consumed tapes, ...).
struct UsageError : Error {
    using Error::Error;
};

namespace detail {
inline void check(bool cond, const char* what) {
    if (!cond) throw ShapeError(what);
}
}  // namespace detail

// Deterministic RNG used everywhere randomness is needed. Wraps mt19937_64
// and derives all distributions by hand so that streams are identical across
// platforms and standard-library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix(seed)) {}

    // Derive an independent per-item stream, e.g. per dataset sample.
    static Rng derive(std::uint64_t seed, std::uint64_t index) {
        return Rng(splitmix(seed * 0x9e3779b97f4a7c15ull + index + 1));
    }

    std::uint64_t next_u64() {
        // xorshift64* -- tiny, fast, and fully specified here.
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller on the hand-rolled uniform stream.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    bool coin() { return (next_u64() & 1ull) != 0; }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        x = x ^ (x >> 31);
        return x ? x : 0x1ull;
    }

    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace uman
