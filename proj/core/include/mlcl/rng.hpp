#ifndef MLCL_RNG_HPP
#define MLCL_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

#include "mlcl/hash.hpp"

namespace mlcl {

/// Deterministic random source. mt19937_64 output is pinned by the standard,
/// but the standard distributions are not, so all sampling is done here.
/// Identical seeds give identical streams on every platform and stdlib.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling, unbiased.
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; the spare value is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Derive an independent sub-stream without disturbing this stream's state.
    Rng fork(std::uint64_t stream) const {
        return Rng(derive_seed(state_hash(), stream));
    }

    /// In-place Fisher-Yates shuffle (portable, unlike std::shuffle).
    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_hash() const {
        // Hash a copy's next outputs so fork() is a pure function of state.
        std::mt19937_64 copy = gen_;
        return mix64(copy() ^ mix64(copy()));
    }

    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace mlcl

#endif
