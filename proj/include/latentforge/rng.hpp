#ifndef LATENTFORGE_RNG_HPP
#define LATENTFORGE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace lf {

// Deterministic RNG with explicit distributions. std::mt19937_64 drives the
// stream, but uniform/normal draws are derived here rather than through
// std::*_distribution, whose output is implementation-defined. State is
// serializable so a resumed run continues the exact stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    // Uniform in [0, 1).
    double uniform() {
        // 53-bit mantissa construction.
        const std::uint64_t bits = engine_() >> 11u;
        return static_cast<double>(bits) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) {
            return 0;
        }
        // Rejection sampling keeps the result unbiased.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = engine_();
        while (v >= limit) {
            v = engine_();
        }
        return v % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) {
            return;
        }
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    std::string serialize() const;
    static Rng deserialize(const std::string& text);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lf

#endif
