#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "stkit/matrix.hpp"

namespace stkit {

// Seeded RNG built on mt19937_64 (whose output stream is standardized) with
// hand-rolled uniform/normal transforms, so a given seed produces the same
// stream on every platform and standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive range. Modulo bias is irrelevant at the sizes used here.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    double normal(double mean = 0.0, double sd = 1.0) {
        if (has_cached_) {
            has_cached_ = false;
            return mean + sd * cached_;
        }
        // Box-Muller; uniform() can return 0, so flip to (0, 1].
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return mean + sd * r * std::cos(theta);
    }

    Matrix gaussian(std::size_t rows, std::size_t cols, double sd) {
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < m.size(); ++i) m.raw()[i] = normal(0.0, sd);
        return m;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = gen_() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

} // namespace stkit
