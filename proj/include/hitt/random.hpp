#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace hitt {

// Deterministic random stream. The engine (mt19937_64) has a fully
// specified output sequence; the distributions are derived here by hand so
// values never depend on the standard library's implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 24-bit resolution (exact in f32).
    float uniform() {
        return static_cast<float>(eng_() >> 40) * 0x1p-24f;
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Modulo bias is irrelevant at these ranges.
    int uniform_int(int n) {
        return static_cast<int>(eng_() % static_cast<std::uint64_t>(n));
    }

    bool bernoulli(float p) { return uniform() < p; }

    // Box-Muller; second value cached.
    float normal(float mean, float stddev) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * static_cast<float>(spare_);
        }
        const double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1p-53;
        const double u2 = static_cast<double>(eng_() >> 11) * 0x1p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return mean + stddev * static_cast<float>(r * std::cos(a));
    }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            const int j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)],
                      v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace hitt
