#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vlci {

// Row-major throughout: rows are tokens/samples, columns are feature channels.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad config file, bad flag, incompatible checkpoint. CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// Contract violation on shapes/indices/arguments.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite loss or other numerical failure. CLI exit code 3.
struct NumericError : Error {
    using Error::Error;
};

// SplitMix64-based generator. All randomness in the project flows through
// this so that seeded runs are reproducible across platforms and standard
// libraries (std:: distributions do not guarantee identical streams).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    int uniform_int(int lo, int hi) {  // inclusive range [lo, hi]
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename V>
    void shuffle(std::vector<V>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // Independent stream for a sub-task; advances this generator once.
    Rng fork() { return Rng(next_u64()); }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

// Compensated accumulation for long probability sums.
class KahanSum {
public:
    void add(double x) {
        const double y = x - carry_;
        const double t = sum_ + y;
        carry_ = (t - sum_) - y;
        sum_ = t;
    }
    double value() const { return sum_; }

private:
    double sum_ = 0.0;
    double carry_ = 0.0;
};

template <typename T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

}  // namespace vlci
