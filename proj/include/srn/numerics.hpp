#pragma once

// Dense vectors/matrices, stable scalar functions, a portable RNG and a
// central-difference gradient oracle. Everything is double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace srn {

class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
    Vector(std::initializer_list<double> values) : data_(values) {}
    explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> span() noexcept { return data_; }
    std::span<const double> span() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Vector&) const = default;

private:
    std::vector<double> data_;
};

/// Row-major dense matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> span() noexcept { return data_; }
    std::span<const double> span() const noexcept { return data_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    bool is_zero() const {
        return std::all_of(data_.begin(), data_.end(), [](double x) { return x == 0.0; });
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// out += M * x
inline void gemv_acc(const Matrix& m, std::span<const double> x, std::span<double> out) {
    for (std::size_t r = 0; r < m.rows(); ++r) out[r] += dot(m.row(r), x);
}

// out += M^T * x
inline void gemv_t_acc(const Matrix& m, std::span<const double> x, std::span<double> out) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double xr = x[r];
        if (xr == 0.0) continue;
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) out[c] += xr * row[c];
    }
}

// M += a * b^T
inline void outer_acc(Matrix& m, std::span<const double> a, std::span<const double> b) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double ar = a[r];
        if (ar == 0.0) continue;
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) row[c] += ar * b[c];
    }
}

inline bool all_finite(std::span<const double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Random numbers

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent child seed from a root seed and a role tag
/// (FNV-1a of the tag mixed into the root, then one splitmix64 round).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : tag) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::uint64_t state = root ^ h;
    return splitmix64(state);
}

/// xoshiro256** seeded through splitmix64. The draw sequence depends only on
/// the seed, never on the platform's standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& s : s_) s = splitmix64(sm);
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform on [0, 1).
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer on [0, n). Rejection sampling keeps it unbiased.
    std::size_t index(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::index: empty range");
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<std::size_t>(x % bound);
    }

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t seed_;
    std::uint64_t s_[4]{};
};

// ---------------------------------------------------------------------------

inline Matrix uniform_init(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
    if (!std::isfinite(lo) || !std::isfinite(hi))
        throw std::invalid_argument("uniform_init: bounds must be finite");
    if (!(lo < hi)) throw std::invalid_argument("uniform_init: require lo < hi");
    Matrix m(rows, cols);
    for (auto& x : m.span()) x = rng.uniform(lo, hi);
    return m;
}

/// Logistic function in the branch-stable form; never overflows.
inline double stable_sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) noexcept {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

inline void clip_elementwise(std::span<double> g, double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("clip_elementwise: require lo <= hi");
    for (auto& x : g) x = std::min(hi, std::max(lo, x));
}

inline Vector clip_elementwise(Vector g, double lo, double hi) {
    clip_elementwise(g.span(), lo, hi);
    return g;
}

inline Matrix clip_elementwise(Matrix g, double lo, double hi) {
    clip_elementwise(g.span(), lo, hi);
    return g;
}

/// Central-difference gradient of `f` at `x`.
template <class F>
Vector finite_diff_grad(F&& f, const Vector& x, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
    Vector probe = x;
    Vector grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(std::as_const(probe).span());
        probe[i] = orig - eps;
        const double fm = f(std::as_const(probe).span());
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::domain_error("finite_diff_grad: non-finite function value at coordinate " +
                                    std::to_string(i));
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

}  // namespace srn
