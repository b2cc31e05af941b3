#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace hjblab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Gauss-Legendre rule on [-1, 1].
struct GaussRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

inline GaussRule gauss_legendre(std::size_t n) {
    if (n == 0) throw std::invalid_argument("gauss_legendre: n must be positive");
    GaussRule rule{std::vector<double>(n), std::vector<double>(n)};
    const std::size_t half = (n + 1) / 2;
    for (std::size_t i = 0; i < half; ++i) {
        double z = std::cos(std::numbers::pi * (static_cast<double>(i) + 0.75) /
                            (static_cast<double>(n) + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (std::size_t k = 1; k <= n; ++k) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / static_cast<double>(k);
            }
            dp = static_cast<double>(n) * (z * p0 - p1) / (z * z - 1.0);
            const double dz = p0 / dp;
            z -= dz;
            if (std::abs(dz) < 1e-15) break;
        }
        rule.nodes[i] = -z;
        rule.nodes[n - 1 - i] = z;
        const double w = 2.0 / ((1.0 - z * z) * dp * dp);
        rule.weights[i] = w;
        rule.weights[n - 1 - i] = w;
    }
    return rule;
}

/// Van der Corput radical inverse in the given prime base.
inline double radical_inverse(std::uint64_t index, unsigned base) {
    double inv = 1.0 / base, f = inv, r = 0.0;
    while (index > 0) {
        r += f * static_cast<double>(index % base);
        index /= base;
        f *= inv;
    }
    return r;
}

/// Halton point `index` in [0,1)^dim (index 0 is skipped by callers).
inline Vec halton(std::uint64_t index, std::size_t dim) {
    static constexpr std::array<unsigned, 12> primes{2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};
    if (dim > primes.size()) throw std::invalid_argument("halton: dimension too large");
    Vec p(static_cast<Eigen::Index>(dim));
    for (std::size_t d = 0; d < dim; ++d) p[static_cast<Eigen::Index>(d)] = radical_inverse(index, primes[d]);
    return p;
}

/// Quasi-random point in the ball of the given radius, using a Halton point
/// mapped through the Gaussian-direction / radial-CDF construction.
inline Vec halton_in_ball(std::uint64_t index, std::size_t dim, double radius) {
    if (dim == 1) return Vec::Constant(1, radius * (2.0 * radical_inverse(index + 1, 2) - 1.0));
    if (2 * dim + 1 > 12) throw std::invalid_argument("halton_in_ball: dimension too large");
    Vec u = halton(index + 1, 2 * dim + 1);
    Vec dir(static_cast<Eigen::Index>(dim));
    // Box-Muller pairs give a Gaussian vector, hence a uniform direction.
    for (Eigen::Index d = 0; d < static_cast<Eigen::Index>(dim); ++d) {
        const double a = std::clamp(u[2 * d], 1e-12, 1.0 - 1e-12);
        dir[d] = std::sqrt(-2.0 * std::log(a)) * std::cos(2.0 * std::numbers::pi * u[2 * d + 1]);
    }
    const double n = dir.norm();
    if (n < 1e-12) dir = Vec::Unit(static_cast<Eigen::Index>(dim), 0);
    else dir /= n;
    const double r = radius * std::pow(u[static_cast<Eigen::Index>(2 * dim)], 1.0 / static_cast<double>(dim));
    return r * dir;
}

/// Weights of the 4-point Lagrange cubic through nodes i0..i0+3 of a uniform
/// axis, evaluated at fractional offset u = (y - x_{i0}) / spacing.
inline std::array<double, 4> cubic_weights(double u) {
    return {-(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0, u * (u - 2.0) * (u - 3.0) / 2.0,
            -u * (u - 1.0) * (u - 3.0) / 2.0, u * (u - 1.0) * (u - 2.0) / 6.0};
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need >= 2 pairs");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

/// Logarithmically spaced grid with `n` points from lo to hi inclusive.
inline std::vector<double> log_grid(double lo, double hi, std::size_t n) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double s = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        g[i] = std::exp(std::log(lo) + s * (std::log(hi) - std::log(lo)));
    }
    return g;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i)
        g[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return g;
}

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    if (ec != std::errc{}) throw std::runtime_error("format_double failed");
    return std::string(buf.data(), ptr);
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Jobs must write
/// only to storage owned by index i; the first exception is rethrown.
inline void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const unsigned count = std::min<unsigned>(workers, static_cast<unsigned>(n));
    pool.reserve(count);
    for (unsigned w = 0; w < count; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// Symmetric part of a square matrix.
inline Mat sym(const Mat& a) { return 0.5 * (a + a.transpose()); }

inline double min_eigenvalue_sym(const Mat& a) {
    Eigen::SelfAdjointEigenSolver<Mat> es(sym(a), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

inline double max_eigenvalue_sym(const Mat& a) {
    Eigen::SelfAdjointEigenSolver<Mat> es(sym(a), Eigen::EigenvaluesOnly);
    return es.eigenvalues().maxCoeff();
}

/// Principal square root of a symmetric positive semi-definite matrix.
inline Mat sqrt_psd(const Mat& q) {
    Eigen::SelfAdjointEigenSolver<Mat> es(sym(q));
    Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace hjblab
