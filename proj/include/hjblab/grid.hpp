#pragma once

// Uniform tensor grids in one or two dimensions with cubic Lagrange
// interpolation. Points outside the box are clamped to it.

#include "hjblab/errors.hpp"
#include "hjblab/numerics.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace hjblab {

class SpatialGrid {
public:
    SpatialGrid() = default;

    /// `n` nodes per axis on [lo, hi]^dim; dim must be 1 or 2 and n >= 4.
    SpatialGrid(std::size_t dim, double lo, double hi, std::size_t n) : dim_(dim), lo_(lo), hi_(hi), n_(n) {
        if (dim != 1 && dim != 2)
            throw DimensionError("SpatialGrid: tensor grids are supported for N <= 2, got N = " + std::to_string(dim));
        if (n < 4) throw std::invalid_argument("SpatialGrid: need at least 4 nodes per axis");
        if (!(hi > lo)) throw std::invalid_argument("SpatialGrid: hi must exceed lo");
        h_ = (hi - lo) / static_cast<double>(n - 1);
    }

    /// Grid with spacing close to `dx` covering [lo, hi].
    static SpatialGrid with_spacing(std::size_t dim, double lo, double hi, double dx) {
        const auto n = static_cast<std::size_t>(std::llround((hi - lo) / dx)) + 1;
        return SpatialGrid(dim, lo, hi, n);
    }

    std::size_t dim() const noexcept { return dim_; }
    std::size_t per_axis() const noexcept { return n_; }
    std::size_t size() const noexcept { return dim_ == 1 ? n_ : n_ * n_; }
    double lo() const noexcept { return lo_; }
    double hi() const noexcept { return hi_; }
    double spacing() const noexcept { return h_; }

    double axis(std::size_t i) const { return lo_ + h_ * static_cast<double>(i); }

    Vec node(std::size_t index) const {
        Vec x(static_cast<Eigen::Index>(dim_));
        if (dim_ == 1) {
            x[0] = axis(index);
        } else {
            x[0] = axis(index / n_);
            x[1] = axis(index % n_);
        }
        return x;
    }

    std::vector<Vec> nodes() const {
        std::vector<Vec> out;
        out.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) out.push_back(node(i));
        return out;
    }

    bool contains(std::span<const double> x) const {
        for (std::size_t d = 0; d < dim_; ++d)
            if (x[d] < lo_ || x[d] > hi_) return false;
        return true;
    }

    /// Interpolation stencil: up to 16 (index, weight) pairs; returns count.
    std::size_t stencil(std::span<const double> x, std::array<std::size_t, 16>& idx,
                        std::array<double, 16>& w) const {
        std::array<std::size_t, 2> base{};
        std::array<std::array<double, 4>, 2> wt{};
        for (std::size_t d = 0; d < dim_; ++d) axis_weights(x[d], base[d], wt[d]);
        if (dim_ == 1) {
            for (std::size_t a = 0; a < 4; ++a) {
                idx[a] = base[0] + a;
                w[a] = wt[0][a];
            }
            return 4;
        }
        std::size_t c = 0;
        for (std::size_t a = 0; a < 4; ++a)
            for (std::size_t b = 0; b < 4; ++b) {
                idx[c] = (base[0] + a) * n_ + base[1] + b;
                w[c] = wt[0][a] * wt[1][b];
                ++c;
            }
        return 16;
    }

    double interpolate(std::span<const double> values, std::span<const double> x) const {
        std::array<std::size_t, 16> idx{};
        std::array<double, 16> w{};
        const std::size_t c = stencil(x, idx, w);
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += w[k] * values[idx[k]];
        return s;
    }

    double interpolate(std::span<const double> values, const Vec& x) const {
        return interpolate(values, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
    }

private:
    void axis_weights(double x, std::size_t& base, std::array<double, 4>& w) const {
        const double xc = std::clamp(x, lo_, hi_);
        const double u = (xc - lo_) / h_;
        auto i0 = static_cast<long>(std::floor(u)) - 1;
        i0 = std::clamp<long>(i0, 0, static_cast<long>(n_) - 4);
        base = static_cast<std::size_t>(i0);
        w = cubic_weights(u - static_cast<double>(i0));
    }

    std::size_t dim_ = 1;
    double lo_ = 0.0, hi_ = 1.0;
    std::size_t n_ = 4;
    double h_ = 1.0;
};

}  // namespace hjblab
