#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "backstep/errors.hpp"

namespace backstep {

namespace detail {

inline void require_finite(std::span<const double> values, const char* who) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument(std::string(who) + ": non-finite value");
        }
    }
}

}  // namespace detail

/// Values of a function of one variable on the uniform grid x_i = i / n_cells, i = 0..n_cells.
class GridFunction1D {
public:
    explicit GridFunction1D(std::size_t n_cells, double fill = 0.0)
        : n_cells_(n_cells), values_(n_cells + 1, fill) {
        if (n_cells == 0) throw std::invalid_argument("GridFunction1D: n_cells must be positive");
        detail::require_finite(values_, "GridFunction1D");
    }

    GridFunction1D(std::size_t n_cells, std::vector<double> values)
        : n_cells_(n_cells), values_(std::move(values)) {
        if (n_cells == 0) throw std::invalid_argument("GridFunction1D: n_cells must be positive");
        if (values_.size() != n_cells + 1) {
            throw std::invalid_argument("GridFunction1D: expected " + std::to_string(n_cells + 1) +
                                        " values, got " + std::to_string(values_.size()));
        }
        detail::require_finite(values_, "GridFunction1D");
    }

    /// Samples `f(x)` at every grid node.
    template <typename F>
    static GridFunction1D sample(std::size_t n_cells, F&& f) {
        std::vector<double> v(n_cells + 1);
        for (std::size_t i = 0; i <= n_cells; ++i) {
            v[i] = f(static_cast<double>(i) / static_cast<double>(n_cells));
        }
        return GridFunction1D(n_cells, std::move(v));
    }

    std::size_t n_cells() const noexcept { return n_cells_; }
    std::size_t size() const noexcept { return values_.size(); }
    double h() const noexcept { return 1.0 / static_cast<double>(n_cells_); }
    double x(std::size_t i) const noexcept { return static_cast<double>(i) * h(); }

    double operator[](std::size_t i) const noexcept {
        assert(i < values_.size());
        return values_[i];
    }
    double at(std::size_t i) const { return values_.at(i); }
    double front() const noexcept { return values_.front(); }
    double back() const noexcept { return values_.back(); }

    std::span<const double> values() const noexcept { return values_; }
    const std::vector<double>& vector() const noexcept { return values_; }

    friend bool operator==(const GridFunction1D&, const GridFunction1D&) = default;

private:
    std::size_t n_cells_;
    std::vector<double> values_;
};

/// Values of a function on the triangle T = {0 <= y <= x <= 1}, stored row-major by x:
/// entry (i, j) with 0 <= j <= i <= n_cells lives at i(i+1)/2 + j.
class TriangularGridFunction {
public:
    explicit TriangularGridFunction(std::size_t n_cells, double fill = 0.0)
        : n_cells_(n_cells), values_(storage_size(n_cells), fill) {
        if (n_cells == 0) throw std::invalid_argument("TriangularGridFunction: n_cells must be positive");
        detail::require_finite(values_, "TriangularGridFunction");
    }

    TriangularGridFunction(std::size_t n_cells, std::vector<double> values)
        : n_cells_(n_cells), values_(std::move(values)) {
        if (n_cells == 0) throw std::invalid_argument("TriangularGridFunction: n_cells must be positive");
        if (values_.size() != storage_size(n_cells)) {
            throw std::invalid_argument("TriangularGridFunction: expected " +
                                        std::to_string(storage_size(n_cells)) + " values, got " +
                                        std::to_string(values_.size()));
        }
        detail::require_finite(values_, "TriangularGridFunction");
    }

    template <typename F>
    static TriangularGridFunction sample(std::size_t n_cells, F&& f) {
        std::vector<double> v(storage_size(n_cells));
        const double h = 1.0 / static_cast<double>(n_cells);
        for (std::size_t i = 0; i <= n_cells; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                v[index(i, j)] = f(static_cast<double>(i) * h, static_cast<double>(j) * h);
            }
        }
        return TriangularGridFunction(n_cells, std::move(v));
    }

    static constexpr std::size_t storage_size(std::size_t n_cells) noexcept {
        return (n_cells + 1) * (n_cells + 2) / 2;
    }
    static constexpr std::size_t index(std::size_t i, std::size_t j) noexcept { return i * (i + 1) / 2 + j; }

    std::size_t n_cells() const noexcept { return n_cells_; }
    std::size_t size() const noexcept { return values_.size(); }
    double h() const noexcept { return 1.0 / static_cast<double>(n_cells_); }

    /// Checked access; (i, j) outside the triangle throws.
    double at(std::size_t i, std::size_t j) const {
        if (i > n_cells_ || j > i) {
            throw std::out_of_range("TriangularGridFunction: (" + std::to_string(i) + ", " +
                                    std::to_string(j) + ") outside the triangle");
        }
        return values_[index(i, j)];
    }

    /// Unchecked access for inner loops.
    double operator()(std::size_t i, std::size_t j) const noexcept {
        assert(i <= n_cells_ && j <= i);
        return values_[index(i, j)];
    }

    /// Row x_i: the i+1 values at y_0..y_i.
    std::span<const double> row(std::size_t i) const noexcept {
        return std::span<const double>(values_).subspan(index(i, 0), i + 1);
    }

    std::span<const double> values() const noexcept { return values_; }
    const std::vector<double>& vector() const noexcept { return values_; }

    friend bool operator==(const TriangularGridFunction&, const TriangularGridFunction&) = default;

private:
    std::size_t n_cells_;
    std::vector<double> values_;
};

inline void require_same_grid(std::size_t a, std::size_t b) {
    if (a != b) throw GridMismatch(a, b);
}

/// Trapezoid approximation of the integral of f over [0, x_upper].
inline double trapezoid_integrate(const GridFunction1D& f, std::size_t upper_index) {
    if (upper_index > f.n_cells()) {
        throw std::out_of_range("trapezoid_integrate: upper index " + std::to_string(upper_index) +
                                " beyond n_cells " + std::to_string(f.n_cells()));
    }
    if (upper_index == 0) return 0.0;
    double s = 0.5 * (f[0] + f[upper_index]);
    for (std::size_t i = 1; i < upper_index; ++i) s += f[i];
    return s * f.h();
}

/// Trapezoid value of the one-sided convolution (a*b)(x_i) = int_0^{x_i} a(x_i - y) b(y) dy.
/// Direct O(n^2) summation; the sum is symmetric in (a, b).
inline GridFunction1D convolve(const GridFunction1D& a, const GridFunction1D& b) {
    require_same_grid(a.n_cells(), b.n_cells());
    const std::size_t n = a.n_cells();
    const double h = a.h();
    std::vector<double> c(n + 1, 0.0);
    for (std::size_t i = 1; i <= n; ++i) {
        double s = 0.5 * (a[i] * b[0] + a[0] * b[i]);
        for (std::size_t j = 1; j < i; ++j) s += a[i - j] * b[j];
        c[i] = h * s;
    }
    return GridFunction1D(n, std::move(c));
}

inline double sup_norm(std::span<const double> values) noexcept {
    double m = 0.0;
    for (double v : values) m = std::max(m, std::abs(v));
    return m;
}

inline double sup_norm(const GridFunction1D& f) noexcept { return sup_norm(f.values()); }
inline double sup_norm(const TriangularGridFunction& f) noexcept { return sup_norm(f.values()); }

/// L2[0,1] norm, trapezoid on f^2.
inline double l2_norm(const GridFunction1D& f) {
    const std::size_t n = f.n_cells();
    double s = 0.5 * (f[0] * f[0] + f[n] * f[n]);
    for (std::size_t i = 1; i < n; ++i) s += f[i] * f[i];
    return std::sqrt(s * f.h());
}

// Pointwise helpers used throughout.

inline GridFunction1D operator+(const GridFunction1D& a, const GridFunction1D& b) {
    require_same_grid(a.n_cells(), b.n_cells());
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
    return GridFunction1D(a.n_cells(), std::move(v));
}

inline GridFunction1D operator-(const GridFunction1D& a, const GridFunction1D& b) {
    require_same_grid(a.n_cells(), b.n_cells());
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
    return GridFunction1D(a.n_cells(), std::move(v));
}

inline GridFunction1D operator*(double s, const GridFunction1D& a) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = s * a[i];
    return GridFunction1D(a.n_cells(), std::move(v));
}

inline GridFunction1D operator-(const GridFunction1D& a) { return -1.0 * a; }

inline TriangularGridFunction operator+(const TriangularGridFunction& a, const TriangularGridFunction& b) {
    require_same_grid(a.n_cells(), b.n_cells());
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
    return TriangularGridFunction(a.n_cells(), std::move(v));
}

inline TriangularGridFunction operator-(const TriangularGridFunction& a, const TriangularGridFunction& b) {
    require_same_grid(a.n_cells(), b.n_cells());
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
    return TriangularGridFunction(a.n_cells(), std::move(v));
}

inline TriangularGridFunction operator*(double s, const TriangularGridFunction& a) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = s * a.values()[i];
    return TriangularGridFunction(a.n_cells(), std::move(v));
}

inline double max_abs_diff(const GridFunction1D& a, const GridFunction1D& b) { return sup_norm(a - b); }
inline double max_abs_diff(const TriangularGridFunction& a, const TriangularGridFunction& b) {
    return sup_norm(a - b);
}

/// Restriction to every `stride`-th node; n_cells must be divisible by stride.
inline GridFunction1D restrict_to(const GridFunction1D& f, std::size_t stride) {
    if (stride == 0 || f.n_cells() % stride != 0) {
        throw std::invalid_argument("restrict_to: stride must divide n_cells");
    }
    std::vector<double> v;
    v.reserve(f.n_cells() / stride + 1);
    for (std::size_t i = 0; i <= f.n_cells(); i += stride) v.push_back(f[i]);
    return GridFunction1D(f.n_cells() / stride, std::move(v));
}

inline TriangularGridFunction restrict_to(const TriangularGridFunction& f, std::size_t stride) {
    if (stride == 0 || f.n_cells() % stride != 0) {
        throw std::invalid_argument("restrict_to: stride must divide n_cells");
    }
    const std::size_t m = f.n_cells() / stride;
    std::vector<double> v(TriangularGridFunction::storage_size(m));
    for (std::size_t i = 0; i <= m; ++i) {
        for (std::size_t j = 0; j <= i; ++j) v[TriangularGridFunction::index(i, j)] = f(i * stride, j * stride);
    }
    return TriangularGridFunction(m, std::move(v));
}

/// Piecewise-linear evaluation of a grid function at an arbitrary x in [0, 1].
inline double interpolate(const GridFunction1D& f, double x) {
    const double n = static_cast<double>(f.n_cells());
    const double s = std::clamp(x, 0.0, 1.0) * n;
    const auto i = std::min(static_cast<std::size_t>(s), f.n_cells() - 1);
    const double t = s - static_cast<double>(i);
    return (1.0 - t) * f[i] + t * f[i + 1];
}

}  // namespace backstep
