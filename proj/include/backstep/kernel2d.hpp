#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "backstep/grid.hpp"
#include "backstep/kernel1d.hpp"

namespace backstep {

namespace detail {

/// The two pieces of the PIDE kernel equation k = F0 + F(g, f, k) on a fixed (g, f).
///
/// With d = i - j (the grid index of x - y):
///   F0(i, j)    = -g(d) - int_0^{y_j} f(x_d + xi, xi) dxi
///   F(kappa)(i, j) = int_0^{x_d} g(xi) kappa(x_d, xi) dxi
///                 + int_0^{y_j} int_0^{x_d} f(xi + eta, eta) kappa(x_d + eta, xi + eta) dxi deta
/// Every integral is a trapezoid sum on grid nodes; the double integral runs the inner xi sum
/// first and the outer eta sum second.
class PideKernelOperator {
public:
    PideKernelOperator(const GridFunction1D& g, const TriangularGridFunction& f)
        : n_(g.n_cells()), h_(g.h()), g_(g), columns_(g.n_cells() + 1) {
        require_same_grid(g.n_cells(), f.n_cells());
        // columns_[b][r] = f(x_r, y_b) for r >= b, so f(xi_a + eta_b, eta_b) = columns_[b][a + b].
        for (std::size_t b = 0; b <= n_; ++b) {
            columns_[b].assign(n_ + 1, 0.0);
            for (std::size_t r = b; r <= n_; ++r) columns_[b][r] = f(r, b);
        }
    }

    TriangularGridFunction free_term() const {
        std::vector<double> v(TriangularGridFunction::storage_size(n_));
        for (std::size_t i = 0; i <= n_; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t d = i - j;
                double s = 0.0;
                if (j > 0) {
                    s = 0.5 * (columns_[0][d] + columns_[j][d + j]);
                    for (std::size_t b = 1; b < j; ++b) s += columns_[b][d + b];
                    s *= h_;
                }
                v[TriangularGridFunction::index(i, j)] = -g_[d] - s;
            }
        }
        return TriangularGridFunction(n_, std::move(v));
    }

    TriangularGridFunction apply(const TriangularGridFunction& kappa) const {
        require_same_grid(n_, kappa.n_cells());
        std::vector<double> v(TriangularGridFunction::storage_size(n_), 0.0);
        const auto& kv = kappa.vector();
        for (std::size_t d = 1; d <= n_; ++d) {
            // g-term depends on d only.
            const auto row_d = kappa.row(d);
            double gsum = 0.5 * (g_[0] * row_d[0] + g_[d] * row_d[d]);
            for (std::size_t a = 1; a < d; ++a) gsum += g_[a] * row_d[a];
            gsum *= h_;

            // inner[b] = trapezoid over a of f(a+b, b) kappa(d+b, a+b), for b = 0..n-d.
            const std::size_t jmax = n_ - d;
            std::vector<double> inner(jmax + 1);
            for (std::size_t b = 0; b <= jmax; ++b) {
                const double* col = columns_[b].data() + b;
                const double* krow = kv.data() + TriangularGridFunction::index(d + b, b);
                double s = 0.5 * (col[0] * krow[0] + col[d] * krow[d]);
                for (std::size_t a = 1; a < d; ++a) s += col[a] * krow[a];
                inner[b] = s * h_;
            }
            // Outer eta-sum, accumulated as a running trapezoid over j.
            double running = 0.0;  // sum_{b=0}^{j-1} inner[b] with the b=0 term halved
            for (std::size_t j = 0; j <= jmax; ++j) {
                double outer = 0.0;
                if (j > 0) {
                    running += (j == 1 ? 0.5 * inner[0] : inner[j - 1]);
                    outer = h_ * (running + 0.5 * inner[j]);
                }
                v[TriangularGridFunction::index(d + j, j)] = gsum + outer;
            }
        }
        return TriangularGridFunction(n_, std::move(v));
    }

private:
    std::size_t n_;
    double h_;
    GridFunction1D g_;
    std::vector<std::vector<double>> columns_;
};

}  // namespace detail

inline SeriesSolution<TriangularGridFunction> solve_kernel_2d_series(const GridFunction1D& g,
                                                                     const TriangularGridFunction& f,
                                                                     const KernelSolveConfig& cfg = {}) {
    const detail::PideKernelOperator op(g, f);
    return detail::sum_series(
        op.free_term(), [&](const TriangularGridFunction& term) { return op.apply(term); }, cfg,
        "solve_kernel_2d");
}

/// Backstepping kernel k(x, y) of the PIDE u_t = u_x + g(x)u(0) + int_0^x f(x,y)u(y)dy on the triangle.
inline TriangularGridFunction solve_kernel_2d(const GridFunction1D& g, const TriangularGridFunction& f,
                                              const KernelSolveConfig& cfg = {}) {
    return solve_kernel_2d_series(g, f, cfg).value;
}

/// sup over the triangle of |k - F0 - F(g, f, k)|.
inline double residual_2d(const GridFunction1D& g, const TriangularGridFunction& f,
                          const TriangularGridFunction& k) {
    require_same_grid(g.n_cells(), k.n_cells());
    const detail::PideKernelOperator op(g, f);
    return sup_norm(k - op.free_term() - op.apply(k));
}

struct KernelPartials {
    TriangularGridFunction k_x;
    TriangularGridFunction k_y;
};

namespace detail {

class TriangleStencil {
public:
    explicit TriangleStencil(const TriangularGridFunction& k) : k_(k), n_(static_cast<long>(k.n_cells())) {}

    /// Second-order derivative along (di, dj): central where both neighbours exist,
    /// otherwise a three-point one-sided stencil.
    std::optional<double> second_order(long i, long j, long di, long dj) const {
        const double h = k_.h();
        if (valid(i + di, j + dj) && valid(i - di, j - dj)) {
            return (at(i + di, j + dj) - at(i - di, j - dj)) / (2.0 * h);
        }
        if (valid(i + di, j + dj) && valid(i + 2 * di, j + 2 * dj)) {
            return (-3.0 * at(i, j) + 4.0 * at(i + di, j + dj) - at(i + 2 * di, j + 2 * dj)) / (2.0 * h);
        }
        if (valid(i - di, j - dj) && valid(i - 2 * di, j - 2 * dj)) {
            return (3.0 * at(i, j) - 4.0 * at(i - di, j - dj) + at(i - 2 * di, j - 2 * dj)) / (2.0 * h);
        }
        return std::nullopt;
    }

    std::optional<double> first_order(long i, long j, long di, long dj) const {
        const double h = k_.h();
        if (valid(i + di, j + dj)) return (at(i + di, j + dj) - at(i, j)) / h;
        if (valid(i - di, j - dj)) return (at(i, j) - at(i - di, j - dj)) / h;
        return std::nullopt;
    }

    /// Partial along `axis` (di, dj); when no stencil fits the triangle in that direction,
    /// the diagonal derivative d/ds k(x+s, y+s) = k_x + k_y supplies it.
    double partial(long i, long j, long di, long dj) const {
        const long oi = 1 - di, oj = 1 - dj;  // the other axis
        if (auto d = second_order(i, j, di, dj)) return *d;
        auto diag = second_order(i, j, 1, 1);
        auto other = second_order(i, j, oi, oj);
        if (diag && other) return *diag - *other;
        if (auto d = first_order(i, j, di, dj)) return *d;
        if (!diag) diag = first_order(i, j, 1, 1);
        if (!other) other = first_order(i, j, oi, oj);
        if (diag && other) return *diag - *other;
        throw std::invalid_argument("kernel_partials: no stencil fits the triangle");
    }

private:
    bool valid(long i, long j) const { return i >= 0 && i <= n_ && j >= 0 && j <= i; }
    double at(long i, long j) const { return k_(static_cast<std::size_t>(i), static_cast<std::size_t>(j)); }

    const TriangularGridFunction& k_;
    long n_;
};

}  // namespace detail

/// Finite-difference partials of a kernel on the triangle; affine functions are differentiated exactly.
inline KernelPartials kernel_partials(const TriangularGridFunction& k) {
    if (k.n_cells() < 2) throw std::invalid_argument("kernel_partials: grid too small (n_cells < 2)");
    const detail::TriangleStencil st(k);
    const std::size_t n = k.n_cells();
    std::vector<double> kx(k.size()), ky(k.size());
    for (std::size_t i = 0; i <= n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            const auto li = static_cast<long>(i), lj = static_cast<long>(j);
            kx[TriangularGridFunction::index(i, j)] = st.partial(li, lj, 1, 0);
            ky[TriangularGridFunction::index(i, j)] = st.partial(li, lj, 0, 1);
        }
    }
    return {TriangularGridFunction(n, std::move(kx)), TriangularGridFunction(n, std::move(ky))};
}

struct KernelBounds2D {
    double k_bar;
    double kx_bar;
    double ky_bar;
    double phi0_bar;
};

/// Closed-form bounds on |k|, |k_x|, |k_y| from bounds on |g|, |g'|, |f|, |f_x|.
inline KernelBounds2D bounds_2d(double g_bar, double gprime_bar, double f_bar, double fx_bar) {
    if (g_bar < 0.0 || gprime_bar < 0.0 || f_bar < 0.0 || fx_bar < 0.0) {
        throw std::invalid_argument("bounds_2d: arguments must be non-negative");
    }
    const double s = g_bar + f_bar;
    const double growth = std::exp(s);
    const double k_bar = s * growth;
    const double phi0_bar = gprime_bar + s * k_bar;
    const double kx_bar = (fx_bar + phi0_bar) * growth;
    const double ky_bar = fx_bar + f_bar * k_bar + phi0_bar + s * kx_bar;
    return {k_bar, kx_bar, ky_bar, phi0_bar};
}

namespace detail {

/// (K l)(i, j) = int_{y_j}^{x_i} k(x_i, xi) l(xi, y_j) dxi by trapezoid.
inline TriangularGridFunction inverse_volterra_apply(const TriangularGridFunction& k,
                                                     const TriangularGridFunction& l) {
    const std::size_t n = k.n_cells();
    const double h = k.h();
    std::vector<double> v(k.size(), 0.0);
    for (std::size_t i = 1; i <= n; ++i) {
        const auto krow = k.row(i);
        for (std::size_t j = 0; j < i; ++j) {
            double s = 0.5 * (krow[j] * l(j, j) + krow[i] * l(i, j));
            for (std::size_t m = j + 1; m < i; ++m) s += krow[m] * l(m, j);
            v[TriangularGridFunction::index(i, j)] = h * s;
        }
    }
    return TriangularGridFunction(n, std::move(v));
}

}  // namespace detail

/// Inverse-transformation kernel: l(x,y) = k(x,y) + int_y^x k(x,xi) l(xi,y) dxi.
inline TriangularGridFunction solve_inverse_kernel_2d(const TriangularGridFunction& k_hat,
                                                      const KernelSolveConfig& cfg = {}) {
    return detail::sum_series(
               k_hat,
               [&](const TriangularGridFunction& term) { return detail::inverse_volterra_apply(k_hat, term); },
               cfg, "solve_inverse_kernel_2d")
        .value;
}

inline double inverse_residual_2d(const TriangularGridFunction& k_hat, const TriangularGridFunction& l_hat) {
    require_same_grid(k_hat.n_cells(), l_hat.n_cells());
    return sup_norm(l_hat - k_hat - detail::inverse_volterra_apply(k_hat, l_hat));
}

}  // namespace backstep
