#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "backstep/errors.hpp"
#include "backstep/grid.hpp"

namespace backstep {

/// Truncation control for the successive-approximation series.
struct KernelSolveConfig {
    double tolerance = 1e-10;     ///< stop once the sup-norm of the latest term falls below this
    std::size_t max_terms = 200;

    void validate() const {
        if (!(tolerance > 0.0)) throw std::invalid_argument("KernelSolveConfig: tolerance must be positive");
        if (max_terms < 1) throw std::invalid_argument("KernelSolveConfig: max_terms must be >= 1");
    }
};

/// A summed series together with the sup-norm of every term that went into it.
template <typename Function>
struct SeriesSolution {
    Function value;
    std::vector<double> term_norms;
};

namespace detail {

/// Sums first + next(first) + next(next(first)) + ... until a term drops below tolerance.
template <typename Function, typename Next>
SeriesSolution<Function> sum_series(Function first, Next&& next, const KernelSolveConfig& cfg, const char* who) {
    cfg.validate();
    Function sum = first;
    Function term = std::move(first);
    std::vector<double> norms{sup_norm(term)};
    while (norms.back() >= cfg.tolerance) {
        if (norms.size() >= cfg.max_terms) throw NonConvergence(who, norms.size(), norms.back());
        term = next(term);
        sum = sum + term;
        norms.push_back(sup_norm(term));
    }
    return {std::move(sum), std::move(norms)};
}

}  // namespace detail

/// Gain kernel of the transport plant with recirculation beta: the solution of
/// k = -beta + beta * k, summed as k = sum_n dk^n with dk^0 = -beta, dk^{n+1} = beta * dk^n.
inline SeriesSolution<GridFunction1D> solve_kernel_series(const GridFunction1D& beta,
                                                          const KernelSolveConfig& cfg = {}) {
    return detail::sum_series(
        -beta, [&](const GridFunction1D& term) { return convolve(beta, term); }, cfg, "solve_kernel");
}

inline GridFunction1D solve_kernel(const GridFunction1D& beta, const KernelSolveConfig& cfg = {}) {
    return solve_kernel_series(beta, cfg).value;
}

/// sup |k + beta - beta * k| over the grid.
inline double residual_1d(const GridFunction1D& beta, const GridFunction1D& k) {
    require_same_grid(beta.n_cells(), k.n_cells());
    return sup_norm(k + beta - convolve(beta, k));
}

/// |k(x)| <= beta_bar e^{beta_bar x}, evaluated at x = 1.
inline double kernel_sup_bound(double beta_bar) {
    if (beta_bar < 0.0) throw std::invalid_argument("kernel_sup_bound: beta_bar must be >= 0");
    return beta_bar * std::exp(beta_bar);
}

/// Lipschitz constant of beta -> k on the ball ||beta|| <= B.
inline double lipschitz_bound(double B) {
    if (B < 0.0) throw std::invalid_argument("lipschitz_bound: B must be >= 0");
    return std::exp(3.0 * B);
}

/// Kernel of the inverse transformation u = w + l * w under an approximate gain,
/// l = -beta + delta + delta * l, with delta supplied by the caller.
inline GridFunction1D solve_inverse_kernel(const GridFunction1D& beta, const GridFunction1D& delta,
                                           const KernelSolveConfig& cfg = {}) {
    require_same_grid(beta.n_cells(), delta.n_cells());
    return detail::sum_series(
               delta - beta, [&](const GridFunction1D& term) { return convolve(delta, term); }, cfg,
               "solve_inverse_kernel")
        .value;
}

inline double inverse_residual_1d(const GridFunction1D& beta, const GridFunction1D& delta,
                                  const GridFunction1D& l) {
    require_same_grid(beta.n_cells(), delta.n_cells());
    require_same_grid(beta.n_cells(), l.n_cells());
    return sup_norm(l + beta - delta - convolve(delta, l));
}

struct PerturbationGap {
    double gap;    ///< ||K(beta1) - K(beta2)||_inf
    double bound;  ///< e^{3B} ||beta1 - beta2||_inf, B = max of the two sup norms
};

inline PerturbationGap perturbation_gap(const GridFunction1D& beta1, const GridFunction1D& beta2,
                                        const KernelSolveConfig& cfg = {}) {
    require_same_grid(beta1.n_cells(), beta2.n_cells());
    const double B = std::max(sup_norm(beta1), sup_norm(beta2));
    return {max_abs_diff(solve_kernel(beta1, cfg), solve_kernel(beta2, cfg)),
            lipschitz_bound(B) * max_abs_diff(beta1, beta2)};
}

}  // namespace backstep
