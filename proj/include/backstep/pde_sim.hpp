#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "backstep/grid.hpp"

namespace backstep {

/// Feedback U(t) = int_0^1 k(1 - y) u(y) dy, trapezoid.
inline double control_1d(const GridFunction1D& k, const GridFunction1D& u) {
    require_same_grid(k.n_cells(), u.n_cells());
    const std::size_t n = u.n_cells();
    double s = 0.5 * (k[n] * u[0] + k[0] * u[n]);
    for (std::size_t j = 1; j < n; ++j) s += k[n - j] * u[j];
    return s * u.h();
}

/// Feedback U(t) = int_0^1 k(1, y) u(y) dy over the top row of a triangular kernel.
inline double control_2d(const TriangularGridFunction& k, const GridFunction1D& u) {
    require_same_grid(k.n_cells(), u.n_cells());
    const std::size_t n = u.n_cells();
    const auto top = k.row(n);
    double s = 0.5 * (top[0] * u[0] + top[n] * u[n]);
    for (std::size_t j = 1; j < n; ++j) s += top[j] * u[j];
    return s * u.h();
}

/// w = u - k * u.
inline GridFunction1D forward_transform(const GridFunction1D& k, const GridFunction1D& u) {
    return u - convolve(k, u);
}

/// u = w + l * w.
inline GridFunction1D inverse_transform(const GridFunction1D& l, const GridFunction1D& w) {
    return w + convolve(l, w);
}

/// int_0^{x_i} k(x_i, y) u(y) dy for every node.
inline GridFunction1D volterra_apply(const TriangularGridFunction& k, const GridFunction1D& u) {
    require_same_grid(k.n_cells(), u.n_cells());
    const std::size_t n = u.n_cells();
    std::vector<double> v(n + 1, 0.0);
    for (std::size_t i = 1; i <= n; ++i) {
        const auto row = k.row(i);
        double s = 0.5 * (row[0] * u[0] + row[i] * u[i]);
        for (std::size_t j = 1; j < i; ++j) s += row[j] * u[j];
        v[i] = s * u.h();
    }
    return GridFunction1D(n, std::move(v));
}

/// w(x) = u(x) - int_0^x k(x, y) u(y) dy.
inline GridFunction1D forward_transform_2d(const TriangularGridFunction& k, const GridFunction1D& u) {
    return u - volterra_apply(k, u);
}

/// Explicit solution of the outlet-driven observer
///   u'(x,t) = U(t+x-1) + int_{t+x-1}^t beta(t+x-tau) u(0,tau) dtau   for t + x >= 1,
///   u'(x,t) = initial_guess(x)                                      for t + x < 1,
/// evaluated on the grid at t = t_index * h. The histories are indexed by time step and
/// must reach t_index (controls[t_index] is only read at x = 1).
inline GridFunction1D observer_state(const GridFunction1D& beta, std::span<const double> control_history,
                                     std::span<const double> outlet_history, std::size_t t_index,
                                     const GridFunction1D& initial_guess) {
    require_same_grid(beta.n_cells(), initial_guess.n_cells());
    const std::size_t n = beta.n_cells();
    const double h = beta.h();
    if (outlet_history.size() <= t_index) {
        throw std::invalid_argument("observer_state: outlet history shorter than t_index + 1");
    }
    std::vector<double> v(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
        if (t_index + i < n) {
            v[i] = initial_guess[i];
            continue;
        }
        const std::size_t m0 = t_index + i - n;  // time index of t + x - 1
        if (control_history.size() <= m0) {
            throw std::invalid_argument("observer_state: control history shorter than required");
        }
        double s = 0.0;
        if (m0 < t_index) {
            s = 0.5 * (beta[n] * outlet_history[m0] + beta[i] * outlet_history[t_index]);
            for (std::size_t m = m0 + 1; m < t_index; ++m) s += beta[t_index + i - m] * outlet_history[m];
            s *= h;
        }
        v[i] = control_history[m0] + s;
    }
    return GridFunction1D(n, std::move(v));
}

/// Boundary feedback law acting on the plant state.
///
/// The state handed to `evaluate` carries a provisional value at x = 1; the simulator
/// iterates U = evaluate(state with u(1) = U) to a fixed point, then calls `commit`.
class Controller {
public:
    struct OpenLoop {};
    struct GainKernel {
        GridFunction1D k;
    };
    struct GainKernel2D {
        TriangularGridFunction k;
    };
    struct NeuralFeedback {
        std::function<double(const GridFunction1D&)> law;
        std::string name;
    };
    /// Output feedback: only u(0, t) is read from the plant; the state is reconstructed by the observer.
    struct ObserverBased {
        GridFunction1D beta;
        GridFunction1D k;
        GridFunction1D initial_guess;
        std::vector<double> controls;
        std::vector<double> outlets;
    };
    using Variant = std::variant<OpenLoop, GainKernel, GainKernel2D, NeuralFeedback, ObserverBased>;

    static Controller open_loop() { return Controller(OpenLoop{}); }
    static Controller gain_kernel(GridFunction1D k) { return Controller(GainKernel{std::move(k)}); }
    static Controller gain_kernel_2d(TriangularGridFunction k) { return Controller(GainKernel2D{std::move(k)}); }
    static Controller neural_feedback(std::function<double(const GridFunction1D&)> law, std::string name) {
        return Controller(NeuralFeedback{std::move(law), std::move(name)});
    }
    static Controller observer_based(GridFunction1D beta, GridFunction1D k, GridFunction1D initial_guess) {
        require_same_grid(beta.n_cells(), k.n_cells());
        require_same_grid(beta.n_cells(), initial_guess.n_cells());
        return Controller(ObserverBased{std::move(beta), std::move(k), std::move(initial_guess), {}, {}});
    }

    std::string kind() const {
        return std::visit(
            [](const auto& c) -> std::string {
                using T = std::decay_t<decltype(c)>;
                if constexpr (std::is_same_v<T, OpenLoop>) return "open_loop_zero";
                else if constexpr (std::is_same_v<T, GainKernel>) return "gain_kernel";
                else if constexpr (std::is_same_v<T, GainKernel2D>) return "gain_kernel_2d";
                else if constexpr (std::is_same_v<T, NeuralFeedback>) return "neural_feedback:" + c.name;
                else return "observer_based";
            },
            variant_);
    }

    /// Grid the controller was built for, 0 when it has none.
    std::size_t n_cells() const {
        return std::visit(
            [](const auto& c) -> std::size_t {
                using T = std::decay_t<decltype(c)>;
                if constexpr (std::is_same_v<T, GainKernel> || std::is_same_v<T, GainKernel2D> ||
                              std::is_same_v<T, ObserverBased>)
                    return c.k.n_cells();
                else return 0;
            },
            variant_);
    }

    void reset() {
        if (auto* obs = std::get_if<ObserverBased>(&variant_)) {
            obs->controls.clear();
            obs->outlets.clear();
        }
    }

    double evaluate(const GridFunction1D& state) const {
        return std::visit(
            [&](const auto& c) -> double {
                using T = std::decay_t<decltype(c)>;
                if constexpr (std::is_same_v<T, OpenLoop>) return 0.0;
                else if constexpr (std::is_same_v<T, GainKernel>) return control_1d(c.k, state);
                else if constexpr (std::is_same_v<T, GainKernel2D>) return control_2d(c.k, state);
                else if constexpr (std::is_same_v<T, NeuralFeedback>) return c.law(state);
                else return control_1d(c.k, observer_estimate(c, state));
            },
            variant_);
    }

    void commit(const GridFunction1D& state) {
        if (auto* obs = std::get_if<ObserverBased>(&variant_)) {
            obs->outlets.push_back(state.front());
            obs->controls.push_back(state.back());
        }
    }

    const Variant& variant() const noexcept { return variant_; }

private:
    explicit Controller(Variant v) : variant_(std::move(v)) {}

    static GridFunction1D observer_estimate(const ObserverBased& c, const GridFunction1D& state) {
        std::vector<double> controls = c.controls;
        std::vector<double> outlets = c.outlets;
        controls.push_back(state.back());
        outlets.push_back(state.front());
        return observer_state(c.beta, controls, outlets, outlets.size() - 1, c.initial_guess);
    }

    Variant variant_;
};

/// Treatment of the recirculation / Volterra source along each characteristic step.
enum class TimeScheme {
    automatic,             ///< transform_consistent for the transport plant, heun for the PIDE
    euler,                 ///< explicit Euler from the departure point
    heun,                  ///< explicit trapezoid (predictor-corrector) along the characteristic
    transform_consistent,  ///< transport only: trapezoid whose outlet samples are rescaled so the
                           ///< trapezoid backstepping transform maps the step exactly onto a shift
};

inline std::string to_string(TimeScheme s) {
    switch (s) {
        case TimeScheme::automatic: return "automatic";
        case TimeScheme::euler: return "euler";
        case TimeScheme::heun: return "heun";
        case TimeScheme::transform_consistent: return "transform_consistent";
    }
    return "unknown";
}

inline TimeScheme time_scheme_from_string(const std::string& s) {
    if (s == "automatic") return TimeScheme::automatic;
    if (s == "euler") return TimeScheme::euler;
    if (s == "heun") return TimeScheme::heun;
    if (s == "transform_consistent") return TimeScheme::transform_consistent;
    throw std::invalid_argument("unknown time scheme '" + s + "'");
}

struct SimConfig {
    double t_final = 2.0;
    TimeScheme scheme = TimeScheme::automatic;
    std::size_t max_boundary_iterations = 200;
};

/// Space-time samples u(x_i, t_n) with dt = h, and the boundary control history.
class TrajectoryRecord {
public:
    TrajectoryRecord(std::size_t n_cells, std::size_t n_steps)
        : n_cells_(n_cells), n_steps_(n_steps) {
        states_.reserve((n_steps + 1) * (n_cells + 1));
        controls_.reserve(n_steps + 1);
    }

    std::size_t n_cells() const noexcept { return n_cells_; }
    std::size_t n_steps() const noexcept { return n_steps_; }
    double dt() const noexcept { return 1.0 / static_cast<double>(n_cells_); }
    double time(std::size_t step) const noexcept { return static_cast<double>(step) * dt(); }

    GridFunction1D state(std::size_t step) const {
        const auto first = states_.begin() + static_cast<std::ptrdiff_t>(step * (n_cells_ + 1));
        return GridFunction1D(n_cells_, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n_cells_ + 1)));
    }
    std::span<const double> state_values(std::size_t step) const {
        return std::span<const double>(states_).subspan(step * (n_cells_ + 1), n_cells_ + 1);
    }
    std::span<const double> states() const noexcept { return states_; }
    std::span<const double> controls() const noexcept { return controls_; }

    /// u(0, t_n) for every stored step.
    std::vector<double> outlet_history() const {
        std::vector<double> v(n_stored());
        for (std::size_t s = 0; s < v.size(); ++s) v[s] = states_[s * (n_cells_ + 1)];
        return v;
    }

    std::vector<double> l2_norms() const {
        std::vector<double> v(n_stored());
        for (std::size_t s = 0; s < v.size(); ++s) v[s] = l2_norm(state(s));
        return v;
    }

    std::size_t n_stored() const noexcept { return controls_.size(); }

    void push(const GridFunction1D& u, double control) {
        states_.insert(states_.end(), u.values().begin(), u.values().end());
        controls_.push_back(control);
    }

private:
    std::size_t n_cells_;
    std::size_t n_steps_;
    std::vector<double> states_;
    std::vector<double> controls_;
};

namespace detail {

inline std::size_t step_count(double t_final, std::size_t n_cells) {
    if (!(t_final > 0.0)) throw std::invalid_argument("simulate: t_final must be positive");
    return static_cast<std::size_t>(std::llround(t_final * static_cast<double>(n_cells)));
}

/// Resolves u(1) = U = controller(u with u(1) = U) by secant iteration on controller(U) - U,
/// started from `guess` and one fixed-point step. Exact after one secant step for linear laws.
inline GridFunction1D close_boundary(std::vector<double> interior, double guess, const Controller& ctrl,
                                     std::size_t max_iterations) {
    const std::size_t n = interior.size() - 1;
    const auto residual = [&](double U) {
        interior[n] = U;
        const double next = ctrl.evaluate(GridFunction1D(n, interior));
        if (!std::isfinite(next)) throw std::runtime_error("simulate: controller returned a non-finite value");
        return next - U;
    };
    const auto converged = [](double r, double U) { return std::abs(r) <= 1e-13 * (1.0 + std::abs(U)); };
    double U0 = guess, r0 = residual(U0);
    if (converged(r0, U0)) {
        interior[n] = U0;
        return GridFunction1D(n, std::move(interior));
    }
    double U1 = U0 + r0;
    for (std::size_t it = 0; it < max_iterations; ++it) {
        const double r1 = residual(U1);
        if (converged(r1, U1)) {
            interior[n] = U1;
            return GridFunction1D(n, std::move(interior));
        }
        if (r1 == r0) break;
        const double U2 = U1 - r1 * (U1 - U0) / (r1 - r0);
        U0 = U1;
        r0 = r1;
        U1 = U2;
    }
    throw std::runtime_error("simulate: boundary fixed point did not converge");
}

template <typename Step>
TrajectoryRecord run(const GridFunction1D& u0, Controller ctrl, const SimConfig& cfg, Step&& step) {
    const std::size_t n = u0.n_cells();
    if (ctrl.n_cells() != 0) require_same_grid(ctrl.n_cells(), n);
    const std::size_t steps = step_count(cfg.t_final, n);
    ctrl.reset();
    TrajectoryRecord rec(n, steps);
    GridFunction1D u = close_boundary(u0.vector(), u0.back(), ctrl, cfg.max_boundary_iterations);
    ctrl.commit(u);
    rec.push(u, u.back());
    for (std::size_t s = 0; s < steps; ++s) {
        std::vector<double> next = step(u);
        u = close_boundary(std::move(next), u.back(), ctrl, cfg.max_boundary_iterations);
        ctrl.commit(u);
        rec.push(u, u.back());
    }
    return rec;
}

}  // namespace detail

/// Closed loop of u_t = u_x + beta(x) u(0, t), u(1, t) = U(t), stepped with dt = h so the
/// transport is an exact index shift; the recirculation source is integrated along each characteristic.
inline TrajectoryRecord simulate_transport(const GridFunction1D& beta, const GridFunction1D& u0, Controller ctrl,
                                          const SimConfig& cfg = {}) {
    require_same_grid(beta.n_cells(), u0.n_cells());
    const std::size_t n = beta.n_cells();
    const double h = beta.h();
    const TimeScheme scheme =
        cfg.scheme == TimeScheme::automatic ? TimeScheme::transform_consistent : cfg.scheme;
    return detail::run(u0, std::move(ctrl), cfg, [&](const GridFunction1D& u) {
        std::vector<double> v(n + 1, 0.0);
        switch (scheme) {
            case TimeScheme::euler:
                for (std::size_t i = 0; i < n; ++i) v[i] = u[i + 1] + h * beta[i + 1] * u[0];
                break;
            case TimeScheme::heun: {
                const double outlet_pred = u[1] + h * beta[1] * u[0];
                for (std::size_t i = 0; i < n; ++i)
                    v[i] = u[i + 1] + 0.5 * h * (beta[i + 1] * u[0] + beta[i] * outlet_pred);
                break;
            }
            case TimeScheme::transform_consistent:
            case TimeScheme::automatic: {
                const double p = u[0] / (1.0 - 0.5 * h * beta[0]);
                const double q = u[1] + 0.5 * h * beta[1] * p;
                for (std::size_t i = 0; i < n; ++i) v[i] = u[i + 1] + 0.5 * h * (beta[i + 1] * p + beta[i] * q);
                break;
            }
        }
        return v;
    });
}

/// Closed loop of u_t = u_x + g(x) u(0,t) + int_0^x f(x,y) u(y,t) dy, u(1,t) = U(t).
inline TrajectoryRecord simulate_pide(const GridFunction1D& g, const TriangularGridFunction& f,
                                     const GridFunction1D& u0, Controller ctrl, const SimConfig& cfg = {}) {
    require_same_grid(g.n_cells(), f.n_cells());
    require_same_grid(g.n_cells(), u0.n_cells());
    const std::size_t n = g.n_cells();
    const double h = g.h();
    const TimeScheme scheme = cfg.scheme == TimeScheme::automatic ? TimeScheme::heun : cfg.scheme;
    if (scheme == TimeScheme::transform_consistent) {
        throw std::invalid_argument("simulate_pide: transform_consistent applies to the transport plant only");
    }
    // source(u)[i] = g_i u_0 + int_0^{x_i} f(x_i, y) u(y) dy over nodes 0..last
    auto source = [&](std::span<const double> u, std::size_t last) {
        std::vector<double> s(last + 1);
        for (std::size_t i = 0; i <= last; ++i) {
            const auto row = f.row(i);
            double acc = 0.0;
            if (i > 0) {
                acc = 0.5 * (row[0] * u[0] + row[i] * u[i]);
                for (std::size_t j = 1; j < i; ++j) acc += row[j] * u[j];
                acc *= h;
            }
            s[i] = g[i] * u[0] + acc;
        }
        return s;
    };
    return detail::run(u0, std::move(ctrl), cfg, [&](const GridFunction1D& u) {
        const auto s_old = source(u.values(), n);
        std::vector<double> v(n + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) v[i] = u[i + 1] + h * s_old[i + 1];
        if (scheme == TimeScheme::heun) {
            const auto s_pred = source(v, n - 1);
            for (std::size_t i = 0; i < n; ++i) v[i] = u[i + 1] + 0.5 * h * (s_old[i + 1] + s_pred[i]);
        }
        return v;
    });
}

}  // namespace backstep
