#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "backstep/grid.hpp"
#include "backstep/io.hpp"
#include "backstep/kernel1d.hpp"
#include "backstep/kernel2d.hpp"
#include "backstep/pde_sim.hpp"

namespace backstep {

/// V = int_0^1 e^{c x} w(x)^2 dx, trapezoid.
inline double lyapunov_V(const GridFunction1D& w, double c) {
    if (!(c > 0.0)) throw std::invalid_argument("lyapunov_V: c must be positive");
    std::vector<double> v(w.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(c * w.x(i)) * w[i] * w[i];
    const GridFunction1D weighted(w.n_cells(), std::move(v));
    return trapezoid_integrate(weighted, w.n_cells());
}

/// Largest admissible kernel error: c e^{-c/2} / (1 + B).
inline double eps_star(double B, double c) {
    if (B < 0.0 || !(c > 0.0)) throw std::invalid_argument("eps_star: need B >= 0 and c > 0");
    return c * std::exp(-0.5 * c) / (1.0 + B);
}

/// Guaranteed decay rate c - (e^c / c) eps^2 (1 + B)^2; non-positive when eps >= eps_star.
inline double c_star(double c, double epsilon, double B) {
    if (!(c > 0.0)) throw std::invalid_argument("c_star: c must be positive");
    return c - std::exp(c) / c * epsilon * epsilon * (1.0 + B) * (1.0 + B);
}

/// Overshoot coefficient (1 + (b + (1+b)eps) e^{(1+b)eps}) (1 + b e^b) e^{c/2}.
inline double overshoot_M(double beta_bar, double epsilon, double c) {
    if (beta_bar < 0.0 || epsilon < 0.0 || c < 0.0) throw std::invalid_argument("overshoot_M: arguments must be >= 0");
    const double a = (1.0 + beta_bar) * epsilon;
    return (1.0 + (beta_bar + a) * std::exp(a)) * (1.0 + beta_bar * std::exp(beta_bar)) * std::exp(0.5 * c);
}

struct FeedbackBounds {
    double eps_star_fb;
    double B_u0;
    double residual_radius;
};

inline FeedbackBounds feedback_bounds(double B_beta, double B_u, double c, double epsilon) {
    if (!(B_beta > 0.0) || !(B_u > 0.0) || !(c > 0.0)) {
        throw std::invalid_argument("feedback_bounds: B_beta, B_u and c must be positive");
    }
    const double ec = std::exp(0.5 * c);
    const double sc = std::sqrt(c);
    return {sc * B_u / (ec * (1.0 + B_beta)),
            (B_u / (ec * (1.0 + B_beta)) - epsilon / sc) / (1.0 + B_beta * std::exp(B_beta)),
            (1.0 + B_beta) * ec / sc * epsilon};
}

/// delta = -k_tilde + beta * k_tilde.
inline GridFunction1D delta_from_tilde(const GridFunction1D& beta, const GridFunction1D& k_tilde) {
    return -k_tilde + convolve(beta, k_tilde);
}

struct Delta2D {
    GridFunction1D delta0;
    TriangularGridFunction delta1;
    double delta0_sup;
    double delta1_sup;
};

/// delta0(x) = -k~(x,0) + int_0^x g(y) k~(x,y) dy,
/// delta1(x,y) = -k~_x - k~_y + int_y^x f(xi,y) k~(x,xi) dxi.
inline Delta2D delta2d(const GridFunction1D& g, const TriangularGridFunction& f, const TriangularGridFunction& k_tilde,
                       const TriangularGridFunction& k_tilde_x, const TriangularGridFunction& k_tilde_y) {
    const std::size_t n = g.n_cells();
    for (std::size_t m : {f.n_cells(), k_tilde.n_cells(), k_tilde_x.n_cells(), k_tilde_y.n_cells()}) require_same_grid(n, m);
    const double h = g.h();
    std::vector<double> d0(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
        double s = 0.0;
        if (i > 0) {
            s = 0.5 * (g[0] * k_tilde(i, 0) + g[i] * k_tilde(i, i));
            for (std::size_t j = 1; j < i; ++j) s += g[j] * k_tilde(i, j);
            s *= h;
        }
        d0[i] = -k_tilde(i, 0) + s;
    }
    std::vector<double> d1(k_tilde.size());
    for (std::size_t i = 0; i <= n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            if (i > j) {
                s = 0.5 * (f(j, j) * k_tilde(i, j) + f(i, j) * k_tilde(i, i));
                for (std::size_t m = j + 1; m < i; ++m) s += f(m, j) * k_tilde(i, m);
                s *= h;
            }
            d1[TriangularGridFunction::index(i, j)] = -k_tilde_x(i, j) - k_tilde_y(i, j) + s;
        }
    }
    Delta2D r{GridFunction1D(n, std::move(d0)), TriangularGridFunction(n, std::move(d1)), 0.0, 0.0};
    r.delta0_sup = sup_norm(r.delta0);
    r.delta1_sup = sup_norm(r.delta1);
    return r;
}

struct DecayFit {
    double rate = 0.0;            ///< minus the least-squares slope of log V
    std::size_t points = 0;       ///< samples used
    bool floor_truncated = false; ///< V dropped below the floor inside the window
};

/// Fits log V on [t_start, end], cutting the window where V first drops below `floor`.
inline DecayFit fit_decay_rate(const std::vector<double>& V, double dt, double t_start, double floor = 1e-14) {
    if (!(dt > 0.0)) throw std::invalid_argument("fit_decay_rate: dt must be positive");
    DecayFit fit;
    std::vector<double> t, y;
    for (std::size_t s = 0; s < V.size(); ++s) {
        const double time = static_cast<double>(s) * dt;
        if (time < t_start - 1e-12) continue;
        if (!(V[s] > floor)) {
            fit.floor_truncated = true;
            break;
        }
        t.push_back(time);
        y.push_back(std::log(V[s]));
    }
    fit.points = t.size();
    if (t.size() < 2) return fit;
    const double n = static_cast<double>(t.size());
    double st = 0, sy = 0, stt = 0, sty = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        st += t[i];
        sy += y[i];
        stt += t[i] * t[i];
        sty += t[i] * y[i];
    }
    fit.rate = -(n * sty - st * sy) / (n * stt - st * st);
    return fit;
}

struct StabilityBounds {
    double B = 0.0;
    double beta_bar = 0.0;
    double c = 2.0;
    double epsilon = 0.0;
    double eps_star = 0.0;
    double c_star = 0.0;
    double M = 0.0;    ///< with the realized beta_bar
    double M_B = 0.0;  ///< with the hypothesis bound B
    std::optional<double> B_beta, B_u, B_u0, eps_star_fb, residual_radius;
};

struct Verdict {
    std::string name;
    bool pass;
    std::string detail;
};

struct StabilityReport {
    std::string experiment;
    double dt = 0.0;
    std::vector<double> times;
    std::vector<double> V;
    std::vector<double> u_norms;
    std::vector<double> envelope;
    std::vector<double> error_vs_exact;  ///< ||u - u_exact|| along the exact-gain reference run
    std::vector<double> controls;
    DecayFit fit;
    double tail_sup = 0.0;        ///< max ||u|| for t >= 1 + 5h
    double exact_tail_sup = 0.0;  ///< same for the exact-gain reference run
    StabilityBounds bounds;
    std::vector<Verdict> verdicts;
    io::json extra = io::json::object();

    bool passed() const {
        return std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.pass; });
    }

    const Verdict* verdict(const std::string& name) const {
        for (const auto& v : verdicts)
            if (v.name == name) return &v;
        return nullptr;
    }
};

inline io::json to_json(const StabilityBounds& b) {
    io::json j{{"B", b.B},           {"beta_bar", b.beta_bar}, {"c", b.c},   {"epsilon", b.epsilon},
               {"eps_star", b.eps_star}, {"c_star", b.c_star}, {"M", b.M}, {"M_B", b.M_B}};
    auto opt = [&](const char* key, const std::optional<double>& v) { j[key] = v ? io::json(*v) : io::json(nullptr); };
    opt("B_beta", b.B_beta);
    opt("B_u", b.B_u);
    opt("B_u0", b.B_u0);
    opt("eps_star_fb", b.eps_star_fb);
    opt("residual_radius", b.residual_radius);
    return j;
}

inline io::json to_json(const StabilityReport& r) {
    io::json verdicts = io::json::array();
    for (const auto& v : r.verdicts) verdicts.push_back({{"name", v.name}, {"pass", v.pass}, {"detail", v.detail}});
    return {{"experiment", r.experiment},
            {"passed", r.passed()},
            {"dt", r.dt},
            {"bounds", to_json(r.bounds)},
            {"fit", {{"rate", r.fit.rate}, {"points", r.fit.points}, {"floor_truncated", r.fit.floor_truncated}}},
            {"tail_sup", r.tail_sup},
            {"exact_tail_sup", r.exact_tail_sup},
            {"verdicts", verdicts},
            {"series",
             {{"t", r.times},
              {"V", r.V},
              {"u_norm", r.u_norms},
              {"envelope", r.envelope},
              {"error_vs_exact", r.error_vs_exact},
              {"U", r.controls}}},
            {"extra", r.extra}};
}

struct ExperimentConfig {
    double c = 2.0;
    double t_final = 2.0;
    double allowance = 0.05;     ///< trajectory envelopes
    double static_slack = 0.01;  ///< functional inequalities
    std::optional<double> B;     ///< gain-function bound, defaults to ||beta||_inf
    double B_u = 6.0;            ///< feedback experiments: sup bound of the training u
    double final_ratio = 0.05;   ///< PIDE experiments: required ||u(T)|| / ||u(0)||
    TimeScheme scheme = TimeScheme::automatic;
};

inline GridFunction1D default_initial_condition(std::size_t n_cells) {
    return GridFunction1D::sample(n_cells, [](double x) { return std::sin(std::numbers::pi * x) + 1.0; });
}

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

inline void fill_series(StabilityReport& r, const TrajectoryRecord& rec) {
    r.dt = rec.dt();
    r.times.resize(rec.n_stored());
    r.u_norms = rec.l2_norms();
    r.controls.assign(rec.controls().begin(), rec.controls().end());
    for (std::size_t s = 0; s < rec.n_stored(); ++s) r.times[s] = rec.time(s);
}

inline double tail_sup(const std::vector<double>& norms, std::size_t n_cells) {
    double m = 0.0;
    for (std::size_t s = n_cells + 5; s < norms.size(); ++s) m = std::max(m, norms[s]);
    return m;
}

inline std::vector<double> trajectory_gap(const TrajectoryRecord& a, const TrajectoryRecord& b) {
    std::vector<double> e(std::min(a.n_stored(), b.n_stored()));
    for (std::size_t s = 0; s < e.size(); ++s) e[s] = l2_norm(a.state(s) - b.state(s));
    return e;
}

}  // namespace detail

/// Closed loop of the transport plant under the gain k_hat, checked against the exponential
/// envelope ||u(t)|| <= M e^{-c* t / 2} ||u(0)||.
inline StabilityReport run_gain_experiment(const GridFunction1D& beta, const GridFunction1D& k_hat,
                                           const GridFunction1D& u0, const ExperimentConfig& cfg = {}) {
    require_same_grid(beta.n_cells(), k_hat.n_cells());
    require_same_grid(beta.n_cells(), u0.n_cells());
    const double beta_bar = sup_norm(beta);
    const double B = cfg.B.value_or(beta_bar);
    if (beta_bar > B * (1.0 + 1e-12)) throw std::invalid_argument("run_gain_experiment: ||beta||_inf exceeds B");

    StabilityReport r;
    r.experiment = "gain";
    const auto k = solve_kernel(beta);
    const auto k_tilde = k - k_hat;
    auto& b = r.bounds;
    b.B = B;
    b.beta_bar = beta_bar;
    b.c = cfg.c;
    b.epsilon = sup_norm(k_tilde);
    b.eps_star = eps_star(B, cfg.c);
    b.c_star = c_star(cfg.c, b.epsilon, B);
    b.M = overshoot_M(beta_bar, b.epsilon, cfg.c);
    b.M_B = overshoot_M(B, b.epsilon, cfg.c);

    const SimConfig sim{cfg.t_final, cfg.scheme};
    const auto rec = simulate_transport(beta, u0, Controller::gain_kernel(k_hat), sim);
    const auto exact = simulate_transport(beta, u0, Controller::gain_kernel(k), sim);
    detail::fill_series(r, rec);
    r.error_vs_exact = detail::trajectory_gap(rec, exact);
    r.tail_sup = detail::tail_sup(r.u_norms, u0.n_cells());
    r.exact_tail_sup = detail::tail_sup(exact.l2_norms(), u0.n_cells());

    const auto delta = delta_from_tilde(beta, k_tilde);
    const auto l_hat = solve_inverse_kernel(beta, delta);
    const double k_hat_sup = sup_norm(k_hat), l_hat_sup = sup_norm(l_hat);
    bool sandwich = true, envelope = true;
    const double u0n = r.u_norms.front();
    for (std::size_t s = 0; s < rec.n_stored(); ++s) {
        const double V = lyapunov_V(forward_transform(k_hat, rec.state(s)), cfg.c);
        r.V.push_back(V);
        const double u2 = r.u_norms[s] * r.u_norms[s];
        if (u2 / std::pow(1.0 + l_hat_sup, 2) > V * (1.0 + cfg.static_slack) + 1e-300 ||
            V > (1.0 + cfg.static_slack) * std::exp(cfg.c) * std::pow(1.0 + k_hat_sup, 2) * u2 + 1e-300) {
            sandwich = false;
        }
        const double env = b.M * std::exp(-0.5 * b.c_star * r.times[s]) * u0n;
        r.envelope.push_back(env);
        if (r.u_norms[s] > (1.0 + cfg.allowance) * env) envelope = false;
    }
    r.fit = fit_decay_rate(r.V, r.dt, 0.0);

    const double delta_sup = sup_norm(delta);
    r.verdicts.push_back({"epsilon_below_eps_star", b.epsilon < b.eps_star,
                          "eps = " + detail::fmt(b.epsilon) + ", eps* = " + detail::fmt(b.eps_star) +
                              (b.epsilon < b.eps_star ? "" : " (no stability claim)")});
    r.verdicts.push_back({"exponential_envelope", envelope && b.epsilon < b.eps_star,
                          "M = " + detail::fmt(b.M) + ", c* = " + detail::fmt(b.c_star)});
    r.verdicts.push_back({"delta_bound", delta_sup <= (1.0 + beta_bar) * b.epsilon * (1.0 + 1e-12) + 1e-14,
                          "||delta|| = " + detail::fmt(delta_sup) + " <= " + detail::fmt((1.0 + beta_bar) * b.epsilon)});
    r.verdicts.push_back({"lyapunov_sandwich", sandwich,
                          "||k_hat|| = " + detail::fmt(k_hat_sup) + ", ||l_hat|| = " + detail::fmt(l_hat_sup)});
    r.extra["delta_sup"] = delta_sup;
    r.extra["l_hat_sup"] = l_hat_sup;
    r.extra["k_hat_sup"] = k_hat_sup;
    return r;
}

/// Closed loop with the boundary value supplied by an approximate feedback law, checked against
/// the two-term practical-stability estimate with the measured sup |U - U_hat| in place of eps.
inline StabilityReport run_feedback_experiment(const GridFunction1D& beta,
                                               const std::function<double(const GridFunction1D&)>& law,
                                               const GridFunction1D& u0, const ExperimentConfig& cfg = {}) {
    require_same_grid(beta.n_cells(), u0.n_cells());
    const double B_beta = cfg.B.value_or(sup_norm(beta));
    const auto admissible = feedback_bounds(B_beta, cfg.B_u, cfg.c, 0.0);
    const double u0n = l2_norm(u0);
    if (u0n > admissible.B_u0) {
        throw std::invalid_argument("run_feedback_experiment: ||u0|| = " + detail::fmt(u0n) +
                                    " exceeds the largest admissible radius " + detail::fmt(admissible.B_u0));
    }
    const auto k = solve_kernel(beta);
    StabilityReport r;
    r.experiment = "feedback";
    double sup_err = 0.0;
    const auto wrapped = [&](const GridFunction1D& u) {
        const double U = law(u);
        sup_err = std::max(sup_err, std::abs(U - control_1d(k, u)));
        return U;
    };
    const SimConfig sim{cfg.t_final, cfg.scheme};
    const auto rec = simulate_transport(beta, u0, Controller::neural_feedback(wrapped, "feedback"), sim);
    const auto exact = simulate_transport(beta, u0, Controller::gain_kernel(k), sim);
    detail::fill_series(r, rec);
    r.error_vs_exact = detail::trajectory_gap(rec, exact);
    r.tail_sup = detail::tail_sup(r.u_norms, u0.n_cells());
    r.exact_tail_sup = detail::tail_sup(exact.l2_norms(), u0.n_cells());
    for (std::size_t s = 0; s < rec.n_stored(); ++s) r.V.push_back(lyapunov_V(forward_transform(k, rec.state(s)), cfg.c));
    r.fit = fit_decay_rate(r.V, r.dt, 0.0);

    const auto fb = feedback_bounds(B_beta, cfg.B_u, cfg.c, sup_err);
    auto& b = r.bounds;
    b.B = B_beta;
    b.beta_bar = sup_norm(beta);
    b.c = cfg.c;
    b.epsilon = sup_err;
    b.B_beta = B_beta;
    b.B_u = cfg.B_u;
    b.B_u0 = fb.B_u0;
    b.eps_star_fb = fb.eps_star_fb;
    b.residual_radius = fb.residual_radius;

    const double transient = (1.0 + B_beta) * (1.0 + B_beta * std::exp(B_beta)) * std::exp(0.5 * cfg.c);
    bool envelope = true;
    for (std::size_t s = 0; s < rec.n_stored(); ++s) {
        const double env = transient * std::exp(-0.5 * cfg.c * r.times[s]) * u0n + fb.residual_radius;
        r.envelope.push_back(env);
        if (r.u_norms[s] > (1.0 + cfg.allowance) * env) envelope = false;
    }
    r.verdicts.push_back({"epsilon_below_eps_star", sup_err < fb.eps_star_fb,
                          "sup|U~| = " + detail::fmt(sup_err) + ", eps* = " + detail::fmt(fb.eps_star_fb)});
    r.verdicts.push_back({"initial_condition_within_B_u0", u0n <= fb.B_u0,
                          "||u0|| = " + detail::fmt(u0n) + ", B_u0 = " + detail::fmt(fb.B_u0)});
    r.verdicts.push_back({"practical_envelope", envelope, "residual radius " + detail::fmt(fb.residual_radius)});
    // Round-off floor: the exact law leaves a tail near machine precision, not zero.
    const double radius = (1.0 + cfg.allowance) * fb.residual_radius + 1e-12 * u0n;
    r.verdicts.push_back({"tail_within_residual_radius", r.tail_sup <= radius,
                          "tail " + detail::fmt(r.tail_sup) + " vs " + detail::fmt(fb.residual_radius)});
    return r;
}

/// PIDE closed loop under an approximate 2D kernel: exponential decay (fitted rate positive,
/// final ratio below cfg.final_ratio) and the target-system perturbation bounds.
inline StabilityReport run_pide_experiment(const GridFunction1D& g, const TriangularGridFunction& f,
                                           const TriangularGridFunction& k_hat, const GridFunction1D& u0,
                                           const ExperimentConfig& cfg = {}) {
    require_same_grid(g.n_cells(), k_hat.n_cells());
    const auto k = solve_kernel_2d(g, f);
    const auto k_tilde = k - k_hat;
    const auto partials = kernel_partials(k_tilde);
    const auto delta = delta2d(g, f, k_tilde, partials.k_x, partials.k_y);
    const double eps = std::max({sup_norm(k_tilde), sup_norm(partials.k_x), sup_norm(partials.k_y)});
    const double g_bar = sup_norm(g), f_bar = sup_norm(f);

    StabilityReport r;
    r.experiment = "pide";
    const SimConfig sim{cfg.t_final, cfg.scheme};
    const auto rec = simulate_pide(g, f, u0, Controller::gain_kernel_2d(k_hat), sim);
    const auto exact = simulate_pide(g, f, u0, Controller::gain_kernel_2d(k), sim);
    detail::fill_series(r, rec);
    r.error_vs_exact = detail::trajectory_gap(rec, exact);
    r.tail_sup = detail::tail_sup(r.u_norms, u0.n_cells());
    r.exact_tail_sup = detail::tail_sup(exact.l2_norms(), u0.n_cells());
    for (std::size_t s = 0; s < rec.n_stored(); ++s) {
        r.V.push_back(lyapunov_V(forward_transform_2d(k_hat, rec.state(s)), cfg.c));
        r.envelope.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    r.fit = fit_decay_rate(r.u_norms, r.dt, 0.0);
    r.bounds.beta_bar = std::max(g_bar, f_bar);
    r.bounds.c = cfg.c;
    r.bounds.epsilon = eps;

    const double ratio = r.u_norms.back() / r.u_norms.front();
    r.verdicts.push_back({"decay_rate_positive", r.fit.rate > 0.0, "fitted rate " + detail::fmt(r.fit.rate)});
    r.verdicts.push_back({"final_ratio", ratio <= cfg.final_ratio,
                          "||u(T)||/||u(0)|| = " + detail::fmt(ratio) + " <= " + detail::fmt(cfg.final_ratio)});
    r.verdicts.push_back({"delta0_bound", delta.delta0_sup <= (1.0 + g_bar) * eps * (1.0 + 1e-12) + 1e-14,
                          detail::fmt(delta.delta0_sup) + " <= " + detail::fmt((1.0 + g_bar) * eps)});
    r.verdicts.push_back({"delta1_bound", delta.delta1_sup <= (2.0 + f_bar) * eps * (1.0 + 1e-12) + 1e-14,
                          detail::fmt(delta.delta1_sup) + " <= " + detail::fmt((2.0 + f_bar) * eps)});
    const auto peak = std::max_element(r.error_vs_exact.begin(), r.error_vs_exact.end());
    r.extra["error_peak"] = peak == r.error_vs_exact.end() ? 0.0 : *peak;
    r.extra["error_peak_time"] =
        peak == r.error_vs_exact.end() ? 0.0 : r.times[static_cast<std::size_t>(peak - r.error_vs_exact.begin())];
    r.extra["delta0_sup"] = delta.delta0_sup;
    r.extra["delta1_sup"] = delta.delta1_sup;
    return r;
}

}  // namespace backstep
