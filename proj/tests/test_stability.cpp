#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "backstep/dataset.hpp"
#include "backstep/stability.hpp"

using namespace backstep;

namespace {

ExperimentConfig with_t_final(double t) {
    ExperimentConfig cfg;
    cfg.t_final = t;
    return cfg;
}

ExperimentConfig bounded(double B) {
    ExperimentConfig cfg;
    cfg.B = B;
    return cfg;
}

}  // namespace

TEST(Bounds, EpsStarExamples) {
    EXPECT_NEAR(eps_star(0.0, 2.0), 2.0 / std::exp(1.0), 1e-15);
    EXPECT_NEAR(eps_star(6.0, 2.0), 2.0 / (7.0 * std::exp(1.0)), 1e-15);
    for (double B : {0.0, 1.0, 6.0, 100.0}) EXPECT_GT(eps_star(B, 2.0), 0.0);
    EXPECT_THROW(eps_star(-1.0, 2.0), std::invalid_argument);
    EXPECT_THROW(eps_star(1.0, 0.0), std::invalid_argument);
}

TEST(Bounds, CStarVanishesAtEpsStar) {
    for (double B : {0.0, 2.0, 6.0}) {
        for (double c : {0.5, 2.0, 4.0}) {
            const double e = eps_star(B, c);
            EXPECT_NEAR(c_star(c, e, B), 0.0, 1e-12);
            EXPECT_DOUBLE_EQ(c_star(c, 0.0, B), c);
            EXPECT_GT(c_star(c, 0.9 * e, B), 0.0);
            EXPECT_LT(c_star(c, 1.1 * e, B), 0.0);
        }
    }
}

TEST(Bounds, OvershootExamplesAndMonotone) {
    EXPECT_DOUBLE_EQ(overshoot_M(0.0, 0.0, 2.0), std::exp(1.0));
    const double b = 6.0;
    EXPECT_NEAR(overshoot_M(b, 0.0, 2.0), (1.0 + b) * (1.0 + b * std::exp(b)) * std::exp(1.0), 1e-9);
    double prev = 0.0;
    for (double e = 0.0; e < 0.2; e += 0.01) {
        const double m = overshoot_M(b, e, 2.0);
        EXPECT_GT(m, prev);
        prev = m;
    }
    EXPECT_GT(overshoot_M(3.0, 0.05, 2.0), overshoot_M(2.0, 0.05, 2.0));
}

TEST(Bounds, FeedbackFormulas) {
    const double Bb = 6.0, Bu = 6.0, c = 2.0;
    const auto zero = feedback_bounds(Bb, Bu, c, 0.0);
    EXPECT_NEAR(zero.eps_star_fb, std::sqrt(2.0) * 6.0 / (std::exp(1.0) * 7.0), 1e-15);
    EXPECT_NEAR(zero.B_u0, 6.0 / (std::exp(1.0) * 7.0) / (1.0 + 6.0 * std::exp(6.0)), 1e-18);
    EXPECT_EQ(zero.residual_radius, 0.0);
    EXPECT_NEAR(feedback_bounds(Bb, Bu, c, 0.5 * zero.eps_star_fb).B_u0, 0.5 * zero.B_u0, 1e-18);
    EXPECT_NEAR(feedback_bounds(Bb, Bu, c, zero.eps_star_fb).B_u0, 0.0, 1e-18);
    EXPECT_LT(feedback_bounds(Bb, Bu, c, 1.01 * zero.eps_star_fb).B_u0, 0.0);
    EXPECT_NEAR(feedback_bounds(Bb, Bu, c, 1e-3).residual_radius, 7.0 * std::exp(1.0) / std::sqrt(2.0) * 1e-3, 1e-15);
}

TEST(Lyapunov, ConstantState) {
    const GridFunction1D w(400, 1.0);
    EXPECT_NEAR(lyapunov_V(w, 2.0), 0.5 * (std::exp(2.0) - 1.0), 1e-5);
    EXPECT_THROW(lyapunov_V(w, 0.0), std::invalid_argument);
}

TEST(DecayFit, ExponentialAndFloor) {
    std::vector<double> V(200);
    for (std::size_t s = 0; s < V.size(); ++s) V[s] = 3.0 * std::exp(-2.0 * 0.01 * static_cast<double>(s));
    auto fit = fit_decay_rate(V, 0.01, 0.0);
    EXPECT_NEAR(fit.rate, 2.0, 1e-10);
    EXPECT_EQ(fit.points, 200u);
    EXPECT_FALSE(fit.floor_truncated);
    for (std::size_t s = 150; s < V.size(); ++s) V[s] = 0.0;
    fit = fit_decay_rate(V, 0.01, 0.5);
    EXPECT_NEAR(fit.rate, 2.0, 1e-10);
    EXPECT_EQ(fit.points, 100u);
    EXPECT_TRUE(fit.floor_truncated);
}

TEST(Delta, OneDimensionalExamples) {
    const auto beta = GridFunction1D::sample(50, [](double x) { return std::cos(3.0 * x); });
    EXPECT_EQ(sup_norm(delta_from_tilde(beta, GridFunction1D(50, 0.0))), 0.0);
    const auto d = delta_from_tilde(GridFunction1D(50, 0.0), GridFunction1D(50, 0.25));
    EXPECT_EQ(sup_norm(d + GridFunction1D(50, 0.25)), 0.0);
}

TEST(Delta, TwoDimensionalConstantTilde) {
    const std::size_t n = 20;
    const double a = 0.3;
    const TriangularGridFunction kt(n, std::vector<double>(TriangularGridFunction::storage_size(n), a));
    const TriangularGridFunction zero(n);
    const auto ones = TriangularGridFunction::sample(n, [](double, double) { return 1.0; });
    const auto r = delta2d(GridFunction1D(n, 0.0), ones, kt, zero, zero);
    for (std::size_t i = 0; i <= n; ++i) {
        EXPECT_DOUBLE_EQ(r.delta0[i], -a);
        for (std::size_t j = 0; j <= i; ++j) EXPECT_NEAR(r.delta1(i, j), a * (i - j) / double(n), 1e-14);
    }
    const auto rg = delta2d(GridFunction1D(n, 2.0), zero, kt, zero, zero);
    for (std::size_t i = 0; i <= n; ++i) EXPECT_NEAR(rg.delta0[i], -a + 2.0 * a * i / double(n), 1e-14);
}

TEST(GainExperiment, ExactKernelPasses) {
    const auto beta = chebyshev_beta({6.0, 3.0}, 100);
    const auto r = run_gain_experiment(beta, solve_kernel(beta), default_initial_condition(100));
    EXPECT_TRUE(r.passed()) << to_json(r).dump();
    EXPECT_LT(r.bounds.epsilon, 1e-12);
    EXPECT_EQ(r.V.size(), r.times.size());
    EXPECT_EQ(r.envelope.size(), r.times.size());
    EXPECT_LT(r.tail_sup, 1e-6);
    for (std::size_t s = 1; s < r.V.size(); ++s) EXPECT_LE(r.V[s], r.V[s - 1] * (1.0 + 1e-9) + 1e-20);
}

TEST(GainExperiment, SmallPerturbationStaysInEnvelope) {
    const auto beta = chebyshev_beta({6.0, 3.0}, 100);
    const auto k = solve_kernel(beta);
    const double e = 0.5 * eps_star(6.0, 2.0);
    const auto k_hat = k + GridFunction1D::sample(100, [&](double x) { return e * std::sin(7.0 * x); });
    const auto r = run_gain_experiment(beta, k_hat, default_initial_condition(100), with_t_final(4.0));
    EXPECT_TRUE(r.passed()) << to_json(r).dump();
    EXPECT_GT(r.bounds.c_star, 0.0);
    EXPECT_GT(r.fit.rate, 0.0);
}

TEST(GainExperiment, LargePerturbationIsFlagged) {
    const auto beta = chebyshev_beta({6.0, 3.0}, 60);
    const auto k_hat = solve_kernel(beta) + GridFunction1D(60, 2.0 * eps_star(6.0, 2.0));
    const auto r = run_gain_experiment(beta, k_hat, default_initial_condition(60));
    EXPECT_FALSE(r.passed());
    EXPECT_FALSE(r.verdict("epsilon_below_eps_star")->pass);
    EXPECT_LE(r.bounds.c_star, 0.0);
    EXPECT_NE(r.verdict("epsilon_below_eps_star")->detail.find("no stability claim"), std::string::npos);
}

TEST(GainExperiment, RejectsBetaAboveB) {
    const auto beta = chebyshev_beta({6.0, 3.0}, 40);
    EXPECT_THROW(run_gain_experiment(beta, solve_kernel(beta), default_initial_condition(40), bounded(5.0)),
                 std::invalid_argument);
}

TEST(FeedbackExperiment, NearExactLawIsPracticallyStable) {
    const std::size_t n = 100;
    const auto beta = chebyshev_beta({6.0, 3.0}, n);
    const auto k = solve_kernel(beta);
    const auto u0 = GridFunction1D::sample(n, [](double x) { return 1e-4 * std::sin(std::numbers::pi * x); });
    const double bias = 1e-7;
    const auto r = run_feedback_experiment(beta, [&](const GridFunction1D& u) { return control_1d(k, u) + bias; }, u0,
                                           with_t_final(3.0));
    EXPECT_TRUE(r.passed()) << to_json(r).dump();
    EXPECT_NEAR(r.bounds.epsilon, bias, 1e-12);
    EXPECT_GT(r.tail_sup, 0.0);
}

TEST(FeedbackExperiment, RejectsLargeInitialCondition) {
    const auto beta = chebyshev_beta({6.0, 3.0}, 40);
    const auto k = solve_kernel(beta);
    EXPECT_THROW(run_feedback_experiment(beta, [&](const GridFunction1D& u) { return control_1d(k, u); },
                                         default_initial_condition(40)),
                 std::invalid_argument);
}

TEST(PideExperiment, ExactKernelPasses) {
    const std::size_t n = 100;
    const GridFunction1D g(n, 0.0);
    const auto f = chebyshev_product({6.0, 3.0}, n);
    const auto r = run_pide_experiment(g, f, solve_kernel_2d(g, f), default_initial_condition(n));
    EXPECT_TRUE(r.passed()) << to_json(r).dump();
    EXPECT_LT(r.extra["error_peak"].get<double>(), 1e-12);
}

TEST(Report, JsonIsAuditable) {
    const auto beta = chebyshev_beta({6.0, 2.5}, 40);
    const auto r = run_gain_experiment(beta, solve_kernel(beta), default_initial_condition(40));
    const auto j = to_json(r);
    EXPECT_EQ(j["series"]["V"].size(), r.V.size());
    EXPECT_EQ(j["passed"].get<bool>(), r.passed());
    EXPECT_EQ(j["verdicts"].size(), r.verdicts.size());
    EXPECT_TRUE(j["bounds"]["B_u0"].is_null());
    EXPECT_DOUBLE_EQ(j["bounds"]["eps_star"].get<double>(), eps_star(6.0, 2.0));
}
