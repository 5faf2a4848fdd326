#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "backstep/dataset.hpp"

using namespace backstep;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("backstep_ds_" + name);
    fs::remove_all(p);
    return p;
}

std::vector<char> bytes(const fs::path& p) { return io::read_bytes(p); }

template <typename F>
std::vector<double> vec(const F& f) {
    return {f.values().begin(), f.values().end()};
}

}  // namespace

TEST(Chebyshev, SecondPolynomialIdentity) {
    const auto beta = chebyshev_beta({6.0, 2.0}, 40);
    for (std::size_t i = 0; i <= 40; ++i) {
        const double x = beta.x(i);
        EXPECT_NEAR(beta[i], 6.0 * (2.0 * x * x - 1.0), 1e-12);
    }
    EXPECT_NEAR(beta[0], -6.0, 1e-12);
    EXPECT_NEAR(beta[40], 6.0, 1e-12);
}

TEST(Chebyshev, EndpointAndSup) {
    for (double gamma : {2.3, 3.0, 7.35}) EXPECT_DOUBLE_EQ(chebyshev_beta({6.0, gamma}, 50).back(), 6.0);
    EXPECT_NEAR(sup_norm(chebyshev_beta({6.0, 3.0}, 200)), 6.0, 1e-12);
    EXPECT_THROW(chebyshev_beta({0.0, 3.0}, 10), std::invalid_argument);
    EXPECT_THROW(chebyshev_beta({6.0, -1.0}, 10), std::invalid_argument);
}

TEST(Chebyshev, ProductOnTriangle) {
    const auto beta = chebyshev_beta({6.0, 6.0}, 12);
    const auto f = chebyshev_product({6.0, 6.0}, 12);
    for (std::size_t i = 0; i <= 12; ++i)
        for (std::size_t j = 0; j <= i; ++j) EXPECT_DOUBLE_EQ(f(i, j), beta[i] * beta[j]);
}

TEST(RandomU, RespectsSupBound) {
    std::mt19937_64 rng(4);
    const UDistribution dist;
    EXPECT_DOUBLE_EQ(dist.sup_bound(), 6.0);
    for (int t = 0; t < 50; ++t) EXPECT_LE(sup_norm(random_u(dist, 64, rng)), 6.0);
}

TEST(Generate, SinglePairIsDeterministic) {
    const auto a = generate_kernel1d_dataset(1, {2, 8}, 40, 17);
    const auto b = generate_kernel1d_dataset(1, {2, 8}, 40, 17);
    EXPECT_EQ(a.array("kernels").values, b.array("kernels").values);
    const double gamma = a.array("gammas").values[0];
    EXPECT_GE(gamma, 2.0);
    EXPECT_LE(gamma, 8.0);
    const GridFunction1D beta(40, detail::sample_values(a.array("betas"), 0));
    EXPECT_EQ(vec(beta), vec(chebyshev_beta({6.0, gamma}, 40)));
    EXPECT_EQ(detail::sample_values(a.array("kernels"), 0), vec(solve_kernel(beta)));
    EXPECT_THROW(generate_kernel1d_dataset(0, {2, 8}, 40, 17), std::invalid_argument);
    EXPECT_THROW(generate_kernel1d_dataset(2, {8, 2}, 40, 17), std::invalid_argument);
}

TEST(Generate, ParallelEqualsSerial) {
    const auto serial = generate_kernel1d_dataset(24, {2, 8}, 40, 5, {}, 6.0, {1});
    const auto parallel = generate_kernel1d_dataset(24, {2, 8}, 40, 5, {}, 6.0, {4});
    for (const auto& name : {"gammas", "betas", "kernels"}) {
        EXPECT_EQ(serial.array(name).values, parallel.array(name).values) << name;
    }
    const auto fb1 = generate_feedback_dataset(12, {2, 6}, {}, 30, 5, {}, 6.0, {1});
    const auto fb3 = generate_feedback_dataset(12, {2, 6}, {}, 30, 5, {}, 6.0, {3});
    EXPECT_EQ(fb1.array("controls").values, fb3.array("controls").values);
    EXPECT_EQ(fb1.array("u").values, fb3.array("u").values);
}

TEST(Generate, SolverFailureNamesGamma) {
    KernelSolveConfig cfg;
    cfg.max_terms = 2;
    try {
        generate_kernel1d_dataset(3, {2, 8}, 30, 1, cfg);
        FAIL() << "expected a solver failure";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("gamma = "), std::string::npos);
    }
}

TEST(Generate, FeedbackTargetsAreLinearInU) {
    const auto d = generate_feedback_dataset(3, {2, 6}, {}, 30, 9);
    ASSERT_TRUE(d.manifest.u_distribution.has_value());
    for (std::size_t s = 0; s < 3; ++s) {
        const GridFunction1D beta(30, detail::sample_values(d.array("betas"), s));
        const GridFunction1D u(30, detail::sample_values(d.array("u"), s));
        const auto k = solve_kernel(beta);
        const double U = d.array("controls").values[s];
        EXPECT_NEAR(control_1d(k, u), U, 1e-12 * (1.0 + std::abs(U)));
        EXPECT_NEAR(control_1d(k, 2.0 * u), 2.0 * U, 1e-12 * (1.0 + std::abs(U)));
        EXPECT_EQ(control_1d(k, GridFunction1D(30, 0.0)), 0.0);
        EXPECT_LE(sup_norm(u), 6.0);
    }
}

TEST(Generate, Kernel2DSatisfiesResidual) {
    const auto d = generate_kernel2d_dataset(2, {6, 6}, 24, 3);
    const TriangularGridFunction f(24, detail::sample_values(d.array("f"), 0));
    const TriangularGridFunction k(24, detail::sample_values(d.array("kernels2d"), 0));
    EXPECT_EQ(vec(f), vec(chebyshev_product({6.0, 6.0}, 24)));
    EXPECT_LE(residual_2d(GridFunction1D(24, 0.0), f, k), 1e-5);
    EXPECT_GT(sup_norm(k), 0.0);
}

TEST(Views, OperatorSamplesWithStride) {
    const auto d = generate_kernel1d_dataset(6, {2, 8}, 40, 2);
    const auto s = operator_samples(d, 1, 4, 4);
    EXPECT_EQ(s.inputs.rows(), 11);
    EXPECT_EQ(s.inputs.cols(), 4);
    EXPECT_EQ(s.targets.rows(), 41);
    EXPECT_EQ(s.inputs(3, 0), d.array("betas").values[1 * 41 + 12]);
    EXPECT_EQ(s.targets(40, 3), d.array("kernels").values[4 * 41 + 40]);
    EXPECT_EQ(operator_sensors(d, 4).cols(), 11);
    EXPECT_THROW(operator_samples(d, 0, 2, 3), std::invalid_argument);
    const auto q = operator_samples(d, 0, 2, 1, 2);
    EXPECT_EQ(q.targets.rows(), 21);
    EXPECT_EQ(q.targets(5, 1), d.array("kernels").values[41 + 10]);
    EXPECT_DOUBLE_EQ(q.queries(0, 5), 0.25);
    EXPECT_THROW(operator_samples(d, 4, 3), std::out_of_range);
    EXPECT_THROW(feedback_samples(d, 0, 1), KindMismatch);

    const auto d2 = generate_kernel2d_dataset(2, {3, 4}, 8, 2);
    const auto s2 = operator_samples(d2, 0, 2, 2);
    EXPECT_EQ(s2.inputs.rows(), 15);
    EXPECT_EQ(s2.queries.rows(), 2);
    EXPECT_EQ(s2.inputs(TriangularGridFunction::index(2, 1), 1),
              d2.array("f").values[45 + TriangularGridFunction::index(4, 2)]);
}

TEST(Persistence, RoundTripIsBitwise) {
    const auto dir = temp_dir("roundtrip");
    const auto d = generate_feedback_dataset(21, {2, 6}, {}, 30, 8);
    save_dataset(dir, d);
    for (const auto* f : {"manifest.json", "betas.f64", "u.f64", "controls.f64", "gammas.f64", "checksums.txt"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    const auto back = load_dataset(dir, DatasetKind::feedback);
    for (const auto& [name, a] : d.arrays) {
        EXPECT_EQ(back.array(name).values, a.values) << name;
        EXPECT_EQ(back.array(name).shape, a.shape) << name;
    }
    EXPECT_EQ(back.manifest.seed, 8u);
    EXPECT_EQ(back.manifest.u_distribution->terms, 6u);
    EXPECT_DOUBLE_EQ(back.manifest.gamma_range.max, 6.0);
    fs::remove_all(dir);
}

TEST(Persistence, RegenerationIsByteIdentical) {
    const auto a = temp_dir("regen_a"), b = temp_dir("regen_b");
    save_dataset(a, generate_kernel1d_dataset(5, {2, 8}, 30, 77));
    save_dataset(b, generate_kernel1d_dataset(5, {2, 8}, 30, 77));
    for (const auto* f : {"manifest.json", "betas.f64", "kernels.f64", "gammas.f64", "checksums.txt"}) {
        EXPECT_EQ(bytes(a / f), bytes(b / f)) << f;
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Persistence, TruncatedBlobIsChecksumError) {
    const auto dir = temp_dir("truncated");
    save_dataset(dir, generate_kernel1d_dataset(4, {2, 8}, 30, 1));
    fs::resize_file(dir / "kernels.f64", fs::file_size(dir / "kernels.f64") - 16);
    EXPECT_THROW(load_dataset(dir), ChecksumError);
    fs::remove_all(dir);
}

TEST(Persistence, KindAndVersionMismatch) {
    const auto dir = temp_dir("kind");
    save_dataset(dir, generate_kernel1d_dataset(2, {2, 8}, 30, 1));
    EXPECT_THROW(load_dataset(dir, DatasetKind::kernel2d), KindMismatch);
    auto m = io::read_json(dir / "manifest.json");
    m["version"] = 2;
    io::write_json(dir / "manifest.json", m);
    EXPECT_THROW(load_dataset(dir), ChecksumError);
    std::ofstream(dir / "checksums.txt", std::ios::app)
        << io::crc32_hex(bytes(dir / "manifest.json")) << "  manifest.json\n";
    EXPECT_THROW(load_dataset(dir), VersionMismatch);
    fs::remove_all(dir);
    EXPECT_THROW(load_dataset(dir), std::runtime_error);
}

TEST(Persistence, SpotCheckRejectsWrongTargets) {
    const auto dir = temp_dir("spot");
    auto d = generate_kernel1d_dataset(3, {2, 8}, 30, 1);
    d.arrays["kernels"].values[5] += 1e-3;
    save_dataset(dir, d);
    EXPECT_THROW(load_dataset(dir), FormatError);
    EXPECT_NO_THROW(load_dataset(dir, std::nullopt, false));
    fs::remove_all(dir);
}
