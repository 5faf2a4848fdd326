#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "backstep/kernel1d.hpp"
#include "backstep/neural_operator.hpp"
#include "backstep/pde_sim.hpp"

using namespace backstep;
namespace fs = std::filesystem;

namespace {

GridFunction1D chebyshev(double gamma, std::size_t n) {
    return GridFunction1D::sample(n, [&](double x) { return 6.0 * std::cos(gamma * std::acos(x)); });
}

Eigen::MatrixXd grid_queries(std::size_t n) { return uniform_sensors(n + 1); }

DeepONetParams small_net(std::size_t m, std::size_t query_dim, std::uint64_t seed, std::size_t width = 16) {
    return init_deeponet({{width}, {width}, 8, Activation::tanh}, query_dim == 1 ? uniform_sensors(m) : triangle_nodes(m),
                         query_dim, seed);
}

OperatorSamples random_samples(std::size_t m, std::size_t q, std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    OperatorSamples s{Eigen::MatrixXd(m, count), Eigen::MatrixXd(q, count), grid_queries(q - 1)};
    for (Eigen::Index i = 0; i < s.inputs.size(); ++i) s.inputs.data()[i] = d(rng);
    for (Eigen::Index i = 0; i < s.targets.size(); ++i) s.targets.data()[i] = d(rng);
    return s;
}

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("backstep_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(MLP, ShapesChainAndValidate) {
    auto p = MLPParams::zeros({3, 5, 2}, Activation::tanh);
    EXPECT_EQ(parameter_count(p), 3u * 5 + 5 + 5 * 2 + 2);
    p.weights[1].resize(2, 4);
    EXPECT_THROW(p.validate(), std::invalid_argument);
    EXPECT_THROW(MLPParams::zeros({3}, Activation::tanh), std::invalid_argument);
    EXPECT_THROW(mlp_forward(MLPParams::zeros({3, 2}, Activation::relu), Eigen::MatrixXd::Zero(4, 1)),
                 std::invalid_argument);
}

TEST(MLP, FlattenRoundTrip) {
    std::mt19937_64 rng(3);
    auto p = MLPParams::glorot({4, 6, 3}, Activation::relu, rng);
    const Eigen::VectorXd v = flatten(p);
    auto q = zeros_like(p);
    EXPECT_EQ(flatten(q).norm(), 0.0);
    unflatten(q, v);
    EXPECT_EQ(flatten(q), v);
    EXPECT_THROW(unflatten(q, Eigen::VectorXd::Zero(3)), std::invalid_argument);
}

TEST(MLP, ReluHiddenLinearOutput) {
    auto p = MLPParams::zeros({1, 2, 1}, Activation::relu);
    p.weights[0] << 1.0, -1.0;
    p.weights[1] << 1.0, 1.0;
    p.biases[1] << -0.5;
    Eigen::MatrixXd x(1, 3);
    x << -2.0, 0.0, 3.0;
    const Eigen::MatrixXd y = mlp_forward(p, x);
    EXPECT_DOUBLE_EQ(y(0, 0), 1.5);
    EXPECT_DOUBLE_EQ(y(0, 1), -0.5);
    EXPECT_DOUBLE_EQ(y(0, 2), 2.5);
}

TEST(DeepONet, ZeroBranchGivesZero) {
    auto net = small_net(11, 1, 5);
    net.branch.weights.back().setZero();
    net.branch.biases.back().setZero();
    const Eigen::VectorXd out = deeponet_forward(net, Eigen::VectorXd::LinSpaced(11, -3, 3), grid_queries(20));
    EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(DeepONet, ConstructedIdentityTrunk) {
    DeepONetParams net{MLPParams::zeros({4, 1}, Activation::tanh), MLPParams::zeros({1, 1}, Activation::tanh),
                       uniform_sensors(4)};
    net.branch.biases[0] << 1.0;
    net.trunk.weights[0] << 1.0;
    const Eigen::MatrixXd y = grid_queries(10);
    const Eigen::VectorXd out = deeponet_forward(net, Eigen::VectorXd::Random(4), y);
    for (Eigen::Index q = 0; q < y.cols(); ++q) EXPECT_DOUBLE_EQ(out[q], y(0, q));
}

TEST(DeepONet, ShapeMismatch) {
    const auto net = small_net(11, 1, 5);
    EXPECT_THROW(deeponet_forward(net, Eigen::VectorXd::Zero(10), grid_queries(4)), std::invalid_argument);
    EXPECT_THROW(deeponet_forward(net, Eigen::VectorXd::Zero(11), triangle_nodes(3)), std::invalid_argument);
    EXPECT_THROW(deeponet2d_forward(net, Eigen::VectorXd::Zero(11), triangle_nodes(3)), std::invalid_argument);
}

TEST(DeepONet, BatchMatchesSingle) {
    const auto net = small_net(11, 1, 9);
    const auto s = random_samples(11, 21, 4, 2);
    const Eigen::MatrixXd batch = deeponet_forward_batch(net, s.inputs, s.queries);
    for (Eigen::Index c = 0; c < 4; ++c) {
        EXPECT_LT((batch.col(c) - deeponet_forward(net, s.inputs.col(c), s.queries)).norm(), 1e-14);
    }
}

TEST(DeepONet, ZeroBranch2D) {
    auto net = small_net(4, 2, 5);
    net.branch.weights.back().setZero();
    const auto f = TriangularGridFunction::sample(8, [](double x, double y) { return x * y + 1.0; });
    EXPECT_EQ(sup_norm(deeponet_kernel_2d(net, f, 8)), 0.0);
}

TEST(RelativeL2, ValueAndZeroTarget) {
    Eigen::MatrixXd target(2, 2), pred(2, 2);
    target << 3, 1, 4, 0;
    pred << 3, 2, 4, 0;
    EXPECT_DOUBLE_EQ(relative_l2_loss(pred, target, nullptr), 0.5);
    EXPECT_THROW(relative_l2_loss(pred, Eigen::MatrixXd::Zero(2, 2), nullptr), std::invalid_argument);
    EXPECT_DOUBLE_EQ(pooled_relative_l2_loss(pred, target, nullptr), 1.0 / std::sqrt(26.0));
}

TEST(GradientCheck, LinearQuadraticIsExact) {
    std::mt19937_64 rng(11);
    const auto p = MLPParams::glorot({3, 2}, Activation::tanh, rng);
    Eigen::MatrixXd x(3, 5), t(2, 5);
    x.setRandom();
    t.setRandom();
    const double err = gradient_check_generic(
        p,
        [&](const MLPParams& q, MLPParams* g) {
            MLPTape tape;
            const Eigen::MatrixXd e = mlp_forward(q, x, &tape) - t;
            if (g) mlp_backward(q, tape, e, *g);
            return 0.5 * e.squaredNorm();
        },
        1e-4);
    EXPECT_LT(err, 1e-8);
}

TEST(GradientCheck, RandomTanhDeepONet) {
    const auto net = small_net(11, 1, 21, 32);
    EXPECT_LT(gradient_check(net, random_samples(11, 21, 3, 4)), 1e-5);
}

TEST(GradientCheck, DeepONet2D) {
    const auto net = small_net(4, 2, 8);
    OperatorSamples s{Eigen::MatrixXd::Random(15, 2), Eigen::MatrixXd::Random(10, 2), triangle_nodes(3)};
    EXPECT_LT(gradient_check(net, s), 1e-5);
}

TEST(GradientCheck, UnusedBiasHasZeroGradient) {
    auto net = small_net(11, 1, 21);
    net.branch.weights.back().col(0).setZero();
    const auto s = random_samples(11, 21, 2, 4);
    auto grad = zeros_like(net);
    DeepONetTape tape;
    Eigen::MatrixXd d_out;
    relative_l2_loss(deeponet_forward_batch(net, s.inputs, s.queries, &tape), s.targets, &d_out);
    deeponet_backward(net, tape, d_out, grad);
    EXPECT_EQ(grad.branch.biases[0][0], 0.0);
    auto up = net, down = net;
    up.branch.biases[0][0] += 1e-5;
    down.branch.biases[0][0] -= 1e-5;
    EXPECT_EQ(deeponet_loss(up, s, nullptr), deeponet_loss(down, s, nullptr));
}

TEST(GradientCheck, RejectsBadStep) {
    const auto net = small_net(11, 1, 21);
    EXPECT_THROW(gradient_check(net, random_samples(11, 21, 1, 1), 0.0), std::invalid_argument);
}

TEST(Training, MemorizesSinglePair) {
    const std::size_t n = 50;
    const auto beta = chebyshev(3.0, n);
    const auto k = solve_kernel(beta);
    auto net = init_deeponet({{48}, {48, 48}, 24, Activation::tanh}, uniform_sensors(11), 1, 7, 1.0 / 6.0,
                             sup_norm(k));
    OperatorSamples s{sample_at(beta, net.sensors), Eigen::Map<const Eigen::VectorXd>(k.values().data(), n + 1),
                      grid_queries(n)};
    TrainConfig cfg;
    cfg.learning_rate = 5e-3;
    cfg.final_learning_rate = 1e-5;
    cfg.epochs = 8000;
    cfg.batch_size = 1;
    const auto res = train_deeponet(net, s, nullptr, cfg);
    EXPECT_LT(res.history.train.back(), 1e-3);
    EXPECT_LT(evaluate_relative_l2(res.params, s), 1e-3);
}

TEST(Training, DeterministicHistory) {
    const auto net = small_net(11, 1, 3);
    const auto train = random_samples(11, 21, 20, 5);
    const auto val = random_samples(11, 21, 5, 6);
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.batch_size = 6;
    cfg.seed = 42;
    const auto a = train_deeponet(net, train, &val, cfg);
    const auto b = train_deeponet(net, train, &val, cfg);
    ASSERT_EQ(a.history.train.size(), 15u);
    ASSERT_EQ(a.history.validation.size(), 15u);
    EXPECT_EQ(a.history.train, b.history.train);
    EXPECT_EQ(a.history.validation, b.history.validation);
    EXPECT_EQ(flatten(a.params), flatten(b.params));
    cfg.seed = 43;
    EXPECT_NE(train_deeponet(net, train, &val, cfg).history.train, a.history.train);
}

TEST(Training, EveryOptimizerReducesLoss) {
    const auto net = small_net(11, 1, 3);
    auto train = random_samples(11, 21, 16, 5);
    train.targets = Eigen::MatrixXd::Ones(21, 16) + 0.1 * train.targets;
    for (auto opt : {Optimizer::gradient_descent, Optimizer::momentum, Optimizer::adam}) {
        TrainConfig cfg;
        cfg.optimizer = opt;
        cfg.learning_rate = opt == Optimizer::adam ? 1e-3 : 1e-2;
        cfg.epochs = 30;
        cfg.batch_size = 4;
        const auto res = train_deeponet(net, train, nullptr, cfg);
        EXPECT_LT(res.history.train.back(), evaluate_relative_l2(net, train)) << to_string(opt);
    }
}

TEST(Training, NonFiniteLossAborts) {
    auto p = MLPParams::zeros({1, 1}, Activation::tanh);
    TrainConfig cfg;
    cfg.epochs = 3;
    EXPECT_THROW(fit(
                     p, 4, [](const MLPParams&, std::span<const std::size_t>, MLPParams*) { return std::nan(""); },
                     [](const MLPParams&) { return 0.0; }, cfg),
                 DivergenceError);
}

TEST(Training, ConfigValidationAndSchedule) {
    TrainConfig cfg;
    cfg.learning_rate = 2e-3;
    cfg.final_learning_rate = 2e-5;
    cfg.epochs = 11;
    EXPECT_DOUBLE_EQ(cfg.rate_at(0), 2e-3);
    EXPECT_DOUBLE_EQ(cfg.rate_at(10), 2e-5);
    EXPECT_NEAR(cfg.rate_at(5), 0.5 * (2e-3 + 2e-5), 1e-15);
    const auto back = train_config_from_json(to_json(cfg));
    EXPECT_EQ(back.epochs, 11u);
    EXPECT_EQ(back.learning_rate, 2e-3);
    EXPECT_EQ(back.optimizer, Optimizer::adam);
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    EXPECT_THROW(optimizer_from_string("sgd2"), std::invalid_argument);
    TrainConfig betas;
    betas.adam_beta2 = 0.99;
    betas.clip_norm = 3.0;
    EXPECT_EQ(train_config_from_json(to_json(betas)).adam_beta2, 0.99);
    EXPECT_EQ(train_config_from_json(to_json(betas)).clip_norm, 3.0);
    betas.adam_beta2 = 1.0;
    EXPECT_THROW(betas.validate(), std::invalid_argument);
}

TEST(Training, ClipNormCapsStep) {
    auto p = MLPParams::zeros({1, 1}, Activation::tanh);
    TrainConfig cfg;
    cfg.optimizer = Optimizer::gradient_descent;
    cfg.learning_rate = cfg.final_learning_rate = 1.0;
    cfg.epochs = 1;
    cfg.clip_norm = 0.5;
    fit(
        p, 1,
        [](const MLPParams&, std::span<const std::size_t>, MLPParams* g) {
            unflatten(*g, Eigen::VectorXd::Constant(2, 1e6));
            return 1.0;
        },
        [](const MLPParams&) { return 0.0; }, cfg);
    const Eigen::VectorXd theta = flatten(p);
    EXPECT_NEAR(theta.norm(), 0.5, 1e-14);
    EXPECT_NEAR(theta(0), theta(1), 1e-15);
}

TEST(Training, SmoothedLossRise) {
    std::vector<double> down(40);
    for (std::size_t i = 0; i < down.size(); ++i) down[i] = 1.0 / (1.0 + static_cast<double>(i));
    EXPECT_EQ(smoothed_loss_rise(down), 0.0);
    std::vector<double> bump(30, 1.0);
    for (std::size_t i = 20; i < 30; ++i) bump[i] = 1.2;
    EXPECT_NEAR(smoothed_loss_rise(bump), 0.2, 1e-12);
}

TEST(Adapters, TriangleInterpolationIsExactForAffine) {
    const auto f = TriangularGridFunction::sample(7, [](double x, double y) { return 2.0 * x - 3.0 * y + 0.5; });
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        double x = d(rng), y = d(rng);
        if (y > x) std::swap(x, y);
        EXPECT_NEAR(interpolate(f, x, y), 2.0 * x - 3.0 * y + 0.5, 1e-12);
    }
    const auto nodes = triangle_nodes(7);
    EXPECT_EQ(nodes.cols(), static_cast<Eigen::Index>(f.size()));
    EXPECT_LT((sample_at(f, nodes) - Eigen::Map<const Eigen::VectorXd>(f.values().data(), nodes.cols())).norm(), 1e-14);
}

TEST(Adapters, KernelOnFinerGrid) {
    DeepONetParams net{MLPParams::zeros({5, 1}, Activation::tanh), MLPParams::zeros({1, 1}, Activation::tanh),
                       uniform_sensors(5)};
    net.branch.biases[0] << 2.0;
    net.trunk.weights[0] << 1.0;
    const auto k = deeponet_kernel(net, GridFunction1D(10, 1.0), 40);
    EXPECT_EQ(k.n_cells(), 40u);
    for (std::size_t i = 0; i <= 40; ++i) EXPECT_DOUBLE_EQ(k[i], 2.0 * k.x(i));
}

TEST(FeedbackNet, ZeroStageOneGivesZero) {
    auto net = init_feedback_net({{{16}, {16}, 8, Activation::tanh}, {8}}, uniform_sensors(11), uniform_sensors(21), 3);
    net.kernel.branch.weights.back().setZero();
    net.kernel.branch.biases.back().setZero();
    std::mt19937_64 rng(2);
    for (int t = 0; t < 5; ++t) {
        const Eigen::VectorXd u = Eigen::VectorXd::Random(21) * 6.0;
        EXPECT_EQ(feedback_forward(net, Eigen::VectorXd::Random(11), u), 0.0);
    }
}

TEST(FeedbackNet, BypassMatchesTrapezoidControl) {
    const std::size_t n = 40;
    auto net = init_feedback_net({{{16}, {16}, 8, Activation::tanh}, {8}}, uniform_sensors(11), uniform_sensors(n + 1), 3,
                                 1.0 / 6.0, 5.0);
    const auto beta = chebyshev(4.0, n);
    const Eigen::VectorXd bs = sample_at(beta, net.kernel.sensors);
    const Eigen::VectorXd kv = feedback_kernel(net, bs);
    const GridFunction1D k_hat(n, std::vector<double>(kv.data(), kv.data() + kv.size()));
    const auto law = feedback_law(net, beta);
    for (double gamma : {2.0, 5.0}) {
        const auto u = GridFunction1D::sample(n, [&](double x) { return std::sin(gamma * x) + x * x; });
        const double expect = control_1d(k_hat, u);
        EXPECT_NEAR(feedback_forward(net, bs, sample_at(u, net.u_sensors)), expect, 1e-10 * (1.0 + std::abs(expect)));
        EXPECT_NEAR(law(u), expect, 1e-10 * (1.0 + std::abs(expect)));
    }
}

TEST(FeedbackNet, GradientCheck) {
    auto net = init_feedback_net({{{16}, {16}, 8, Activation::tanh}, {8}}, uniform_sensors(11), uniform_sensors(21), 3);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> d(0.0, 0.1);
    net.mix += Eigen::MatrixXd::NullaryExpr(21, 21, [&] { return d(rng); });
    net.correction.weights.back() = Eigen::MatrixXd::NullaryExpr(1, 8, [&] { return d(rng); });
    FeedbackSamples s{Eigen::MatrixXd::Random(11, 3), Eigen::MatrixXd::Random(21, 3), Eigen::RowVectorXd::Random(3)};
    EXPECT_LT(gradient_check(net, s), 1e-5);
}

TEST(FeedbackNet, ShapeMismatch) {
    const auto net = init_feedback_net({}, uniform_sensors(11), uniform_sensors(21), 3);
    EXPECT_THROW(feedback_forward(net, Eigen::VectorXd::Zero(11), Eigen::VectorXd::Zero(20)), std::invalid_argument);
    EXPECT_THROW(feedback_forward(net, Eigen::VectorXd::Zero(12), Eigen::VectorXd::Zero(21)), std::invalid_argument);
}

TEST(ModelFiles, DeepONetRoundTrip) {
    const auto dir = temp_dir("deeponet");
    auto net = small_net(11, 1, 4);
    net.input_scale = 0.25;
    net.output_scale = 40.0;
    save_model(dir, net, {{"note", "x"}});
    EXPECT_EQ(model_kind(dir), "deeponet");
    io::json meta;
    const auto back = load_deeponet(dir, &meta);
    EXPECT_EQ(flatten(back), flatten(net));
    EXPECT_EQ(back.sensors, net.sensors);
    EXPECT_EQ(back.output_scale, 40.0);
    EXPECT_EQ(meta["note"], "x");
    EXPECT_THROW(load_feedback_net(dir), KindMismatch);
    fs::resize_file(dir / "params.f64", fs::file_size(dir / "params.f64") - 8);
    EXPECT_THROW(load_deeponet(dir), ChecksumError);
    fs::remove_all(dir);
}

TEST(ModelFiles, FeedbackRoundTripAndVersion) {
    const auto dir = temp_dir("feedback");
    auto net = init_feedback_net({{{16}, {16}, 8, Activation::tanh}, {8}}, uniform_sensors(11), uniform_sensors(21), 3);
    net.mix(0, 1) = 0.5;
    save_model(dir, net);
    const auto back = load_feedback_net(dir);
    EXPECT_EQ(flatten(back), flatten(net));
    EXPECT_EQ(back.kernel_queries, net.kernel_queries);
    auto manifest = io::read_json(dir / "model.json");
    manifest["version"] = 99;
    io::write_json(dir / "model.json", manifest);
    EXPECT_THROW(load_feedback_net(dir), VersionMismatch);
    fs::remove_all(dir);
    EXPECT_ANY_THROW(load_deeponet(dir));
}
