#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "backstep/errors.hpp"
#include "backstep/grid.hpp"
#include "backstep/io.hpp"

namespace backstep {

enum class Activation { tanh, relu };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

/// Fully connected network; hidden layers use `activation`, the output layer is linear.
struct MLPParams {
    std::vector<std::size_t> layer_sizes;
    Activation activation = Activation::tanh;
    std::vector<Eigen::MatrixXd> weights;  ///< weights[l] is layer_sizes[l+1] x layer_sizes[l]
    std::vector<Eigen::VectorXd> biases;

    static MLPParams zeros(std::vector<std::size_t> sizes, Activation act) {
        if (sizes.size() < 2) throw std::invalid_argument("MLPParams: need at least input and output sizes");
        MLPParams p;
        p.layer_sizes = std::move(sizes);
        p.activation = act;
        for (std::size_t l = 0; l + 1 < p.layer_sizes.size(); ++l) {
            if (p.layer_sizes[l] == 0 || p.layer_sizes[l + 1] == 0) throw std::invalid_argument("MLPParams: zero width");
            p.weights.push_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p.layer_sizes[l + 1]),
                                                      static_cast<Eigen::Index>(p.layer_sizes[l])));
            p.biases.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.layer_sizes[l + 1])));
        }
        return p;
    }

    /// Glorot-uniform weights, zero biases.
    static MLPParams glorot(std::vector<std::size_t> sizes, Activation act, std::mt19937_64& rng) {
        MLPParams p = zeros(std::move(sizes), act);
        for (auto& w : p.weights) {
            const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
            std::uniform_real_distribution<double> d(-limit, limit);
            for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = d(rng);
        }
        return p;
    }

    std::size_t n_layers() const noexcept { return weights.size(); }
    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t output_dim() const { return layer_sizes.back(); }

    template <typename F>
    void for_each_block(F&& f) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            f(weights[l].data(), static_cast<std::size_t>(weights[l].size()));
            f(biases[l].data(), static_cast<std::size_t>(biases[l].size()));
        }
    }
    template <typename F>
    void for_each_block(F&& f) const {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            f(weights[l].data(), static_cast<std::size_t>(weights[l].size()));
            f(biases[l].data(), static_cast<std::size_t>(biases[l].size()));
        }
    }

    void validate() const {
        if (layer_sizes.size() != weights.size() + 1 || biases.size() != weights.size()) {
            throw std::invalid_argument("MLPParams: layer count mismatch");
        }
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (static_cast<std::size_t>(weights[l].rows()) != layer_sizes[l + 1] ||
                static_cast<std::size_t>(weights[l].cols()) != layer_sizes[l] ||
                static_cast<std::size_t>(biases[l].size()) != layer_sizes[l + 1]) {
                throw std::invalid_argument("MLPParams: layer " + std::to_string(l) + " shape does not chain");
            }
            if (!weights[l].allFinite() || !biases[l].allFinite()) {
                throw std::invalid_argument("MLPParams: non-finite parameter in layer " + std::to_string(l));
            }
        }
    }
};

template <typename P>
std::size_t parameter_count(const P& params) {
    std::size_t n = 0;
    params.for_each_block([&](const double*, std::size_t size) { n += size; });
    return n;
}

template <typename P>
Eigen::VectorXd flatten(const P& params) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(parameter_count(params)));
    Eigen::Index offset = 0;
    params.for_each_block([&](const double* data, std::size_t size) {
        v.segment(offset, static_cast<Eigen::Index>(size)) =
            Eigen::Map<const Eigen::VectorXd>(data, static_cast<Eigen::Index>(size));
        offset += static_cast<Eigen::Index>(size);
    });
    return v;
}

template <typename P>
void unflatten(P& params, const Eigen::VectorXd& v) {
    if (static_cast<std::size_t>(v.size()) != parameter_count(params)) {
        throw std::invalid_argument("unflatten: parameter vector has the wrong length");
    }
    Eigen::Index offset = 0;
    params.for_each_block([&](double* data, std::size_t size) {
        Eigen::Map<Eigen::VectorXd>(data, static_cast<Eigen::Index>(size)) =
            v.segment(offset, static_cast<Eigen::Index>(size));
        offset += static_cast<Eigen::Index>(size);
    });
}

template <typename P>
P zeros_like(const P& params) {
    P z = params;
    z.for_each_block([](double* data, std::size_t size) { std::fill(data, data + size, 0.0); });
    return z;
}

/// Layer outputs kept for the backward pass; activations[0] is the input.
struct MLPTape {
    std::vector<Eigen::MatrixXd> activations;
};

/// Forward pass on a batch stored column-wise (input_dim x batch).
inline Eigen::MatrixXd mlp_forward(const MLPParams& p, const Eigen::MatrixXd& x, MLPTape* tape = nullptr) {
    if (static_cast<std::size_t>(x.rows()) != p.input_dim()) {
        throw std::invalid_argument("mlp_forward: input has " + std::to_string(x.rows()) + " rows, expected " +
                                    std::to_string(p.input_dim()));
    }
    if (tape) tape->activations.assign(1, x);
    Eigen::MatrixXd a = x;
    for (std::size_t l = 0; l < p.n_layers(); ++l) {
        Eigen::MatrixXd z = p.weights[l] * a;
        z.colwise() += p.biases[l];
        if (l + 1 < p.n_layers()) {
            if (p.activation == Activation::tanh) z = z.array().tanh().matrix();
            else z = z.cwiseMax(0.0);
        }
        a = std::move(z);
        if (tape) tape->activations.push_back(a);
    }
    return a;
}

/// Accumulates parameter gradients into `grad` and returns d(loss)/d(input) when requested.
inline Eigen::MatrixXd mlp_backward(const MLPParams& p, const MLPTape& tape, Eigen::MatrixXd delta, MLPParams& grad,
                                    bool want_input_grad = false) {
    for (std::size_t l = p.n_layers(); l-- > 0;) {
        if (l + 1 < p.n_layers()) {
            const auto& a = tape.activations[l + 1];
            if (p.activation == Activation::tanh) delta.array() *= 1.0 - a.array().square();
            else delta.array() *= (a.array() > 0.0).cast<double>();
        }
        grad.weights[l].noalias() += delta * tape.activations[l].transpose();
        grad.biases[l] += delta.rowwise().sum();
        if (l > 0 || want_input_grad) delta = p.weights[l].transpose() * delta;
    }
    return want_input_grad ? delta : Eigen::MatrixXd();
}

/// Branch/trunk operator network G(u)(y) = output_scale * sum_k branch_k(input_scale * u) trunk_k(y).
struct DeepONetParams {
    MLPParams branch;
    MLPParams trunk;
    Eigen::MatrixXd sensors;  ///< sensor_dim x m sensor locations (x, or (x, y) on the triangle)
    double input_scale = 1.0;
    double output_scale = 1.0;

    std::size_t m() const { return branch.input_dim(); }
    std::size_t p() const { return branch.output_dim(); }
    std::size_t query_dim() const { return trunk.input_dim(); }

    template <typename F>
    void for_each_block(F&& f) {
        branch.for_each_block(f);
        trunk.for_each_block(f);
    }
    template <typename F>
    void for_each_block(F&& f) const {
        branch.for_each_block(f);
        trunk.for_each_block(f);
    }

    void validate() const {
        branch.validate();
        trunk.validate();
        if (branch.output_dim() != trunk.output_dim()) throw std::invalid_argument("DeepONet: branch/trunk width mismatch");
        if (static_cast<std::size_t>(sensors.cols()) != m()) throw std::invalid_argument("DeepONet: sensor count != m");
        if (!(input_scale > 0.0) || !(output_scale > 0.0)) throw std::invalid_argument("DeepONet: scales must be positive");
    }
};

struct DeepONetArchitecture {
    std::vector<std::size_t> branch_hidden{128, 128};
    std::vector<std::size_t> trunk_hidden{128, 128};
    std::size_t p = 128;
    Activation activation = Activation::tanh;
};

inline DeepONetParams init_deeponet(const DeepONetArchitecture& arch, Eigen::MatrixXd sensors, std::size_t query_dim,
                                    std::uint64_t seed, double input_scale = 1.0, double output_scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> b{static_cast<std::size_t>(sensors.cols())};
    b.insert(b.end(), arch.branch_hidden.begin(), arch.branch_hidden.end());
    b.push_back(arch.p);
    std::vector<std::size_t> t{query_dim};
    t.insert(t.end(), arch.trunk_hidden.begin(), arch.trunk_hidden.end());
    t.push_back(arch.p);
    DeepONetParams net{MLPParams::glorot(b, arch.activation, rng), MLPParams::glorot(t, arch.activation, rng),
                       std::move(sensors), input_scale, output_scale};
    net.validate();
    return net;
}

struct DeepONetTape {
    MLPTape branch;
    MLPTape trunk;
    Eigen::MatrixXd branch_out;  ///< p x batch
    Eigen::MatrixXd trunk_out;   ///< p x queries
};

/// Batch evaluation: inputs is m x batch, queries is query_dim x Q; returns Q x batch.
inline Eigen::MatrixXd deeponet_forward_batch(const DeepONetParams& net, const Eigen::MatrixXd& inputs,
                                              const Eigen::MatrixXd& queries, DeepONetTape* tape = nullptr) {
    if (static_cast<std::size_t>(inputs.rows()) != net.m()) {
        throw std::invalid_argument("deeponet_forward: expected " + std::to_string(net.m()) + " sensor values, got " +
                                    std::to_string(inputs.rows()));
    }
    if (static_cast<std::size_t>(queries.rows()) != net.query_dim()) {
        throw std::invalid_argument("deeponet_forward: query points must have dimension " +
                                    std::to_string(net.query_dim()));
    }
    Eigen::MatrixXd b = mlp_forward(net.branch, net.input_scale * inputs, tape ? &tape->branch : nullptr);
    Eigen::MatrixXd t = mlp_forward(net.trunk, queries, tape ? &tape->trunk : nullptr);
    Eigen::MatrixXd out = net.output_scale * (t.transpose() * b);
    if (tape) {
        tape->branch_out = std::move(b);
        tape->trunk_out = std::move(t);
    }
    return out;
}

inline Eigen::VectorXd deeponet_forward(const DeepONetParams& net, const Eigen::VectorXd& u_sensors,
                                        const Eigen::MatrixXd& y_points) {
    return deeponet_forward_batch(net, u_sensors, y_points).col(0);
}

/// Back-propagates d(loss)/d(output) (Q x batch) into `grad`.
inline void deeponet_backward(const DeepONetParams& net, const DeepONetTape& tape, const Eigen::MatrixXd& d_out,
                              DeepONetParams& grad) {
    Eigen::MatrixXd d_branch = net.output_scale * (tape.trunk_out * d_out);
    Eigen::MatrixXd d_trunk = net.output_scale * (tape.branch_out * d_out.transpose());
    mlp_backward(net.branch, tape.branch, std::move(d_branch), grad.branch);
    mlp_backward(net.trunk, tape.trunk, std::move(d_trunk), grad.trunk);
}

/// Mean over columns of ||pred - target|| / ||target||; fills d(loss)/d(pred) when grad is given.
inline double relative_l2_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, Eigen::MatrixXd* grad) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols() || pred.cols() == 0) {
        throw std::invalid_argument("relative_l2_loss: shape mismatch");
    }
    const double inv_batch = 1.0 / static_cast<double>(pred.cols());
    if (grad) grad->resize(pred.rows(), pred.cols());
    double total = 0.0;
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
        const double tn = target.col(c).norm();
        if (tn == 0.0) throw std::invalid_argument("relative_l2_loss: identically zero target");
        const Eigen::VectorXd e = pred.col(c) - target.col(c);
        const double en = e.norm();
        total += en / tn;
        if (grad) {
            if (en > 0.0) grad->col(c) = e * (inv_batch / (en * tn));
            else grad->col(c).setZero();
        }
    }
    return total * inv_batch;
}

/// ||pred - target||_F / ||target||_F over the whole batch (scalar-output maps, where single targets may vanish).
inline double pooled_relative_l2_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, Eigen::MatrixXd* grad) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols() || pred.size() == 0) {
        throw std::invalid_argument("pooled_relative_l2_loss: shape mismatch");
    }
    const double tn = target.norm();
    if (tn == 0.0) throw std::invalid_argument("pooled_relative_l2_loss: identically zero target");
    const Eigen::MatrixXd e = pred - target;
    const double en = e.norm();
    if (grad) {
        if (en > 0.0) *grad = e / (en * tn);
        else *grad = Eigen::MatrixXd::Zero(pred.rows(), pred.cols());
    }
    return en / tn;
}

/// Supervised operator-learning samples: column s of inputs maps to column s of targets on shared queries.
struct OperatorSamples {
    Eigen::MatrixXd inputs;   ///< m x N
    Eigen::MatrixXd targets;  ///< Q x N
    Eigen::MatrixXd queries;  ///< query_dim x Q

    std::size_t size() const { return static_cast<std::size_t>(inputs.cols()); }

    void validate() const {
        if (inputs.cols() == 0) throw std::invalid_argument("OperatorSamples: empty dataset");
        if (inputs.cols() != targets.cols() || targets.rows() != queries.cols()) {
            throw std::invalid_argument("OperatorSamples: inconsistent shapes");
        }
    }

    OperatorSamples subset(std::span<const std::size_t> idx) const {
        OperatorSamples s{Eigen::MatrixXd(inputs.rows(), static_cast<Eigen::Index>(idx.size())),
                          Eigen::MatrixXd(targets.rows(), static_cast<Eigen::Index>(idx.size())), queries};
        for (std::size_t c = 0; c < idx.size(); ++c) {
            s.inputs.col(static_cast<Eigen::Index>(c)) = inputs.col(static_cast<Eigen::Index>(idx[c]));
            s.targets.col(static_cast<Eigen::Index>(c)) = targets.col(static_cast<Eigen::Index>(idx[c]));
        }
        return s;
    }

    OperatorSamples range(std::size_t first, std::size_t count) const {
        std::vector<std::size_t> idx(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
        return subset(idx);
    }
};

inline double deeponet_loss(const DeepONetParams& net, const OperatorSamples& batch, DeepONetParams* grad) {
    DeepONetTape tape;
    const Eigen::MatrixXd pred = deeponet_forward_batch(net, batch.inputs, batch.queries, grad ? &tape : nullptr);
    Eigen::MatrixXd d_out;
    const double loss = relative_l2_loss(pred, batch.targets, grad ? &d_out : nullptr);
    if (grad) deeponet_backward(net, tape, d_out, *grad);
    return loss;
}

/// Mean per-sample relative L2 error of a trained network.
inline double evaluate_relative_l2(const DeepONetParams& net, const OperatorSamples& samples) {
    return deeponet_loss(net, samples, nullptr);
}

// ---------------------------------------------------------------------------------------------
// Training

enum class Optimizer { gradient_descent, momentum, adam };

inline std::string to_string(Optimizer o) {
    switch (o) {
        case Optimizer::gradient_descent: return "gradient_descent";
        case Optimizer::momentum: return "momentum";
        case Optimizer::adam: return "adam";
    }
    return "adam";
}

inline Optimizer optimizer_from_string(const std::string& s) {
    if (s == "gradient_descent" || s == "gd") return Optimizer::gradient_descent;
    if (s == "momentum") return Optimizer::momentum;
    if (s == "adam") return Optimizer::adam;
    throw std::invalid_argument("unknown optimizer '" + s + "'");
}

enum class Schedule { cosine, exponential };

inline std::string to_string(Schedule s) { return s == Schedule::exponential ? "exponential" : "cosine"; }

inline Schedule schedule_from_string(const std::string& s) {
    if (s == "cosine") return Schedule::cosine;
    if (s == "exponential") return Schedule::exponential;
    throw std::invalid_argument("unknown schedule '" + s + "'");
}

struct TrainConfig {
    double learning_rate = 1e-3;
    double final_learning_rate = 1e-5;  ///< schedule end point
    Schedule schedule = Schedule::cosine;
    std::size_t batch_size = 64;
    std::size_t epochs = 1000;
    std::uint64_t seed = 0;
    Optimizer optimizer = Optimizer::adam;
    double momentum = 0.9;
    double clip_norm = 0.0;  ///< global gradient-norm cap, 0 disables
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;

    void validate() const {
        if (!(learning_rate > 0.0) || !(final_learning_rate > 0.0) || batch_size == 0 || epochs == 0 ||
            !(momentum >= 0.0 && momentum < 1.0) || !(clip_norm >= 0.0) || !(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
            !(adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
            throw std::invalid_argument("TrainConfig: hyperparameters must be positive");
        }
    }

    double rate_at(std::size_t epoch) const {
        const double t = epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(epochs - 1) : 1.0;
        if (schedule == Schedule::exponential) return learning_rate * std::pow(final_learning_rate / learning_rate, t);
        return final_learning_rate + 0.5 * (learning_rate - final_learning_rate) * (1.0 + std::cos(std::numbers::pi * t));
    }
};

inline io::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"final_learning_rate", c.final_learning_rate},
            {"schedule", to_string(c.schedule)},
            {"batch_size", c.batch_size},       {"epochs", c.epochs},
            {"seed", c.seed},                   {"optimizer", to_string(c.optimizer)},
            {"momentum", c.momentum},           {"clip_norm", c.clip_norm},
            {"adam_beta1", c.adam_beta1},       {"adam_beta2", c.adam_beta2}};
}

inline TrainConfig train_config_from_json(const io::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.final_learning_rate = j.value("final_learning_rate", c.final_learning_rate);
    c.schedule = schedule_from_string(j.value("schedule", to_string(c.schedule)));
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.optimizer = optimizer_from_string(j.value("optimizer", to_string(c.optimizer)));
    c.momentum = j.value("momentum", c.momentum);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.validate();
    return c;
}

/// Per-epoch losses: train is the sample-weighted mean of minibatch losses seen during the epoch.
struct TrainHistory {
    std::vector<double> train;
    std::vector<double> validation;
};

template <typename P>
struct TrainResult {
    P params;
    TrainHistory history;
};

/// First-order optimizer over a flat parameter vector.
class OptimizerState {
public:
    OptimizerState(const TrainConfig& cfg, Eigen::Index n)
        : cfg_(cfg), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

    void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double rate) {
        switch (cfg_.optimizer) {
            case Optimizer::gradient_descent:
                theta -= rate * grad;
                break;
            case Optimizer::momentum:
                m_ = cfg_.momentum * m_ + grad;
                theta -= rate * m_;
                break;
            case Optimizer::adam: {
                const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2, eps = 1e-8;
                ++t_;
                m_ = b1 * m_ + (1.0 - b1) * grad;
                v_ = b2 * v_ + (1.0 - b2) * grad.cwiseProduct(grad);
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
                theta.array() -= rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
                break;
            }
        }
    }

private:
    TrainConfig cfg_;
    Eigen::VectorXd m_;
    Eigen::VectorXd v_;
    std::size_t t_ = 0;
};

/// Minibatch training loop shared by every architecture.
/// loss_grad(params, batch_indices, grad_or_null) returns the batch loss; validate(params) returns
/// a validation loss or NaN when there is none.
template <typename P, typename LossGrad, typename Validate>
TrainHistory fit(P& params, std::size_t n_samples, LossGrad&& loss_grad, Validate&& validate, const TrainConfig& cfg) {
    cfg.validate();
    if (n_samples == 0) throw std::invalid_argument("fit: empty dataset");
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) order[i] = i;
    Eigen::VectorXd theta = flatten(params);
    OptimizerState opt(cfg, theta.size());
    P grad = zeros_like(params);
    TrainHistory hist;
    const std::size_t batch = std::min(cfg.batch_size, n_samples);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double rate = cfg.rate_at(epoch);
        double weighted = 0.0;
        for (std::size_t first = 0; first < n_samples; first += batch) {
            const std::size_t count = std::min(batch, n_samples - first);
            const std::span<const std::size_t> idx(order.data() + first, count);
            grad = zeros_like(params);
            const double loss = loss_grad(params, idx, &grad);
            if (!std::isfinite(loss)) {
                throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
            }
            weighted += loss * static_cast<double>(count);
            Eigen::VectorXd g = flatten(grad);
            if (cfg.clip_norm > 0.0) {
                const double norm = g.norm();
                if (norm > cfg.clip_norm) g *= cfg.clip_norm / norm;
            }
            opt.step(theta, g, rate);
            unflatten(params, theta);
        }
        hist.train.push_back(weighted / static_cast<double>(n_samples));
        const double v = validate(params);
        if (!std::isnan(v)) hist.validation.push_back(v);
    }
    return hist;
}

inline TrainResult<DeepONetParams> train_deeponet(DeepONetParams init, const OperatorSamples& train,
                                                  const OperatorSamples* validation, const TrainConfig& cfg) {
    init.validate();
    train.validate();
    auto hist = fit(
        init, train.size(),
        [&](const DeepONetParams& p, std::span<const std::size_t> idx, DeepONetParams* g) {
            return deeponet_loss(p, train.subset(idx), g);
        },
        [&](const DeepONetParams& p) {
            return validation ? evaluate_relative_l2(p, *validation) : std::numeric_limits<double>::quiet_NaN();
        },
        cfg);
    return {std::move(init), std::move(hist)};
}

/// Windowed-mean monotonicity of a loss curve: the largest relative rise of the smoothed curve
/// over its running minimum (0 for a non-increasing curve).
inline double smoothed_loss_rise(const std::vector<double>& losses, std::size_t window = 10) {
    if (losses.size() < window || window == 0) return 0.0;
    double sum = 0.0, best = std::numeric_limits<double>::infinity(), worst_rise = 0.0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        sum += losses[i];
        if (i >= window) sum -= losses[i - window];
        if (i + 1 < window) continue;
        const double avg = sum / static_cast<double>(window);
        if (avg > best) worst_rise = std::max(worst_rise, (avg - best) / best);
        best = std::min(best, avg);
    }
    return worst_rise;
}

// ---------------------------------------------------------------------------------------------
// Gradient verification

/// Largest relative error between backprop and central differences over a random subset of at
/// least `n_check` coordinates (all of them when the model is smaller). Denominators are floored
/// at `floor` so coordinates with vanishing gradient are compared absolutely.
template <typename P, typename Loss>
double gradient_check_generic(const P& params, Loss&& loss_grad, double epsilon_fd, std::size_t n_check = 128,
                              std::uint64_t seed = 1, double floor = 1e-6) {
    if (!(epsilon_fd > 0.0)) throw std::invalid_argument("gradient_check: epsilon_fd must be positive");
    P grad = zeros_like(params);
    loss_grad(params, &grad);
    const Eigen::VectorXd g = flatten(grad);
    const Eigen::VectorXd theta = flatten(params);
    const auto n = static_cast<std::size_t>(theta.size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > n_check) {
        std::mt19937_64 rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(n_check);
    }
    P probe = params;
    double worst = 0.0;
    for (std::size_t i : idx) {
        Eigen::VectorXd t = theta;
        t[static_cast<Eigen::Index>(i)] += epsilon_fd;
        unflatten(probe, t);
        const double up = loss_grad(probe, nullptr);
        t[static_cast<Eigen::Index>(i)] -= 2.0 * epsilon_fd;
        unflatten(probe, t);
        const double down = loss_grad(probe, nullptr);
        const double fd = (up - down) / (2.0 * epsilon_fd);
        const double bp = g[static_cast<Eigen::Index>(i)];
        const double denom = std::max({std::abs(fd), std::abs(bp), floor});
        worst = std::max(worst, std::abs(fd - bp) / denom);
    }
    return worst;
}

inline double gradient_check(const DeepONetParams& net, const OperatorSamples& sample, double epsilon_fd = 1e-5) {
    return gradient_check_generic(
        net, [&](const DeepONetParams& p, DeepONetParams* g) { return deeponet_loss(p, sample, g); }, epsilon_fd);
}

// ---------------------------------------------------------------------------------------------
// Full feedback law: (beta, u) -> U

/// Stage 1 is a DeepONet producing the gain kernel at x = 1 - y_j for each u-sensor y_j; stage 2
/// multiplies by u(y_j) and mixes with a linear layer; stage 3 reduces to the scalar U with a
/// linear functional plus a small correction network.
struct FeedbackNetParams {
    DeepONetParams kernel;
    Eigen::MatrixXd u_sensors;       ///< 1 x m_u
    Eigen::MatrixXd kernel_queries;  ///< 1 x m_u, equal to 1 - u_sensors
    Eigen::MatrixXd mix;             ///< m_u x m_u
    Eigen::VectorXd reduce;          ///< m_u
    MLPParams correction;            ///< m_u -> ... -> 1

    std::size_t m_beta() const { return kernel.m(); }
    std::size_t m_u() const { return static_cast<std::size_t>(u_sensors.cols()); }

    template <typename F>
    void for_each_block(F&& f) {
        kernel.for_each_block(f);
        f(mix.data(), static_cast<std::size_t>(mix.size()));
        f(reduce.data(), static_cast<std::size_t>(reduce.size()));
        correction.for_each_block(f);
    }
    template <typename F>
    void for_each_block(F&& f) const {
        kernel.for_each_block(f);
        f(mix.data(), static_cast<std::size_t>(mix.size()));
        f(reduce.data(), static_cast<std::size_t>(reduce.size()));
        correction.for_each_block(f);
    }

    void validate() const {
        kernel.validate();
        correction.validate();
        const auto mu = static_cast<Eigen::Index>(m_u());
        if (kernel.query_dim() != 1 || kernel_queries.cols() != mu || mix.rows() != mu || mix.cols() != mu ||
            reduce.size() != mu || correction.input_dim() != m_u() || correction.output_dim() != 1) {
            throw std::invalid_argument("FeedbackNetParams: inconsistent shapes");
        }
    }
};

struct FeedbackArchitecture {
    DeepONetArchitecture kernel{{128, 128}, {128, 128}, 64, Activation::tanh};
    std::vector<std::size_t> correction_hidden{32};
};

/// Trapezoid weights for sorted, possibly non-uniform nodes.
inline Eigen::VectorXd trapezoid_weights(const Eigen::VectorXd& nodes) {
    const Eigen::Index n = nodes.size();
    Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        const double half = 0.5 * (nodes[i + 1] - nodes[i]);
        w[i] += half;
        w[i + 1] += half;
    }
    return w;
}

/// Stages 2 and 3 start as the exact trapezoid integral of stage 1 times u.
inline FeedbackNetParams init_feedback_net(const FeedbackArchitecture& arch, Eigen::MatrixXd beta_sensors,
                                           Eigen::MatrixXd u_sensors, std::uint64_t seed, double beta_scale = 1.0,
                                           double kernel_scale = 1.0) {
    FeedbackNetParams net;
    net.kernel = init_deeponet(arch.kernel, std::move(beta_sensors), 1, seed, beta_scale, kernel_scale);
    const Eigen::Index mu = u_sensors.cols();
    net.kernel_queries = (1.0 - u_sensors.array()).matrix();
    net.u_sensors = std::move(u_sensors);
    net.mix = Eigen::MatrixXd::Identity(mu, mu);
    net.reduce = trapezoid_weights(net.u_sensors.row(0).transpose());
    std::mt19937_64 rng(seed + 1);
    std::vector<std::size_t> sizes{static_cast<std::size_t>(mu)};
    sizes.insert(sizes.end(), arch.correction_hidden.begin(), arch.correction_hidden.end());
    sizes.push_back(1);
    net.correction = MLPParams::glorot(sizes, arch.kernel.activation, rng);
    net.correction.weights.back().setZero();
    net.validate();
    return net;
}

struct FeedbackTape {
    DeepONetTape kernel;
    Eigen::MatrixXd k;    ///< m_u x batch, stage-1 output
    Eigen::MatrixXd u;    ///< m_u x batch
    Eigen::MatrixXd z;    ///< k .* u
    Eigen::MatrixXd z2;   ///< mix * z
    MLPTape correction;
};

/// Stage-1 output: kernel values at x = 1 - y_j, one column per sample.
inline Eigen::MatrixXd feedback_stage1(const FeedbackNetParams& net, const Eigen::MatrixXd& betas,
                                       DeepONetTape* tape = nullptr) {
    return deeponet_forward_batch(net.kernel, betas, net.kernel_queries, tape);
}

/// Returns a 1 x batch row of predicted controls.
inline Eigen::MatrixXd feedback_forward_batch(const FeedbackNetParams& net, const Eigen::MatrixXd& betas,
                                              const Eigen::MatrixXd& us, FeedbackTape* tape = nullptr) {
    if (static_cast<std::size_t>(us.rows()) != net.m_u() || us.cols() != betas.cols()) {
        throw std::invalid_argument("feedback_forward: expected " + std::to_string(net.m_u()) + " u-sensor values");
    }
    Eigen::MatrixXd k = feedback_stage1(net, betas, tape ? &tape->kernel : nullptr);
    Eigen::MatrixXd z = k.cwiseProduct(us);
    Eigen::MatrixXd z2 = net.mix * z;
    Eigen::MatrixXd out = net.reduce.transpose() * z2;
    out += mlp_forward(net.correction, z2, tape ? &tape->correction : nullptr);
    if (tape) {
        tape->k = std::move(k);
        tape->u = us;
        tape->z = std::move(z);
        tape->z2 = std::move(z2);
    }
    return out;
}

inline double feedback_forward(const FeedbackNetParams& net, const Eigen::VectorXd& beta_sensors,
                               const Eigen::VectorXd& u_sensors) {
    return feedback_forward_batch(net, beta_sensors, u_sensors)(0, 0);
}

inline void feedback_backward(const FeedbackNetParams& net, const FeedbackTape& tape, const Eigen::MatrixXd& d_out,
                              FeedbackNetParams& grad) {
    grad.reduce += tape.z2 * d_out.transpose();
    Eigen::MatrixXd d_z2 = net.reduce * d_out;
    d_z2 += mlp_backward(net.correction, tape.correction, d_out, grad.correction, true);
    grad.mix.noalias() += d_z2 * tape.z.transpose();
    const Eigen::MatrixXd d_z = net.mix.transpose() * d_z2;
    deeponet_backward(net.kernel, tape.kernel, d_z.cwiseProduct(tape.u), grad.kernel);
}

struct FeedbackSamples {
    Eigen::MatrixXd betas;     ///< m_beta x N
    Eigen::MatrixXd u;         ///< m_u x N
    Eigen::RowVectorXd controls;  ///< N

    std::size_t size() const { return static_cast<std::size_t>(betas.cols()); }

    void validate() const {
        if (betas.cols() == 0) throw std::invalid_argument("FeedbackSamples: empty dataset");
        if (u.cols() != betas.cols() || controls.size() != betas.cols()) {
            throw std::invalid_argument("FeedbackSamples: inconsistent shapes");
        }
    }

    FeedbackSamples subset(std::span<const std::size_t> idx) const {
        const auto n = static_cast<Eigen::Index>(idx.size());
        FeedbackSamples s{Eigen::MatrixXd(betas.rows(), n), Eigen::MatrixXd(u.rows(), n), Eigen::RowVectorXd(n)};
        for (Eigen::Index c = 0; c < n; ++c) {
            const auto src = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(c)]);
            s.betas.col(c) = betas.col(src);
            s.u.col(c) = u.col(src);
            s.controls[c] = controls[src];
        }
        return s;
    }

    FeedbackSamples range(std::size_t first, std::size_t count) const {
        std::vector<std::size_t> idx(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
        return subset(idx);
    }
};

/// Pooled relative L2 error ||U_hat - U|| / ||U|| over the batch.
inline double feedback_loss(const FeedbackNetParams& net, const FeedbackSamples& batch, FeedbackNetParams* grad) {
    FeedbackTape tape;
    const Eigen::MatrixXd pred = feedback_forward_batch(net, batch.betas, batch.u, grad ? &tape : nullptr);
    Eigen::MatrixXd d_out;
    const double loss = pooled_relative_l2_loss(pred, batch.controls, grad ? &d_out : nullptr);
    if (grad) feedback_backward(net, tape, d_out, *grad);
    return loss;
}

inline double gradient_check(const FeedbackNetParams& net, const FeedbackSamples& sample, double epsilon_fd = 1e-5) {
    return gradient_check_generic(
        net, [&](const FeedbackNetParams& p, FeedbackNetParams* g) { return feedback_loss(p, sample, g); }, epsilon_fd);
}

inline TrainResult<FeedbackNetParams> train_feedback_net(FeedbackNetParams init, const FeedbackSamples& train,
                                                         const FeedbackSamples* validation, const TrainConfig& cfg) {
    init.validate();
    train.validate();
    auto hist = fit(
        init, train.size(),
        [&](const FeedbackNetParams& p, std::span<const std::size_t> idx, FeedbackNetParams* g) {
            return feedback_loss(p, train.subset(idx), g);
        },
        [&](const FeedbackNetParams& p) {
            return validation ? feedback_loss(p, *validation, nullptr) : std::numeric_limits<double>::quiet_NaN();
        },
        cfg);
    return {std::move(init), std::move(hist)};
}

// ---------------------------------------------------------------------------------------------
// Grid adapters

/// Values of f at arbitrary 1D sensor locations, piecewise-linear between nodes.
inline Eigen::VectorXd sample_at(const GridFunction1D& f, const Eigen::MatrixXd& sensors) {
    Eigen::VectorXd v(sensors.cols());
    for (Eigen::Index j = 0; j < sensors.cols(); ++j) v[j] = interpolate(f, sensors(0, j));
    return v;
}

/// Piecewise-linear interpolation on the triangle: bilinear in full cells, linear in diagonal cells.
inline double interpolate(const TriangularGridFunction& f, double x, double y) {
    const std::size_t n = f.n_cells();
    const double nn = static_cast<double>(n);
    const double sx = std::clamp(x, 0.0, 1.0) * nn;
    const double sy = std::clamp(std::min(y, x), 0.0, 1.0) * nn;
    const auto i = std::min(static_cast<std::size_t>(sx), n - 1);
    const auto j = std::min(static_cast<std::size_t>(sy), i);
    const double a = sx - static_cast<double>(i);
    const double b = sy - static_cast<double>(j);
    if (j == i) {
        // nodes (i,i), (i+1,i), (i+1,i+1); b <= a inside the cell
        return f(i, i) + a * (f(i + 1, i) - f(i, i)) + b * (f(i + 1, i + 1) - f(i + 1, i));
    }
    return (1 - a) * (1 - b) * f(i, j) + a * (1 - b) * f(i + 1, j) + (1 - a) * b * f(i, j + 1) + a * b * f(i + 1, j + 1);
}

inline Eigen::VectorXd sample_at(const TriangularGridFunction& f, const Eigen::MatrixXd& sensors) {
    Eigen::VectorXd v(sensors.cols());
    for (Eigen::Index j = 0; j < sensors.cols(); ++j) v[j] = interpolate(f, sensors(0, j), sensors(1, j));
    return v;
}

/// Uniform 1D sensors x_j = j / (m - 1).
inline Eigen::MatrixXd uniform_sensors(std::size_t m) {
    if (m < 2) throw std::invalid_argument("uniform_sensors: need at least two sensors");
    Eigen::MatrixXd s(1, static_cast<Eigen::Index>(m));
    for (std::size_t j = 0; j < m; ++j) s(0, static_cast<Eigen::Index>(j)) = static_cast<double>(j) / static_cast<double>(m - 1);
    return s;
}

/// Grid nodes of the triangle with n cells per side, in storage order.
inline Eigen::MatrixXd triangle_nodes(std::size_t n) {
    Eigen::MatrixXd s(2, static_cast<Eigen::Index>(TriangularGridFunction::storage_size(n)));
    for (std::size_t i = 0; i <= n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            const auto c = static_cast<Eigen::Index>(TriangularGridFunction::index(i, j));
            s(0, c) = static_cast<double>(i) / static_cast<double>(n);
            s(1, c) = static_cast<double>(j) / static_cast<double>(n);
        }
    }
    return s;
}

/// Learned 1D kernel on an arbitrary grid (trunk evaluated at that grid's nodes).
inline GridFunction1D deeponet_kernel(const DeepONetParams& net, const GridFunction1D& beta, std::size_t n_cells) {
    Eigen::MatrixXd q(1, static_cast<Eigen::Index>(n_cells + 1));
    for (std::size_t i = 0; i <= n_cells; ++i) q(0, static_cast<Eigen::Index>(i)) = static_cast<double>(i) / static_cast<double>(n_cells);
    const Eigen::VectorXd k = deeponet_forward(net, sample_at(beta, net.sensors), q);
    return GridFunction1D(n_cells, std::vector<double>(k.data(), k.data() + k.size()));
}

inline Eigen::VectorXd deeponet2d_forward(const DeepONetParams& net, const Eigen::VectorXd& f_sensors,
                                          const Eigen::MatrixXd& xy_points) {
    if (net.query_dim() != 2) throw std::invalid_argument("deeponet2d_forward: trunk must take (x, y)");
    return deeponet_forward(net, f_sensors, xy_points);
}

/// Learned 2D kernel on the triangle with n_cells per side.
inline TriangularGridFunction deeponet_kernel_2d(const DeepONetParams& net, const TriangularGridFunction& f,
                                                 std::size_t n_cells) {
    const Eigen::VectorXd k = deeponet2d_forward(net, sample_at(f, net.sensors), triangle_nodes(n_cells));
    return TriangularGridFunction(n_cells, std::vector<double>(k.data(), k.data() + k.size()));
}

/// Learned kernel for a fixed beta, laid out on the feedback net's u-sensor grid (ascending x).
inline Eigen::VectorXd feedback_kernel(const FeedbackNetParams& net, const Eigen::VectorXd& beta_sensors) {
    return feedback_stage1(net, beta_sensors).col(0).reverse();
}

/// Boundary law u -> U_hat for a fixed plant beta.
inline std::function<double(const GridFunction1D&)> feedback_law(FeedbackNetParams net, const GridFunction1D& beta) {
    Eigen::VectorXd b = sample_at(beta, net.kernel.sensors);
    return [net = std::move(net), b = std::move(b)](const GridFunction1D& u) {
        return feedback_forward(net, b, sample_at(u, net.u_sensors));
    };
}

// ---------------------------------------------------------------------------------------------
// Model files: <dir>/model.json + <dir>/params.f64

inline constexpr const char* kModelFormat = "backstep-model";
inline constexpr int kModelVersion = 1;

namespace detail {

inline io::json mlp_arch_json(const MLPParams& p) {
    return {{"layer_sizes", p.layer_sizes}, {"activation", to_string(p.activation)}};
}

inline MLPParams mlp_from_json(const io::json& j) {
    return MLPParams::zeros(j.at("layer_sizes").get<std::vector<std::size_t>>(),
                            activation_from_string(j.at("activation").get<std::string>()));
}

inline io::json matrix_json(const Eigen::MatrixXd& m) {
    io::json rows = io::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        rows.push_back(row);
    }
    return rows;
}

inline Eigen::MatrixXd matrix_from_json(const io::json& j) {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    if (rows.empty()) return {};
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) throw FormatError("ragged matrix in model manifest");
        for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
    return m;
}

inline io::json deeponet_arch_json(const DeepONetParams& net) {
    return {{"branch", mlp_arch_json(net.branch)},
            {"trunk", mlp_arch_json(net.trunk)},
            {"sensors", matrix_json(net.sensors)},
            {"input_scale", net.input_scale},
            {"output_scale", net.output_scale}};
}

inline DeepONetParams deeponet_from_json(const io::json& j) {
    DeepONetParams net{mlp_from_json(j.at("branch")), mlp_from_json(j.at("trunk")), matrix_from_json(j.at("sensors")),
                       j.at("input_scale").get<double>(), j.at("output_scale").get<double>()};
    return net;
}

template <typename P>
void write_model(const std::filesystem::path& dir, const std::string& kind, io::json arch, const P& params,
                 const io::json& meta) {
    std::filesystem::create_directories(dir);
    const Eigen::VectorXd flat = flatten(params);
    const std::string crc = io::write_f64(dir / "params.f64", std::vector<double>(flat.data(), flat.data() + flat.size()));
    io::json manifest{{"format", kModelFormat},
                      {"version", kModelVersion},
                      {"kind", kind},
                      {"architecture", std::move(arch)},
                      {"parameter_count", flat.size()},
                      {"blob", "params.f64"},
                      {"checksum", crc},
                      {"meta", meta}};
    io::write_json(dir / "model.json", manifest);
}

template <typename P>
void read_params(const std::filesystem::path& dir, const io::json& manifest, P& params) {
    const auto n = parameter_count(params);
    if (manifest.at("parameter_count").get<std::size_t>() != n) throw FormatError("model: parameter count mismatch");
    const auto values = io::read_f64(dir / manifest.at("blob").get<std::string>(), manifest.at("checksum"), n);
    unflatten(params, Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())));
}

inline io::json read_model_manifest(const std::filesystem::path& dir, const std::string& kind) {
    const io::json manifest = io::read_json(dir / "model.json");
    io::require_format(manifest, kModelFormat, kModelVersion);
    if (manifest.value("kind", std::string()) != kind) {
        throw KindMismatch("model kind '" + manifest.value("kind", std::string()) + "', expected '" + kind + "'");
    }
    return manifest;
}

}  // namespace detail

/// Reads the kind tag of a saved model ("deeponet" or "feedback").
inline std::string model_kind(const std::filesystem::path& dir) {
    const io::json manifest = io::read_json(dir / "model.json");
    io::require_format(manifest, kModelFormat, kModelVersion);
    return manifest.value("kind", std::string());
}

inline void save_model(const std::filesystem::path& dir, const DeepONetParams& net, const io::json& meta = io::json::object()) {
    net.validate();
    detail::write_model(dir, "deeponet", detail::deeponet_arch_json(net), net, meta);
}

inline void save_model(const std::filesystem::path& dir, const FeedbackNetParams& net,
                       const io::json& meta = io::json::object()) {
    net.validate();
    io::json arch{{"kernel", detail::deeponet_arch_json(net.kernel)},
                  {"u_sensors", detail::matrix_json(net.u_sensors)},
                  {"correction", detail::mlp_arch_json(net.correction)}};
    detail::write_model(dir, "feedback", std::move(arch), net, meta);
}

inline DeepONetParams load_deeponet(const std::filesystem::path& dir, io::json* meta = nullptr) {
    const io::json manifest = detail::read_model_manifest(dir, "deeponet");
    DeepONetParams net = detail::deeponet_from_json(manifest.at("architecture"));
    detail::read_params(dir, manifest, net);
    net.validate();
    if (meta) *meta = manifest.value("meta", io::json::object());
    return net;
}

inline FeedbackNetParams load_feedback_net(const std::filesystem::path& dir, io::json* meta = nullptr) {
    const io::json manifest = detail::read_model_manifest(dir, "feedback");
    const auto& arch = manifest.at("architecture");
    FeedbackNetParams net;
    net.kernel = detail::deeponet_from_json(arch.at("kernel"));
    net.u_sensors = detail::matrix_from_json(arch.at("u_sensors"));
    net.kernel_queries = (1.0 - net.u_sensors.array()).matrix();
    const Eigen::Index mu = net.u_sensors.cols();
    net.mix = Eigen::MatrixXd::Zero(mu, mu);
    net.reduce = Eigen::VectorXd::Zero(mu);
    net.correction = detail::mlp_from_json(arch.at("correction"));
    detail::read_params(dir, manifest, net);
    net.validate();
    if (meta) *meta = manifest.value("meta", io::json::object());
    return net;
}

}  // namespace backstep
