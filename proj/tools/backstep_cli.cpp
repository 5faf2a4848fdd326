// backstep: dataset generation, kernel solves, training, simulation and stability checks.
//
// Exit codes: 0 success, 1 computation or verification failure, 2 usage / IO / format error.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "backstep/dataset.hpp"
#include "backstep/kernel2d.hpp"
#include "backstep/neural_operator.hpp"
#include "backstep/pde_sim.hpp"
#include "backstep/stability.hpp"

using namespace backstep;
namespace fs = std::filesystem;
using io::json;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Plant description: beta:<gamma>, pide:<gamma> or file:<path> (a bare path also works).
struct Plant {
    bool pide = false;
    std::string spec;
    GridFunction1D beta{1};
    GridFunction1D g{1};
    TriangularGridFunction f{1};

    std::size_t n_cells() const { return pide ? g.n_cells() : beta.n_cells(); }
};

double parse_number(const std::string& text, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw UsageError("cannot parse " + what + " '" + text + "'");
    }
}

/// Reads a gain function from JSON ({"beta": [...]} or a bare array) or from text with one
/// value per line (a trailing column is used when a line holds "x,beta").
GridFunction1D read_beta_file(const fs::path& path) {
    const auto bytes = io::read_bytes(path);
    const std::string text(bytes.begin(), bytes.end());
    std::vector<double> values;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && (text[first] == '{' || text[first] == '[')) {
        json j;
        try {
            j = json::parse(text);
            values = (j.is_object() ? j.at("beta") : j).get<std::vector<double>>();
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
    } else {
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
            const auto comma = line.find_last_of(',');
            const std::string cell = comma == std::string::npos ? line : line.substr(comma + 1);
            try {
                std::size_t used = 0;
                values.push_back(std::stod(cell, &used));
                if (cell.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                if (values.empty() && line_no == 1) continue;  // header
                throw FormatError(path.string() + ":" + std::to_string(line_no) + ": not a number: '" + cell + "'");
            }
        }
    }
    if (values.size() < 2) throw FormatError(path.string() + ": need at least two samples of beta");
    const std::size_t n_cells = values.size() - 1;
    try {
        return GridFunction1D(n_cells, std::move(values));
    } catch (const std::invalid_argument& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

Plant parse_plant(const std::string& spec, std::size_t n_cells, double amplitude) {
    Plant p;
    p.spec = spec;
    const auto colon = spec.find(':');
    const std::string kind = colon == std::string::npos ? "file" : spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? spec : spec.substr(colon + 1);
    if (kind == "beta" || kind == "pide") {
        const double gamma = parse_number(arg, "gamma");
        if (!(gamma > 0.0)) throw UsageError("gamma must be positive");
        if (kind == "beta") {
            p.beta = chebyshev_beta({amplitude, gamma}, n_cells);
        } else {
            p.pide = true;
            p.g = GridFunction1D(n_cells, 0.0);
            p.f = chebyshev_product({amplitude, gamma}, n_cells);
        }
    } else if (kind == "file") {
        p.beta = read_beta_file(arg);
    } else {
        throw UsageError("unknown plant '" + spec + "' (expected beta:<gamma>, pide:<gamma> or file:<path>)");
    }
    return p;
}

GridFunction1D initial_state(std::size_t n_cells, double scale) {
    return GridFunction1D::sample(n_cells, [scale](double x) { return scale * (std::sin(std::numbers::pi * x) + 1.0); });
}

std::string flags_line(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
    return s;
}

json read_config(const std::string& path) {
    if (path.empty()) return json::object();
    json j = io::read_json(path);
    if (!j.is_object()) throw FormatError(path + ": config must be a JSON object");
    return j;
}

KernelSolveConfig solver_config(const json& cfg) {
    KernelSolveConfig s;
    if (cfg.contains("solver")) {
        s.tolerance = cfg["solver"].value("tolerance", s.tolerance);
        s.max_terms = cfg["solver"].value("max_terms", s.max_terms);
    }
    s.validate();
    return s;
}

void write_csv_series(const fs::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& columns) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << std::setprecision(17);
    for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
    out << '\n';
    const std::size_t rows = columns.empty() ? 0 : columns[0].size();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c][r];
        out << '\n';
    }
}

// ---------------------------------------------------------------------------------------------
// Controllers

struct LoadedController {
    Controller controller = Controller::open_loop();
    std::string description;
    std::optional<GridFunction1D> kernel;
    std::optional<TriangularGridFunction> kernel2d;
    std::optional<std::function<double(const GridFunction1D&)>> law;
};

LoadedController make_controller(const std::string& spec, const Plant& plant, const KernelSolveConfig& solver) {
    LoadedController c;
    c.description = spec;
    const std::size_t n = plant.n_cells();
    if (spec == "open") return c;
    if (spec == "exact") {
        if (plant.pide) {
            c.kernel2d = solve_kernel_2d(plant.g, plant.f, solver);
            c.controller = Controller::gain_kernel_2d(*c.kernel2d);
        } else {
            c.kernel = solve_kernel(plant.beta, solver);
            c.controller = Controller::gain_kernel(*c.kernel);
        }
        return c;
    }
    if (spec.rfind("model:", 0) != 0) throw UsageError("unknown controller '" + spec + "' (open, exact or model:<dir>)");
    const fs::path dir = spec.substr(6);
    const std::string kind = model_kind(dir);
    if (kind == "deeponet") {
        const auto net = load_deeponet(dir);
        if (net.query_dim() == 2) {
            if (!plant.pide) throw UsageError("a 2D kernel model needs a pide:<gamma> plant");
            c.kernel2d = deeponet_kernel_2d(net, plant.f, n);
            c.controller = Controller::gain_kernel_2d(*c.kernel2d);
        } else {
            if (plant.pide) throw UsageError("a 1D kernel model needs a beta plant");
            c.kernel = deeponet_kernel(net, plant.beta, n);
            c.controller = Controller::gain_kernel(*c.kernel);
        }
    } else if (kind == "feedback") {
        if (plant.pide) throw UsageError("a feedback-law model needs a beta plant");
        c.law = feedback_law(load_feedback_net(dir), plant.beta);
        c.controller = Controller::neural_feedback(*c.law, "model:" + dir.string());
    } else {
        throw FormatError(dir.string() + ": unknown model kind '" + kind + "'");
    }
    return c;
}

// ---------------------------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
    std::string kind = "kernel1d";
    std::size_t n = 900;
    double gamma_min = 2.0;
    double gamma_max = 8.0;
    std::size_t cells = 0;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    std::string config;
    std::string out;
};

int cmd_gen_data(const GenDataArgs& a, const std::string& flags) {
    if (a.n == 0) throw UsageError("--n must be at least 1");
    const json cfg = read_config(a.config);
    const auto solver = solver_config(cfg);
    const double amplitude = cfg.value("amplitude", 6.0);
    const DatasetKind kind = dataset_kind_from_string(a.kind);
    const std::size_t cells = a.cells ? a.cells : (kind == DatasetKind::kernel2d ? 50 : 100);
    const GammaRange range{a.gamma_min, a.gamma_max};
    const GenerateOptions opt{a.threads};
    const auto t0 = std::chrono::steady_clock::now();
    Dataset d;
    if (kind == DatasetKind::kernel1d) {
        d = generate_kernel1d_dataset(a.n, range, cells, a.seed, solver, amplitude, opt);
    } else if (kind == DatasetKind::feedback) {
        UDistribution u;
        u.terms = cfg.value("u_terms", u.terms);
        u.coefficient_bound = cfg.value("u_coefficient_bound", u.coefficient_bound);
        d = generate_feedback_dataset(a.n, range, u, cells, a.seed, solver, amplitude, opt);
    } else {
        d = generate_kernel2d_dataset(a.n, range, cells, a.seed, solver, amplitude, opt);
    }
    d.manifest.meta = {{"command", flags}};
    save_dataset(a.out, d);
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "wrote " << a.n << " " << a.kind << " samples (n_cells " << cells << ") to " << a.out << " in "
              << std::fixed << std::setprecision(2) << sec << " s\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------------
// solve-kernel

struct SolveArgs {
    std::string plant;
    std::size_t cells = 100;
    double amplitude = 6.0;
    std::string config;
    std::string out;
};

int cmd_solve_kernel(const SolveArgs& a, const std::string& flags) {
    const auto solver = solver_config(read_config(a.config));
    const Plant plant = parse_plant(a.plant, a.cells, a.amplitude);
    const std::size_t n = plant.n_cells();
    json j{{"command", flags}, {"plant", a.plant}, {"n_cells", n}};
    const bool csv = fs::path(a.out).extension() == ".csv";
    double residual = 0.0;
    if (plant.pide) {
        const auto k = solve_kernel_2d(plant.g, plant.f, solver);
        residual = residual_2d(plant.g, plant.f, k);
        j["layout"] = "lower triangle, row-major: (i, j) for j <= i at index i(i+1)/2 + j";
        j["kernel2d"] = std::vector<double>(k.values().begin(), k.values().end());
        j["sup_norm"] = sup_norm(k);
        if (csv) {
            std::vector<double> xs, ys, ks;
            for (std::size_t i = 0; i <= n; ++i)
                for (std::size_t jj = 0; jj <= i; ++jj) {
                    xs.push_back(static_cast<double>(i) / static_cast<double>(n));
                    ys.push_back(static_cast<double>(jj) / static_cast<double>(n));
                    ks.push_back(k(i, jj));
                }
            write_csv_series(a.out, {"x", "y", "k"}, {xs, ys, ks});
        }
    } else {
        const auto k = solve_kernel(plant.beta, solver);
        residual = residual_1d(plant.beta, k);
        std::vector<double> xs(n + 1);
        for (std::size_t i = 0; i <= n; ++i) xs[i] = plant.beta.x(i);
        j["x"] = xs;
        j["beta"] = std::vector<double>(plant.beta.values().begin(), plant.beta.values().end());
        j["kernel"] = std::vector<double>(k.values().begin(), k.values().end());
        j["sup_norm"] = sup_norm(k);
        if (csv) {
            write_csv_series(a.out, {"x", "beta", "k"},
                             {xs, {plant.beta.values().begin(), plant.beta.values().end()},
                              {k.values().begin(), k.values().end()}});
        }
    }
    j["residual"] = residual;
    if (!csv && !a.out.empty()) io::write_json(a.out, j);
    std::cout << "kernel sup-norm " << std::setprecision(6) << j["sup_norm"].get<double>() << ", residual "
              << std::scientific << std::setprecision(3) << residual << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string data;
    std::string config;
    std::string out;
    bool resume = false;
};

DeepONetArchitecture architecture_from_json(const json& j, DeepONetArchitecture arch) {
    arch.branch_hidden = j.value("branch_hidden", arch.branch_hidden);
    arch.trunk_hidden = j.value("trunk_hidden", arch.trunk_hidden);
    arch.p = j.value("p", arch.p);
    arch.activation = activation_from_string(j.value("activation", to_string(arch.activation)));
    return arch;
}

void append_history(const fs::path& path, std::size_t first_epoch, const TrainHistory& h, bool fresh) {
    std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
    if (!out) throw IoError("cannot write " + path.string());
    out << std::setprecision(17);
    if (fresh) out << "epoch,train_rel_l2,test_rel_l2\n";
    for (std::size_t e = 0; e < h.train.size(); ++e) {
        out << first_epoch + e << "," << h.train[e] << ",";
        if (e < h.validation.size()) out << h.validation[e];
        out << "\n";
    }
}

int cmd_train(const TrainArgs& a, const std::string& flags) {
    if (!fs::is_directory(a.data)) throw IoError("dataset directory not found: " + a.data);
    const json cfg = read_config(a.config);
    TrainConfig train_cfg = train_config_from_json(cfg.value("train", json::object()));
    const Dataset d = load_dataset(a.data);
    const std::size_t N = d.size();
    const std::size_t n_test = cfg.value("n_test", std::max<std::size_t>(1, N / 10));
    if (n_test >= N) throw UsageError("n_test must be smaller than the dataset (" + std::to_string(N) + ")");
    const std::size_t n_train = N - n_test;
    const std::size_t sensor_stride = cfg.value("sensor_stride", std::size_t{1});
    const std::size_t query_stride = cfg.value("query_stride", std::size_t{1});
    const fs::path out = a.out;
    const bool resuming = a.resume && fs::exists(out / "model.json");
    json meta{{"command", flags}, {"dataset", fs::absolute(a.data).string()}, {"config", cfg}, {"n_train", n_train},
              {"n_test", n_test}};
    std::size_t done_epochs = 0;
    if (resuming) {
        json old;
        if (model_kind(out) == "feedback") load_feedback_net(out, &old);
        else load_deeponet(out, &old);
        done_epochs = old.value("epochs_completed", std::size_t{0});
        train_cfg.seed += done_epochs;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const json arch_cfg = cfg.value("architecture", json::object());
    double test_error = 0.0, grad_err = 0.0;
    TrainHistory history;

    if (d.manifest.kind == DatasetKind::feedback) {
        const auto train = feedback_samples(d, 0, n_train);
        const auto test = feedback_samples(d, n_train, n_test);
        FeedbackNetParams net;
        if (resuming) {
            net = load_feedback_net(out);
        } else {
            FeedbackArchitecture arch;
            arch.kernel = architecture_from_json(arch_cfg, arch.kernel);
            arch.correction_hidden = arch_cfg.value("correction_hidden", arch.correction_hidden);
            double k_rms = 0.0;
            const std::size_t probe = std::min<std::size_t>(N, 50);
            for (std::size_t s = 0; s < probe; ++s) {
                const GridFunction1D beta(d.manifest.n_cells, detail::sample_values(d.array("betas"), s));
                const double l2 = l2_norm(solve_kernel(beta, d.manifest.solver));
                k_rms += l2 * l2;
            }
            k_rms = std::sqrt(k_rms / static_cast<double>(probe));
            net = init_feedback_net(arch, uniform_sensors(d.manifest.n_cells + 1), uniform_sensors(d.manifest.n_cells + 1),
                                    train_cfg.seed, 1.0 / d.manifest.amplitude, k_rms);
        }
        grad_err = gradient_check(net, train.range(0, std::min<std::size_t>(4, n_train)));
        if (grad_err >= 1e-5) {
            std::cerr << "gradient check failed: " << grad_err << "\n";
            return kFailure;
        }
        auto res = train_feedback_net(net, train, &test, train_cfg);
        history = res.history;
        test_error = feedback_loss(res.params, test, nullptr);
        meta["epochs_completed"] = done_epochs + train_cfg.epochs;
        meta["test_rel_l2"] = test_error;
        meta["train"] = to_json(train_cfg);
        save_model(out, res.params, meta);
    } else {
        const auto train = operator_samples(d, 0, n_train, sensor_stride, query_stride);
        const auto test = operator_samples(d, n_train, n_test, sensor_stride, 1);
        const std::size_t qdim = d.manifest.kind == DatasetKind::kernel2d ? 2 : 1;
        DeepONetParams net;
        if (resuming) {
            net = load_deeponet(out);
        } else {
            const double rms = std::sqrt(train.targets.squaredNorm() / static_cast<double>(train.targets.size()));
            net = init_deeponet(architecture_from_json(arch_cfg, {}), operator_sensors(d, sensor_stride), qdim,
                                train_cfg.seed, 1.0 / train.inputs.cwiseAbs().maxCoeff(), rms);
        }
        if (static_cast<std::size_t>(train.inputs.rows()) != net.m()) {
            throw UsageError("model expects " + std::to_string(net.m()) + " sensors; config gives " +
                             std::to_string(train.inputs.rows()));
        }
        grad_err = gradient_check(net, train.range(0, std::min<std::size_t>(4, n_train)));
        if (grad_err >= 1e-5) {
            std::cerr << "gradient check failed: " << grad_err << "\n";
            return kFailure;
        }
        auto res = train_deeponet(net, train, &test, train_cfg);
        history = res.history;
        test_error = evaluate_relative_l2(res.params, test);
        meta["epochs_completed"] = done_epochs + train_cfg.epochs;
        meta["test_rel_l2"] = test_error;
        meta["train"] = to_json(train_cfg);
        save_model(out, res.params, meta);
    }
    append_history(out / "history.csv", done_epochs, history, !resuming);
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "gradient check " << std::scientific << std::setprecision(2) << grad_err << "\n";
    std::cout << "final train relative L2 " << std::setprecision(4) << history.train.back() << "\n";
    std::cout << "final test relative L2 " << test_error << "\n";
    std::cout << "epochs " << done_epochs + train_cfg.epochs << ", time " << std::fixed << std::setprecision(1) << sec
              << " s, model written to " << out.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------------
// simulate

struct SimArgs {
    std::string plant;
    std::string controller = "exact";
    double t_final = 2.0;
    std::size_t cells = 200;
    double amplitude = 6.0;
    double u0_scale = 1.0;
    std::string scheme = "automatic";
    std::string config;
    std::string out;
};

int cmd_simulate(const SimArgs& a, const std::string& flags) {
    const auto solver = solver_config(read_config(a.config));
    const Plant plant = parse_plant(a.plant, a.cells, a.amplitude);
    const auto ctrl = make_controller(a.controller, plant, solver);
    const std::size_t n = plant.n_cells();
    const auto u0 = initial_state(n, a.u0_scale);
    const SimConfig sim{a.t_final, time_scheme_from_string(a.scheme)};
    const auto rec = plant.pide ? simulate_pide(plant.g, plant.f, u0, ctrl.controller, sim)
                                : simulate_transport(plant.beta, u0, ctrl.controller, sim);
    const fs::path out = a.out;
    fs::create_directories(out);
    std::vector<double> t, x, u;
    for (std::size_t s = 0; s < rec.n_stored(); ++s) {
        const auto state = rec.state_values(s);
        for (std::size_t i = 0; i <= n; ++i) {
            t.push_back(rec.time(s));
            x.push_back(static_cast<double>(i) / static_cast<double>(n));
            u.push_back(state[i]);
        }
    }
    write_csv_series(out / "trajectory.csv", {"t", "x", "u"}, {t, x, u});
    std::vector<double> times(rec.n_stored());
    for (std::size_t s = 0; s < times.size(); ++s) times[s] = rec.time(s);
    const auto norms = rec.l2_norms();
    write_csv_series(out / "controls.csv", {"t", "U", "l2_norm"},
                     {times, {rec.controls().begin(), rec.controls().end()}, norms});
    const double ratio = norms.back() / norms.front();
    io::write_json(out / "manifest.json", {{"command", flags},
                                           {"plant", a.plant},
                                           {"controller", a.controller},
                                           {"n_cells", n},
                                           {"t_final", a.t_final},
                                           {"scheme", a.scheme},
                                           {"u0_scale", a.u0_scale},
                                           {"final_norm_ratio", ratio},
                                           {"tail_sup_norm", detail::tail_sup(norms, n)}});
    std::cout << "||u(T)|| / ||u(0)|| = " << std::scientific << std::setprecision(4) << ratio << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------------
// verify

struct VerifyArgs {
    std::string experiment = "gain";
    std::string plant;
    std::string controller;
    double t_final = 2.0;
    std::size_t cells = 100;
    double amplitude = 6.0;
    std::optional<double> u0_scale;
    double c = 2.0;
    double B_u = 6.0;
    double final_ratio = 0.05;
    std::string config;
    std::string out;
};

int cmd_verify(const VerifyArgs& a, const std::string& flags) {
    const auto solver = solver_config(read_config(a.config));
    const Plant plant = parse_plant(a.plant, a.cells, a.amplitude);
    const std::size_t n = plant.n_cells();
    ExperimentConfig cfg;
    cfg.c = a.c;
    cfg.t_final = a.t_final;
    cfg.B_u = a.B_u;
    cfg.final_ratio = a.final_ratio;
    StabilityReport report;
    if (a.experiment == "gain") {
        if (plant.pide) throw UsageError("gain experiments need a beta plant");
        const auto ctrl = make_controller(a.controller, plant, solver);
        const GridFunction1D k_hat = ctrl.kernel ? *ctrl.kernel : GridFunction1D(n, 0.0);
        if (ctrl.law) throw UsageError("gain experiments need a kernel controller (exact or a DeepONet model)");
        report = run_gain_experiment(plant.beta, k_hat, initial_state(n, a.u0_scale.value_or(1.0)), cfg);
    } else if (a.experiment == "feedback") {
        if (plant.pide) throw UsageError("feedback experiments need a beta plant");
        const auto ctrl = make_controller(a.controller, plant, solver);
        std::function<double(const GridFunction1D&)> law;
        if (ctrl.law) law = *ctrl.law;
        else if (ctrl.kernel) law = [k = *ctrl.kernel](const GridFunction1D& u) { return control_1d(k, u); };
        else law = [](const GridFunction1D&) { return 0.0; };
        double scale = 0.0;
        if (a.u0_scale) {
            scale = *a.u0_scale;
        } else {
            const double radius = feedback_bounds(sup_norm(plant.beta), a.B_u, a.c, 0.0).B_u0;
            scale = 0.5 * radius / l2_norm(initial_state(n, 1.0));
        }
        report = run_feedback_experiment(plant.beta, law, initial_state(n, scale), cfg);
    } else if (a.experiment == "pide") {
        if (!plant.pide) throw UsageError("pide experiments need a pide:<gamma> plant");
        const auto ctrl = make_controller(a.controller, plant, solver);
        const TriangularGridFunction k_hat = ctrl.kernel2d ? *ctrl.kernel2d : TriangularGridFunction(n);
        report = run_pide_experiment(plant.g, plant.f, k_hat, initial_state(n, a.u0_scale.value_or(1.0)), cfg);
    } else {
        throw UsageError("unknown experiment '" + a.experiment + "' (gain, feedback or pide)");
    }
    json j = to_json(report);
    j["command"] = flags;
    if (!a.out.empty()) io::write_json(a.out, j);
    for (const auto& v : report.verdicts) std::cout << (v.pass ? "PASS " : "FAIL ") << v.name << ": " << v.detail << "\n";
    std::cout << (report.passed() ? "verified" : "verification failed") << "\n";
    return report.passed() ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PDE backstepping with learned gain kernels"};
    app.require_subcommand(1);
    const std::string flags = flags_line(argc, argv);

    GenDataArgs gen;
    auto* g = app.add_subcommand("gen-data", "generate a training corpus");
    g->add_option("--kind", gen.kind, "kernel1d | feedback | kernel2d")->check(CLI::IsMember({"kernel1d", "feedback", "kernel2d"}));
    g->add_option("--n", gen.n, "number of samples");
    g->add_option("--gamma-min", gen.gamma_min);
    g->add_option("--gamma-max", gen.gamma_max);
    g->add_option("--cells", gen.cells, "grid cells (default 100, 50 for kernel2d)");
    g->add_option("--seed", gen.seed);
    g->add_option("--threads", gen.threads, "worker threads (0 = all cores)");
    g->add_option("--config", gen.config, "JSON with solver / amplitude / u_terms / u_coefficient_bound");
    g->add_option("--out", gen.out, "output directory")->required();

    SolveArgs solve;
    auto* s = app.add_subcommand("solve-kernel", "solve the gain kernel of one plant");
    s->add_option("--plant", solve.plant, "beta:<gamma> | pide:<gamma> | file:<path>")->required();
    s->add_option("--cells", solve.cells);
    s->add_option("--amplitude", solve.amplitude);
    s->add_option("--config", solve.config);
    s->add_option("--out", solve.out, "output .json or .csv");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a DeepONet or feedback-law network");
    t->add_option("--data", train.data, "dataset directory")->required();
    t->add_option("--config", train.config, "JSON: train, architecture, n_test, sensor_stride, query_stride");
    t->add_option("--out", train.out, "model directory")->required();
    t->add_flag("--resume", train.resume, "continue from the model in --out");

    SimArgs sim;
    auto* m = app.add_subcommand("simulate", "simulate a plant under a controller");
    m->add_option("--plant", sim.plant)->required();
    m->add_option("--controller", sim.controller, "open | exact | model:<dir>");
    m->add_option("--t-final", sim.t_final);
    m->add_option("--cells", sim.cells);
    m->add_option("--amplitude", sim.amplitude);
    m->add_option("--u0-scale", sim.u0_scale, "u0 = scale (sin(pi x) + 1)");
    m->add_option("--scheme", sim.scheme, "automatic | euler | heun | transform_consistent");
    m->add_option("--config", sim.config);
    m->add_option("--out", sim.out, "output directory")->required();

    VerifyArgs ver;
    auto* v = app.add_subcommand("verify", "run a stability experiment; exit 0 iff every verdict passes");
    v->add_option("--experiment", ver.experiment, "gain | feedback | pide");
    v->add_option("--plant", ver.plant)->required();
    v->add_option("--controller", ver.controller, "exact | open | model:<dir>")->required();
    v->add_option("--t-final", ver.t_final);
    v->add_option("--cells", ver.cells);
    v->add_option("--amplitude", ver.amplitude);
    v->add_option("--u0-scale", ver.u0_scale);
    v->add_option("--c", ver.c);
    v->add_option("--bu", ver.B_u, "sup bound of the feedback training states");
    v->add_option("--final-ratio", ver.final_ratio, "pide: required ||u(T)||/||u(0)||");
    v->add_option("--config", ver.config);
    v->add_option("--out", ver.out, "report .json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*g) return cmd_gen_data(gen, flags);
        if (*s) return cmd_solve_kernel(solve, flags);
        if (*t) return cmd_train(train, flags);
        if (*m) return cmd_simulate(sim, flags);
        if (*v) return cmd_verify(ver, flags);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kUsage;
}
