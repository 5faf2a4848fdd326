#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "backstep/errors.hpp"
#include "backstep/grid.hpp"
#include "backstep/io.hpp"
#include "backstep/kernel1d.hpp"
#include "backstep/kernel2d.hpp"
#include "backstep/neural_operator.hpp"
#include "backstep/pde_sim.hpp"

namespace backstep {

struct ChebyshevSpec {
    double amplitude = 6.0;
    double gamma = 3.0;
};

/// beta(x) = A cos(gamma arccos x).
inline GridFunction1D chebyshev_beta(const ChebyshevSpec& spec, std::size_t n_cells) {
    if (!(spec.amplitude > 0.0) || !(spec.gamma > 0.0)) {
        throw std::invalid_argument("chebyshev_beta: amplitude and gamma must be positive");
    }
    return GridFunction1D::sample(n_cells, [&](double x) { return spec.amplitude * std::cos(spec.gamma * std::acos(x)); });
}

/// f(x, y) = beta(x) beta(y) on the triangle.
inline TriangularGridFunction chebyshev_product(const ChebyshevSpec& spec, std::size_t n_cells) {
    const auto beta = chebyshev_beta(spec, n_cells);
    std::vector<double> v(TriangularGridFunction::storage_size(n_cells));
    for (std::size_t i = 0; i <= n_cells; ++i)
        for (std::size_t j = 0; j <= i; ++j) v[TriangularGridFunction::index(i, j)] = beta[i] * beta[j];
    return TriangularGridFunction(n_cells, std::move(v));
}

enum class DatasetKind { kernel1d, feedback, kernel2d };

inline std::string to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::kernel1d: return "kernel1d";
        case DatasetKind::feedback: return "feedback";
        case DatasetKind::kernel2d: return "kernel2d";
    }
    return "kernel1d";
}

inline DatasetKind dataset_kind_from_string(const std::string& s) {
    if (s == "kernel1d") return DatasetKind::kernel1d;
    if (s == "feedback") return DatasetKind::feedback;
    if (s == "kernel2d") return DatasetKind::kernel2d;
    throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

struct GammaRange {
    double min = 2.0;
    double max = 8.0;

    void validate() const {
        if (!(min > 0.0) || !(max >= min)) throw std::invalid_argument("gamma range must satisfy 0 < min <= max");
    }
};

/// u = sum_{i<terms} c_i T_i(x), c_i ~ U[-bound, bound], so |u| <= terms * bound.
struct UDistribution {
    std::size_t terms = 6;
    double coefficient_bound = 1.0;

    double sup_bound() const { return static_cast<double>(terms) * coefficient_bound; }
};

struct DatasetManifest {
    DatasetKind kind = DatasetKind::kernel1d;
    std::size_t n_samples = 0;
    std::size_t n_cells = 100;
    GammaRange gamma_range;
    std::uint64_t seed = 0;
    double amplitude = 6.0;
    KernelSolveConfig solver;
    std::optional<UDistribution> u_distribution;
    io::json meta = io::json::object();
};

struct DatasetArray {
    std::vector<std::size_t> shape;  ///< row-major, samples first
    std::vector<double> values;
};

/// Arrays by name: gammas, betas, kernels (kernel1d); gammas, betas, u, controls (feedback);
/// gammas, f, kernels2d (kernel2d).
struct Dataset {
    DatasetManifest manifest;
    std::map<std::string, DatasetArray> arrays;

    const DatasetArray& array(const std::string& name) const {
        const auto it = arrays.find(name);
        if (it == arrays.end()) throw FormatError("dataset has no array '" + name + "'");
        return it->second;
    }

    std::size_t size() const { return manifest.n_samples; }
};

struct GenerateOptions {
    std::size_t threads = 0;  ///< 0 picks hardware concurrency
};

namespace detail {

/// Per-sample generator, independent of processing order.
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t index) {
    return std::mt19937_64(seed ^ static_cast<std::uint64_t>(index));
}

template <typename Work>
void parallel_for(std::size_t n, std::size_t threads, Work&& work) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, std::max<std::size_t>(n, 1));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) work(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += threads) work(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline void require_samples(std::size_t n) {
    if (n == 0) throw std::invalid_argument("dataset: n must be at least 1");
}

inline std::string gamma_failure(double gamma, const std::exception& e) {
    std::ostringstream os;
    os.precision(17);
    os << "kernel solve failed for gamma = " << gamma << ": " << e.what();
    return os.str();
}

}  // namespace detail

/// Random Chebyshev combination drawn from `dist` on the grid.
inline GridFunction1D random_u(const UDistribution& dist, std::size_t n_cells, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> coef(-dist.coefficient_bound, dist.coefficient_bound);
    std::vector<double> c(dist.terms);
    for (auto& v : c) v = coef(rng);
    return GridFunction1D::sample(n_cells, [&](double x) {
        double s = 0.0;
        const double t = std::acos(x);
        for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * std::cos(static_cast<double>(i) * t);
        return s;
    });
}

inline Dataset generate_kernel1d_dataset(std::size_t n, GammaRange range, std::size_t n_cells, std::uint64_t seed,
                                         const KernelSolveConfig& cfg = {}, double amplitude = 6.0,
                                         const GenerateOptions& opt = {}) {
    detail::require_samples(n);
    range.validate();
    cfg.validate();
    const std::size_t L = n_cells + 1;
    Dataset d{{DatasetKind::kernel1d, n, n_cells, range, seed, amplitude, cfg, std::nullopt}, {}};
    DatasetArray gammas{{n}, std::vector<double>(n)}, betas{{n, L}, std::vector<double>(n * L)},
        kernels{{n, L}, std::vector<double>(n * L)};
    detail::parallel_for(n, opt.threads, [&](std::size_t s) {
        auto rng = detail::sample_rng(seed, s);
        const double gamma = std::uniform_real_distribution<double>(range.min, range.max)(rng);
        const auto beta = chebyshev_beta({amplitude, gamma}, n_cells);
        GridFunction1D k(n_cells);
        try {
            k = solve_kernel(beta, cfg);
        } catch (const NonConvergence& e) {
            throw std::runtime_error(detail::gamma_failure(gamma, e));
        }
        gammas.values[s] = gamma;
        std::copy(beta.values().begin(), beta.values().end(), betas.values.begin() + static_cast<std::ptrdiff_t>(s * L));
        std::copy(k.values().begin(), k.values().end(), kernels.values.begin() + static_cast<std::ptrdiff_t>(s * L));
    });
    d.arrays["gammas"] = std::move(gammas);
    d.arrays["betas"] = std::move(betas);
    d.arrays["kernels"] = std::move(kernels);
    return d;
}

inline Dataset generate_feedback_dataset(std::size_t n, GammaRange range, const UDistribution& u_spec,
                                         std::size_t n_cells, std::uint64_t seed, const KernelSolveConfig& cfg = {},
                                         double amplitude = 6.0, const GenerateOptions& opt = {}) {
    detail::require_samples(n);
    range.validate();
    cfg.validate();
    if (u_spec.terms == 0 || !(u_spec.coefficient_bound > 0.0)) throw std::invalid_argument("invalid u distribution");
    const std::size_t L = n_cells + 1;
    Dataset d{{DatasetKind::feedback, n, n_cells, range, seed, amplitude, cfg, u_spec}, {}};
    DatasetArray gammas{{n}, std::vector<double>(n)}, betas{{n, L}, std::vector<double>(n * L)},
        us{{n, L}, std::vector<double>(n * L)}, controls{{n}, std::vector<double>(n)};
    detail::parallel_for(n, opt.threads, [&](std::size_t s) {
        auto rng = detail::sample_rng(seed, s);
        const double gamma = std::uniform_real_distribution<double>(range.min, range.max)(rng);
        const auto u = random_u(u_spec, n_cells, rng);
        const auto beta = chebyshev_beta({amplitude, gamma}, n_cells);
        GridFunction1D k(n_cells);
        try {
            k = solve_kernel(beta, cfg);
        } catch (const NonConvergence& e) {
            throw std::runtime_error(detail::gamma_failure(gamma, e));
        }
        gammas.values[s] = gamma;
        controls.values[s] = control_1d(k, u);
        std::copy(beta.values().begin(), beta.values().end(), betas.values.begin() + static_cast<std::ptrdiff_t>(s * L));
        std::copy(u.values().begin(), u.values().end(), us.values.begin() + static_cast<std::ptrdiff_t>(s * L));
    });
    d.arrays["gammas"] = std::move(gammas);
    d.arrays["betas"] = std::move(betas);
    d.arrays["u"] = std::move(us);
    d.arrays["controls"] = std::move(controls);
    return d;
}

inline Dataset generate_kernel2d_dataset(std::size_t n, GammaRange range, std::size_t n_cells, std::uint64_t seed,
                                         const KernelSolveConfig& cfg = {}, double amplitude = 6.0,
                                         const GenerateOptions& opt = {}) {
    detail::require_samples(n);
    range.validate();
    cfg.validate();
    const std::size_t T = TriangularGridFunction::storage_size(n_cells);
    Dataset d{{DatasetKind::kernel2d, n, n_cells, range, seed, amplitude, cfg, std::nullopt}, {}};
    DatasetArray gammas{{n}, std::vector<double>(n)}, fs{{n, T}, std::vector<double>(n * T)},
        kernels{{n, T}, std::vector<double>(n * T)};
    const GridFunction1D g(n_cells, 0.0);
    detail::parallel_for(n, opt.threads, [&](std::size_t s) {
        auto rng = detail::sample_rng(seed, s);
        const double gamma = std::uniform_real_distribution<double>(range.min, range.max)(rng);
        const auto f = chebyshev_product({amplitude, gamma}, n_cells);
        TriangularGridFunction k(n_cells);
        try {
            k = solve_kernel_2d(g, f, cfg);
        } catch (const NonConvergence& e) {
            throw std::runtime_error(detail::gamma_failure(gamma, e));
        }
        gammas.values[s] = gamma;
        std::copy(f.values().begin(), f.values().end(), fs.values.begin() + static_cast<std::ptrdiff_t>(s * T));
        std::copy(k.values().begin(), k.values().end(), kernels.values.begin() + static_cast<std::ptrdiff_t>(s * T));
    });
    d.arrays["gammas"] = std::move(gammas);
    d.arrays["f"] = std::move(fs);
    d.arrays["kernels2d"] = std::move(kernels);
    return d;
}

// ---------------------------------------------------------------------------------------------
// Views for training

namespace detail {

inline Eigen::MatrixXd columns(const DatasetArray& a, std::size_t first, std::size_t count) {
    const std::size_t L = a.shape.size() > 1 ? a.shape[1] : 1;
    if (first + count > a.shape[0]) throw std::out_of_range("dataset slice out of range");
    return Eigen::Map<const Eigen::MatrixXd>(a.values.data() + first * L, static_cast<Eigen::Index>(L),
                                             static_cast<Eigen::Index>(count));
}

inline std::vector<double> sample_values(const DatasetArray& a, std::size_t s) {
    const std::size_t L = a.shape.size() > 1 ? a.shape[1] : 1;
    const auto first = a.values.begin() + static_cast<std::ptrdiff_t>(s * L);
    return std::vector<double>(first, first + static_cast<std::ptrdiff_t>(L));
}

inline void require_kind(const Dataset& d, DatasetKind kind) {
    if (d.manifest.kind != kind) {
        throw KindMismatch("dataset kind '" + to_string(d.manifest.kind) + "', expected '" + to_string(kind) + "'");
    }
}

}  // namespace detail

namespace detail {

/// Rows of a samples-as-columns block at every `stride`-th grid node (both axes on the triangle).
inline Eigen::MatrixXd strided_rows(const Eigen::MatrixXd& in, std::size_t n, std::size_t stride, bool triangle) {
    const std::size_t m = n / stride;
    if (!triangle) {
        Eigen::MatrixXd out(static_cast<Eigen::Index>(m + 1), in.cols());
        for (std::size_t r = 0; r <= m; ++r) out.row(static_cast<Eigen::Index>(r)) = in.row(static_cast<Eigen::Index>(r * stride));
        return out;
    }
    Eigen::MatrixXd out(static_cast<Eigen::Index>(TriangularGridFunction::storage_size(m)), in.cols());
    for (std::size_t i = 0; i <= m; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            out.row(static_cast<Eigen::Index>(TriangularGridFunction::index(i, j))) =
                in.row(static_cast<Eigen::Index>(TriangularGridFunction::index(i * stride, j * stride)));
    return out;
}

}  // namespace detail

/// Samples [first, first + count) of a kernel1d or kernel2d corpus. Inputs are taken at every
/// `sensor_stride`-th grid node and targets/queries at every `query_stride`-th node.
inline OperatorSamples operator_samples(const Dataset& d, std::size_t first, std::size_t count,
                                        std::size_t sensor_stride = 1, std::size_t query_stride = 1) {
    const std::size_t n = d.manifest.n_cells;
    for (std::size_t stride : {sensor_stride, query_stride}) {
        if (stride == 0 || n % stride != 0) throw std::invalid_argument("strides must divide n_cells");
    }
    if (d.manifest.kind == DatasetKind::kernel1d) {
        return {detail::strided_rows(detail::columns(d.array("betas"), first, count), n, sensor_stride, false),
                detail::strided_rows(detail::columns(d.array("kernels"), first, count), n, query_stride, false),
                uniform_sensors(n / query_stride + 1)};
    }
    detail::require_kind(d, DatasetKind::kernel2d);
    return {detail::strided_rows(detail::columns(d.array("f"), first, count), n, sensor_stride, true),
            detail::strided_rows(detail::columns(d.array("kernels2d"), first, count), n, query_stride, true),
            triangle_nodes(n / query_stride)};
}

/// Sensor locations matching operator_samples(d, ..., sensor_stride).
inline Eigen::MatrixXd operator_sensors(const Dataset& d, std::size_t sensor_stride = 1) {
    const std::size_t m = d.manifest.n_cells / sensor_stride;
    return d.manifest.kind == DatasetKind::kernel2d ? triangle_nodes(m) : uniform_sensors(m + 1);
}

inline FeedbackSamples feedback_samples(const Dataset& d, std::size_t first, std::size_t count) {
    detail::require_kind(d, DatasetKind::feedback);
    const Eigen::MatrixXd c = detail::columns(d.array("controls"), first, count);
    return {detail::columns(d.array("betas"), first, count), detail::columns(d.array("u"), first, count), c.row(0)};
}

// ---------------------------------------------------------------------------------------------
// Persistence: manifest.json, <array>.f64, checksums.txt

inline constexpr const char* kDatasetFormat = "backstep-dataset";
inline constexpr int kDatasetVersion = 1;

inline io::json to_json(const DatasetManifest& m) {
    io::json j{{"format", kDatasetFormat},
               {"version", kDatasetVersion},
               {"kind", to_string(m.kind)},
               {"n_samples", m.n_samples},
               {"n_cells", m.n_cells},
               {"gamma_range", {m.gamma_range.min, m.gamma_range.max}},
               {"seed", m.seed},
               {"amplitude", m.amplitude},
               {"solver", {{"tolerance", m.solver.tolerance}, {"max_terms", m.solver.max_terms}}},
               {"meta", m.meta}};
    if (m.u_distribution) {
        j["u_distribution"] = {{"family", "chebyshev"},
                               {"terms", m.u_distribution->terms},
                               {"coefficient_bound", m.u_distribution->coefficient_bound},
                               {"sup_bound", m.u_distribution->sup_bound()}};
    } else {
        j["u_distribution"] = nullptr;
    }
    return j;
}

inline DatasetManifest manifest_from_json(const io::json& j) {
    io::require_format(j, kDatasetFormat, kDatasetVersion);
    DatasetManifest m;
    try {
        m.kind = dataset_kind_from_string(j.at("kind").get<std::string>());
        m.n_samples = j.at("n_samples").get<std::size_t>();
        m.n_cells = j.at("n_cells").get<std::size_t>();
        m.gamma_range = {j.at("gamma_range").at(0).get<double>(), j.at("gamma_range").at(1).get<double>()};
        m.seed = j.at("seed").get<std::uint64_t>();
        m.amplitude = j.at("amplitude").get<double>();
        m.solver = {j.at("solver").at("tolerance").get<double>(), j.at("solver").at("max_terms").get<std::size_t>()};
        if (!j.at("u_distribution").is_null()) {
            m.u_distribution = UDistribution{j["u_distribution"].at("terms").get<std::size_t>(),
                                             j["u_distribution"].at("coefficient_bound").get<double>()};
        }
        m.meta = j.value("meta", io::json::object());
    } catch (const io::json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    return m;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
    std::filesystem::create_directories(dir);
    io::json manifest = to_json(d.manifest);
    io::json arrays = io::json::object();
    std::vector<std::pair<std::string, std::string>> sums;
    for (const auto& [name, a] : d.arrays) {
        const std::string file = name + ".f64";
        sums.emplace_back(io::write_f64(dir / file, a.values), file);
        arrays[name] = {{"file", file}, {"shape", a.shape}};
    }
    manifest["arrays"] = arrays;
    io::write_json(dir / "manifest.json", manifest);
    sums.emplace_back(io::crc32_hex(io::read_bytes(dir / "manifest.json")), "manifest.json");
    std::ofstream out(dir / "checksums.txt", std::ios::trunc);
    for (const auto& [crc, file] : sums) out << crc << "  " << file << '\n';
    if (!out) throw IoError("cannot write checksums.txt");
}

/// Every 20th sample is re-checked against its solver (5% spot check).
inline void spot_check(const Dataset& d) {
    const auto& man = d.manifest;
    const double tol = 10.0 * man.solver.tolerance;
    for (std::size_t s = 0; s < man.n_samples; s += 20) {
        const std::size_t n = man.n_cells;
        if (man.kind == DatasetKind::kernel1d) {
            const GridFunction1D beta(n, detail::sample_values(d.array("betas"), s));
            const GridFunction1D k(n, detail::sample_values(d.array("kernels"), s));
            if (residual_1d(beta, k) > tol) throw FormatError("sample " + std::to_string(s) + " violates the kernel residual");
        } else if (man.kind == DatasetKind::kernel2d) {
            const TriangularGridFunction ff(n, detail::sample_values(d.array("f"), s));
            const TriangularGridFunction kk(n, detail::sample_values(d.array("kernels2d"), s));
            if (residual_2d(GridFunction1D(n, 0.0), ff, kk) > tol) {
                throw FormatError("sample " + std::to_string(s) + " violates the 2D kernel residual");
            }
        } else {
            const GridFunction1D beta(n, detail::sample_values(d.array("betas"), s));
            const GridFunction1D uu(n, detail::sample_values(d.array("u"), s));
            const double U = d.array("controls").values[s];
            const double expect = control_1d(solve_kernel(beta, man.solver), uu);
            if (std::abs(U - expect) > 1e-8 * (1.0 + std::abs(expect))) {
                throw FormatError("sample " + std::to_string(s) + " control does not match its kernel");
            }
        }
    }
}

/// Loads and verifies a dataset directory; `expected` rejects corpora of another kind.
inline Dataset load_dataset(const std::filesystem::path& dir, std::optional<DatasetKind> expected = std::nullopt,
                            bool verify_samples = true) {
    if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    std::map<std::string, std::string> sums;
    {
        std::ifstream in(dir / "checksums.txt");
        if (!in) throw FormatError("dataset: missing checksums.txt");
        std::string crc, file;
        while (in >> crc >> file) sums[file] = crc;
    }
    const auto manifest_bytes = io::read_bytes(dir / "manifest.json");
    if (!sums.count("manifest.json") || io::crc32_hex(manifest_bytes) != sums["manifest.json"]) {
        throw ChecksumError("manifest.json: checksum mismatch");
    }
    io::json j;
    try {
        j = io::json::parse(manifest_bytes.begin(), manifest_bytes.end());
    } catch (const io::json::parse_error& e) {
        throw FormatError(std::string("manifest.json: ") + e.what());
    }
    Dataset d{manifest_from_json(j), {}};
    if (expected && *expected != d.manifest.kind) {
        throw KindMismatch("dataset kind '" + to_string(d.manifest.kind) + "', expected '" + to_string(*expected) + "'");
    }
    for (const auto& [name, entry] : j.at("arrays").items()) {
        const std::string file = entry.at("file").get<std::string>();
        if (!sums.count(file)) throw FormatError(file + ": no checksum recorded");
        DatasetArray a;
        a.shape = entry.at("shape").get<std::vector<std::size_t>>();
        std::size_t count = 1;
        for (auto s : a.shape) count *= s;
        a.values = io::read_f64(dir / file, sums[file], count);
        d.arrays[name] = std::move(a);
    }
    if (verify_samples) spot_check(d);
    return d;
}

}  // namespace backstep
