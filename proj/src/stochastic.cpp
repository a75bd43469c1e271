#include "qbsde/stochastic.hpp"

#include "qbsde/detail/binio.hpp"
#include "qbsde/numerics.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

namespace qbsde::stoch {

// ===== grids =====

TimeGrid::TimeGrid(double t0_, double T_, int n_steps_)
    : t0(t0_), T(T_), n_steps(n_steps_) {
    if (n_steps <= 0) throw std::invalid_argument("TimeGrid: n_steps must be positive");
    if (!(T > t0)) throw std::invalid_argument("TimeGrid: need T > t0");
    nodes.resize(static_cast<std::size_t>(n_steps) + 1);
    double h = (T - t0) / n_steps;
    for (int k = 0; k <= n_steps; ++k) nodes[static_cast<std::size_t>(k)] = t0 + h * k;
    nodes.back() = T; // guard the last node against accumulation error
}

int TimeGrid::index_of(double t, double tol) const {
    double h = dt();
    double s = (t - t0) / h;
    int k = static_cast<int>(std::lround(s));
    if (k < 0 || k > n_steps || std::abs(nodes[static_cast<std::size_t>(k)] - t) > tol)
        throw std::invalid_argument("TimeGrid: t is not a grid node");
    return k;
}

bool TimeGrid::is_node(double t, double tol) const {
    double h = dt();
    double s = (t - t0) / h;
    int k = static_cast<int>(std::lround(s));
    return k >= 0 && k <= n_steps && std::abs(nodes[static_cast<std::size_t>(k)] - t) <= tol;
}

// ===== normal distribution helpers =====

double normal_cdf(double x) {
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double normal_quantile(double p) {
    static const boost::math::normal_distribution<double> dist(0.0, 1.0);
    return boost::math::quantile(dist, p);
}

// ===== path sampling =====

namespace {

// Per-path generator: keyed stream so parallel generation (or streaming in any
// chunk order) reproduces sample_paths bit for bit.
inline std::mt19937_64 path_engine(std::uint64_t seed, long path) {
    return std::mt19937_64(num::splitmix64(seed ^ num::splitmix64(static_cast<std::uint64_t>(path))));
}

// Uniform in (0,1) from 53 high bits; never returns 0 or 1, safe for the
// quantile transform.
inline double canonical(std::mt19937_64& eng) {
    return (static_cast<double>(eng() >> 11) + 0.5) * 0x1.0p-53;
}

void fill_one_path(const TimeGrid& grid, int d, std::uint64_t seed, long path,
                   double* out) {
    auto eng = path_engine(seed, path);
    const double sdt = std::sqrt(grid.dt());
    for (int j = 0; j < d; ++j) out[j] = 0.0;
    for (int k = 1; k <= grid.n_steps; ++k) {
        const double* prev = out + static_cast<std::size_t>(k - 1) * d;
        double* cur = out + static_cast<std::size_t>(k) * d;
        for (int j = 0; j < d; ++j)
            cur[j] = prev[j] + sdt * normal_quantile(canonical(eng));
    }
}

} // namespace

PathBatch sample_paths(const TimeGrid& grid, int d, long n_paths, std::uint64_t seed) {
    if (n_paths < 1) throw std::invalid_argument("sample_paths: n_paths must be >= 1");
    if (d < 1) throw std::invalid_argument("sample_paths: d must be >= 1");
    PathBatch b{grid, d, n_paths, seed, {}};
    const std::size_t stride = static_cast<std::size_t>(grid.n_steps + 1) * d;
    b.values.resize(static_cast<std::size_t>(n_paths) * stride);
    for (long p = 0; p < n_paths; ++p)
        fill_one_path(grid, d, seed, p, b.values.data() + static_cast<std::size_t>(p) * stride);
    return b;
}

void for_each_path(const TimeGrid& grid, int d, long n_paths, std::uint64_t seed,
                   const std::function<void(long, std::span<const double>)>& fn) {
    if (n_paths < 1) throw std::invalid_argument("for_each_path: n_paths must be >= 1");
    if (d < 1) throw std::invalid_argument("for_each_path: d must be >= 1");
    const std::size_t stride = static_cast<std::size_t>(grid.n_steps + 1) * d;
    std::vector<double> buf(stride);
    for (long p = 0; p < n_paths; ++p) {
        fill_one_path(grid, d, seed, p, buf.data());
        fn(p, std::span<const double>(buf.data(), stride));
    }
}

// ===== binary export =====

using detail::get_f64;
using detail::get_u32;
using detail::get_u64;
using detail::put_f64;
using detail::put_u32;
using detail::put_u64;
using detail::require_little_endian;

void PathBatch::save(const std::filesystem::path& file) const {
    require_little_endian();
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("PathBatch::save: cannot open " + file.string());
    os.write("QBSD", 4);
    put_u32(os, 1u);
    put_u32(os, static_cast<std::uint32_t>(d));
    put_u32(os, static_cast<std::uint32_t>(grid.n_steps));
    put_u64(os, static_cast<std::uint64_t>(n_paths));
    put_u64(os, seed);
    put_f64(os, grid.t0);
    put_f64(os, grid.T);
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!os) throw std::runtime_error("PathBatch::save: write failed");
}

PathBatch PathBatch::load(const std::filesystem::path& file) {
    require_little_endian();
    std::ifstream is(file, std::ios::binary);
    if (!is) throw std::runtime_error("PathBatch::load: cannot open " + file.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "QBSD", 4) != 0)
        throw std::runtime_error("PathBatch::load: bad magic");
    std::uint32_t version = get_u32(is);
    if (version != 1u) throw std::runtime_error("PathBatch::load: unsupported version");
    std::uint32_t d = get_u32(is);
    std::uint32_t n_steps = get_u32(is);
    std::uint64_t n_paths = get_u64(is);
    std::uint64_t seed = get_u64(is);
    double t0 = get_f64(is);
    double T = get_f64(is);
    PathBatch b{TimeGrid(t0, T, static_cast<int>(n_steps)), static_cast<int>(d),
                static_cast<long>(n_paths), seed, {}};
    b.values.resize(static_cast<std::size_t>(n_paths) * (n_steps + 1) * d);
    is.read(reinterpret_cast<char*>(b.values.data()),
            static_cast<std::streamsize>(b.values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("PathBatch::load: truncated payload");
    return b;
}

// ===== quadrature =====

QuadratureRule gauss_hermite(int n_nodes) {
    if (n_nodes < 1 || n_nodes > 200)
        throw std::invalid_argument("gauss_hermite: n_nodes must be in [1, 200]");
    QuadratureRule rule;
    rule.nodes.resize(static_cast<std::size_t>(n_nodes));
    rule.weights.resize(static_cast<std::size_t>(n_nodes));
    if (n_nodes == 1) {
        rule.nodes[0] = 0.0;
        rule.weights[0] = 1.0;
        return rule;
    }
    // Golub-Welsch on the Jacobi matrix of the probabilists' Hermite
    // recurrence: zero diagonal, off-diagonal sqrt(i). Eigenvalues are the
    // nodes of the rule for the standard normal weight. The eigensolver does
    // not know the spectrum is symmetric, so fold each mirrored node pair
    // onto +-x; otherwise odd moments cancel poorly.
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n_nodes);
    Eigen::VectorXd sub(n_nodes - 1);
    for (int i = 1; i < n_nodes; ++i) sub[i - 1] = std::sqrt(static_cast<double>(i));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("gauss_hermite: eigensolver failed");
    const std::size_t n = static_cast<std::size_t>(n_nodes);
    for (std::size_t i = 0; i < n; ++i)
        rule.nodes[i] = es.eigenvalues()[static_cast<Eigen::Index>(i)];
    for (std::size_t i = 0; i < n / 2; ++i) {
        const std::size_t j = n - 1 - i;
        const double x = 0.5 * (rule.nodes[j] - rule.nodes[i]);
        rule.nodes[i] = -x;
        rule.nodes[j] = x;
    }
    if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
    // Weights via the Christoffel sum 1 / sum_{k<n} h_k(x_i)^2 over the
    // orthonormal polynomials. Squaring the first eigenvector component gives
    // the same value in exact arithmetic but loses ~6 digits of relative
    // accuracy on the tiny extreme weights, which high-degree moments expose.
    auto weight_at = [n_nodes](double x) {
        double pm = 0.0, p = 1.0, s = 1.0;
        for (int k = 1; k < n_nodes; ++k) {
            double pn = (x * p - std::sqrt(static_cast<double>(k - 1)) * pm) /
                        std::sqrt(static_cast<double>(k));
            pm = p;
            p = pn;
            s += p * p;
        }
        return 1.0 / s;
    };
    for (std::size_t i = 0; i < n / 2; ++i) {
        const double w = weight_at(rule.nodes[n - 1 - i]);
        rule.weights[i] = w;
        rule.weights[n - 1 - i] = w;
    }
    if (n % 2 == 1) rule.weights[n / 2] = weight_at(0.0);
    double total = std::accumulate(rule.weights.begin(), rule.weights.end(), 0.0);
    for (double& w : rule.weights) w /= total;
    return rule;
}

// ===== exit times =====

double exit_time_single(const TimeGrid& grid, std::span<const double> w1,
                        double t_start, const StoppingTimeSpec& spec) {
    int k0 = grid.index_of(t_start);
    if (const auto* le = std::get_if<LevelExit>(&spec)) {
        if (!(le->level > 0.0)) throw std::invalid_argument("LevelExit: level must be > 0");
        const double ref = w1[static_cast<std::size_t>(k0)] + le->center;
        for (int k = k0; k <= grid.n_steps; ++k) {
            if (std::abs(w1[static_cast<std::size_t>(k)] - ref) > le->level)
                return grid.nodes[static_cast<std::size_t>(k)];
        }
        return grid.T;
    }
    const auto& tb = std::get<ThresholdBranch>(spec);
    if (!(tb.t_obs < tb.t_low && tb.t_low < tb.t_high && tb.t_high <= grid.T + 1e-12))
        throw std::invalid_argument("ThresholdBranch: need t_obs < t_low < t_high <= T");
    int ko = grid.index_of(tb.t_obs);
    return w1[static_cast<std::size_t>(ko)] >= 0.0 ? tb.t_low : tb.t_high;
}

double exit_time(const PathBatch& batch, long path, double t_start,
                 const StoppingTimeSpec& spec) {
    if (batch.d != 1)
        throw std::invalid_argument("exit_time: implemented for d = 1 paths");
    const std::size_t stride = static_cast<std::size_t>(batch.grid.n_steps + 1);
    std::span<const double> w1(batch.values.data() + static_cast<std::size_t>(path) * stride, stride);
    return exit_time_single(batch.grid, w1, t_start, spec);
}

// ===== two-sample KS =====

namespace {

// Asymptotic Kolmogorov tail Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2).
double ks_q(double lambda) {
    if (lambda < 1e-3) return 1.0;
    double sum = 0.0;
    double sign = 1.0;
    for (int k = 1; k <= 100; ++k) {
        double term = std::exp(-2.0 * k * k * lambda * lambda);
        sum += sign * term;
        if (term < 1e-16) break;
        sign = -sign;
    }
    return std::clamp(2.0 * sum, 0.0, 1.0);
}

} // namespace

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty())
        throw std::invalid_argument("ks_two_sample: empty sample");
    std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    const double na = static_cast<double>(sa.size());
    const double nb = static_cast<double>(sb.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < sa.size() && j < sb.size()) {
        double xa = sa[i], xb = sb[j];
        double x = std::min(xa, xb);
        while (i < sa.size() && sa[i] <= x) ++i;
        while (j < sb.size() && sb[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    double en = std::sqrt(na * nb / (na + nb));
    double lambda = (en + 0.12 + 0.11 / en) * d;
    return {d, ks_q(lambda)};
}

} // namespace qbsde::stoch
