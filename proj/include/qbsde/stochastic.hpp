#pragma once

// Probabilistic substrate: Brownian path batches on uniform time grids,
// Gauss-Hermite quadrature as the Gaussian-expectation oracle, discrete exit
// times, and a two-sample Kolmogorov-Smirnov test for distributional checks.
//
// Reproducibility contract
// ------------------------
// Path generation is deterministic per (grid, d, n_paths, seed) and identical
// regardless of scheduling: the RNG stream for path i is an mt19937_64 seeded
// with splitmix64(seed ^ splitmix64(i)), consumed in a fixed order
// (step-major, dimension-minor). Gaussians are produced by inverse-CDF from
// 53-bit uniforms, never by Box-Muller, so a stream's k-th normal is a pure
// function of its k-th uniform.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <variant>
#include <vector>

namespace qbsde::stoch {

// Uniform partition of [t0, T] into n_steps steps.
struct TimeGrid {
    double t0 = 0.0;
    double T = 1.0;
    int n_steps = 1;
    std::vector<double> nodes; // size n_steps + 1, nodes[0]=t0, nodes[n_steps]=T

    TimeGrid(double t0_, double T_, int n_steps_);

    double dt() const { return (T - t0) / n_steps; }
    // Index of a grid node equal to t (within tol); throws std::invalid_argument
    // if t is not a node.
    int index_of(double t, double tol = 1e-9) const;
    // True if t coincides with a grid node within tol.
    bool is_node(double t, double tol = 1e-9) const;
};

// A batch of d-dimensional Brownian paths sampled on a TimeGrid, W_{t0} = 0.
// Layout: values[(p * (n_steps+1) + k) * d + j] = W^j_{t_k} on path p.
struct PathBatch {
    TimeGrid grid;
    int d = 1;
    long n_paths = 0;
    std::uint64_t seed = 0;
    std::vector<double> values;

    double w(long path, int step, int dim = 0) const {
        return values[(static_cast<std::size_t>(path) * (grid.n_steps + 1)
                       + static_cast<std::size_t>(step)) * d + dim];
    }

    // Flat binary export: header {magic "QBSD", version u32, d u32,
    // n_steps u32, n_paths u64, seed u64, t0 f64, T f64}, then the values
    // array as little-endian 64-bit floats. Requires a little-endian host.
    void save(const std::filesystem::path& file) const;
    static PathBatch load(const std::filesystem::path& file);
};

// Gauss-Hermite rule normalized against the standard normal density:
// sum_i weights[i] * f(nodes[i]) approximates E[f(Z)], Z ~ N(0,1), exactly
// for polynomials of degree <= 2n-1.
struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;

    template <class F>
    double expect(F&& f) const {
        double s = 0.0;
        for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
        return s;
    }
};

// First grid node s >= t_start at which |W_s - W_{t_start} - center| exceeds
// `level`, capped at T. center = 0 recovers the symmetric exit band.
struct LevelExit {
    double center = 0.0;
    double level = 1.0; // must be > 0
};

// Branch rule fixed by the sign of W at t_obs: tau = t_low on {W_{t_obs} >= 0}
// and t_high otherwise. Requires t_obs < t_low < t_high <= T.
struct ThresholdBranch {
    double t_obs;
    double t_low;
    double t_high;
};

using StoppingTimeSpec = std::variant<LevelExit, ThresholdBranch>;

struct KsResult {
    double statistic = 0.0;
    double p_value = 1.0;
};

// Sample a batch of Brownian paths. Throws std::invalid_argument on
// n_paths < 1, d < 1, or a degenerate grid.
PathBatch sample_paths(const TimeGrid& grid, int d, long n_paths, std::uint64_t seed);

// Stream paths without materializing the batch: fn(path_index, values) is
// called once per path with the same layout and the same per-path values that
// sample_paths would produce. values has (n_steps+1)*d entries.
void for_each_path(const TimeGrid& grid, int d, long n_paths, std::uint64_t seed,
                   const std::function<void(long, std::span<const double>)>& fn);

// Gauss-Hermite rule with n_nodes in [1, 200]; see QuadratureRule.
QuadratureRule gauss_hermite(int n_nodes);

// Exit time of one path of the batch under the given stopping rule, evaluated
// on the discrete grid (first node beyond the level); t_start must be a grid
// node.
double exit_time(const PathBatch& batch, long path, double t_start,
                 const StoppingTimeSpec& spec);

// Same rule on a raw single path laid out like one PathBatch row (d = 1).
double exit_time_single(const TimeGrid& grid, std::span<const double> w1,
                        double t_start, const StoppingTimeSpec& spec);

// Two-sample Kolmogorov-Smirnov statistic with the asymptotic p-value.
// Throws std::invalid_argument on empty input.
KsResult ks_two_sample(std::span<const double> a, std::span<const double> b);

// Standard normal CDF and quantile (inverse CDF), shared with the samplers.
double normal_cdf(double x);
double normal_quantile(double p);

} // namespace qbsde::stoch
