#pragma once

// Semilinear backward PDE solver realizing E^g_{t,T}[phi(W_T)] for
// deterministic Markovian generators g(t, y, z):
//
//     u_t + (1/2) u_xx + g(t, u, u_x) = 0,   u(T, .) = phi,
//
// marched backward on a truncated spatial domain with theta-weighted
// diffusion and frozen-coefficient fixed-point sweeps for the nonlinearity.
// The value process is read off the surface as Y_t = u(t, W_t) and
// Z_t = u_x(t, W_t).

#include "qbsde/stochastic.hpp"

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <vector>

namespace qbsde::pde {

// ===== domain types =====

// Uniform spatial grid on [x_min, x_max] straddling the origin.
struct SpatialGrid {
    double x_min = -6.0;
    double x_max = 6.0;
    int n_x = 801; // >= 3

    SpatialGrid(double x_min_, double x_max_, int n_x_);

    double dx() const { return (x_max - x_min) / (n_x - 1); }
    double x(int j) const { return x_min + dx() * j; }

    // Default truncation: six standard deviations of W_T around x_center.
    static SpatialGrid default_for(double T, double x_center = 0.0, int n_x = 801);
};

enum class BoundaryKind {
    Dirichlet,   // boundary rows pinned to the zero-z extension of phi
    NeumannZero, // reflecting: u_x = 0 imposed through a mirror node
};

struct SchemeParams {
    double theta = 0.5;           // implicitness of the diffusion term, in [0,1]
    int max_nonlinear_iters = 60;
    double nonlinear_tol = 1e-12; // > 0
    BoundaryKind boundary = BoundaryKind::NeumannZero;
    double payoff_cap = 1e6;      // sampled sup bound; larger payoffs are rejected
    double domain_threshold = 0.25; // boundary-influence detector trigger at t0
};

// ===== error conditions =====

struct NonConvergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct Blowup : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainTooSmall : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct OutOfDomain : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ===== value surface =====

// Full space-time solution. u and z_surface are (n_steps+1) x n_x row-major
// in time: entry (k, j) sits at index k * n_x + j. z_surface holds u_x by
// central differences in the interior and one-sided second-order differences
// at the two boundary columns.
struct ValueSurface {
    stoch::TimeGrid time_grid;
    SpatialGrid space_grid;
    std::vector<double> u;
    std::vector<double> z_surface;

    double at(int step, int j) const {
        return u[static_cast<std::size_t>(step) * space_grid.n_x + static_cast<std::size_t>(j)];
    }
    double z_at(int step, int j) const {
        return z_surface[static_cast<std::size_t>(step) * space_grid.n_x + static_cast<std::size_t>(j)];
    }
    double sup_norm() const;

    // CSV rows (t, x, u, z), one line per space-time node, full precision.
    void save_csv(const std::filesystem::path& file) const;

    // Flat binary export mirroring the path-batch layout: header {magic
    // "QSRF", version u32, n_x u32, n_steps u32, value_count u64,
    // reserved u64, t0 f64, T f64, x_min f64, x_max f64}, then u and
    // z_surface as little-endian 64-bit floats. Little-endian hosts only.
    void save(const std::filesystem::path& file) const;
    static ValueSurface load(const std::filesystem::path& file);
};

// ===== operations =====

// Deterministic Markovian generator g(t, y, z) and terminal payoff phi(x).
using GenFn = std::function<double(double, double, double)>;
using PayoffFn = std::function<double(double)>;

// Solve the terminal-value problem on tg x sg. Throws:
//   std::invalid_argument  phi exceeds payoff_cap on the sampled grid
//   NonConvergence         a time step's fixed-point sweeps exceed the cap
//   Blowup                 a non-finite value appears
//   DomainTooSmall         |u - extension| at a boundary exceeds
//                          domain_threshold at t0
ValueSurface solve_markov(const GenFn& g, const PayoffFn& phi,
                          const stoch::TimeGrid& tg, const SpatialGrid& sg,
                          const SchemeParams& sp = {});

// Read E^g_{t,T}[phi(W_T)] given W_t = x off a solved surface: linear
// interpolation of u(t, .) in x, exact at grid nodes. t must be a time node
// and x must lie inside [x_min, x_max]; throws OutOfDomain otherwise.
double g_expectation(const ValueSurface& vs, double t, double x);

enum class TwoStageMode {
    EarlyPayoff,     // E^g_{0,T}[phi(W_{t_split})]
    IncrementPayoff, // E^g_{0,T}[phi(W_T - W_{t_split})]
};

// Two-stage values for payoffs measurable before T, reduced to sub-interval
// solves. Requires g(t, y, 0) = 0, checked by a sampled audit (the reduction
// leans on constants being preserved); throws std::invalid_argument when the
// audit fails or t_split is not an interior grid node.
double two_stage_value(const GenFn& g, const PayoffFn& phi, double t_split,
                       TwoStageMode mode, const stoch::TimeGrid& tg,
                       const SpatialGrid& sg, const SchemeParams& sp = {});

} // namespace qbsde::pde
