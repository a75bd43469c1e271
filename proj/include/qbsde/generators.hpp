#pragma once

// Driver catalog. Deterministic families sit behind plain (t, y, z)
// evaluators with hand-written partials; random families evaluate against a
// realized Brownian path. audit_assumptions samples the standing growth and
// regularity conditions over a finite box; it can certify a failure but only
// gather evidence for a pass, and its report says so.

#include "qbsde/pde_solver.hpp"
#include "qbsde/stochastic.hpp"
#include "qbsde/transforms.hpp"

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace qbsde::gen {

struct VariantMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EndpointViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ===== deterministic variants =====

// k(y) |z|^2. dk is optional; when absent the y-partial falls back to a
// central difference with step 1e-6.
struct PureQuadratic {
    std::function<double(double)> k;
    std::function<double(double)> dk{};
};

// h(t, y) + f(t, y) |z|^2 with explicit partials carried by the fields.
struct DriftQuadratic {
    transforms::DriftFunction h;
    transforms::ScalarField f;
};

// beta |z|^2; coincides pointwise with PureQuadratic{k == beta}.
struct Entropic {
    double beta = 0.5;
};

// k(t) |z|^2; the time dependence places it outside the state-dependent
// pure-quadratic family, which the audit flags.
struct TimeVaryingQuadratic {
    std::function<double(double)> k;
};

// ===== random drift processes =====
//
// Realized drifts are step functions on the simulation grid (left-node
// convention, constant on [t_k, t_{k+1})); window edges snap to grid nodes so
// pathwise drift integrals are grid-exact rather than discretization-blurred.

// h_t = 1_{[tau, tau + eps_w]}(t) with tau evaluated on the path.
struct IndicatorWindow {
    stoch::StoppingTimeSpec tau;
    double eps_w = 0.1;
};

// h_t = clamp(W_{t_obs}) * s(t). The tabulated shape gets a support-local
// mean correction so the pathwise integral vanishes exactly; the caller is
// responsible for choosing supp(s) inside [t_obs, T] when adaptedness
// matters. clamp defaults to tanh.
struct SignedWindow {
    double t_obs = 0.25;
    std::function<double(double)> shape;
    std::function<double(double)> clamp{};
};

// h_t = clamp(W_{t_obs}) * 1_{t >= t_obs}; the non-law-invariant control.
struct PersistentDrift {
    double t_obs = 0.25;
    std::function<double(double)> clamp{};
};

using DriftProcessSpec = std::variant<IndicatorWindow, SignedWindow, PersistentDrift>;

// h_t(omega) + beta |z|^2.
struct RandomDriftQuadratic {
    DriftProcessSpec drift;
    double beta = 0.5;
};

// a_t + |b_t|^2 / 2 + b_t z + |z|^2 / 2 with coefficients built from a C^1
// envelope r (r(t0) = r(T) = 0) and a bounded C^2 profile psi_b of W_t:
// a_t = r'(t) psi_b(W_t) + r(t) psi_b''(W_t) / 2, b_t = r(t) psi_b'(W_t).
struct ItoWentzell {
    std::function<double(double)> r;
    std::function<double(double)> dr;
    std::function<double(double)> psi_b;
    std::function<double(double)> dpsi_b;
    std::function<double(double)> ddpsi_b;
};

using Generator = std::variant<PureQuadratic, DriftQuadratic, Entropic,
                               TimeVaryingQuadratic, RandomDriftQuadratic,
                               ItoWentzell>;

// ===== evaluation =====

// Deterministic variants only; random variants throw VariantMismatch.
double eval(const Generator& g, double t, double y, double z);
double eval_dy(const Generator& g, double t, double y, double z);
double eval_dz(const Generator& g, double t, double y, double z);

// Random variants only, against one realized path (d = 1 layout, as handed
// out by for_each_path); deterministic variants throw VariantMismatch. Pure
// functions of (path, t, y, z).
double eval_pathwise(const Generator& g, const stoch::TimeGrid& grid,
                     std::span<const double> w1, double t, double y, double z);
double eval_pathwise_dy(const Generator& g, const stoch::TimeGrid& grid,
                        std::span<const double> w1, double t, double y, double z);
double eval_pathwise_dz(const Generator& g, const stoch::TimeGrid& grid,
                        std::span<const double> w1, double t, double y, double z);

// ===== realized drifts =====

// Step values of the realized drift, one entry per grid step.
std::vector<double> realize_drift(const DriftProcessSpec& spec,
                                  const stoch::TimeGrid& grid,
                                  std::span<const double> w1);

struct DriftIntegral {
    double total = 0.0;
    // T' -> int_{t0}^{T'} h dt, exact for the realized step function.
    std::function<double(double)> partial;
};

DriftIntegral drift_integral(const DriftProcessSpec& spec,
                             const stoch::TimeGrid& grid,
                             std::span<const double> w1);

// ===== the random counterexample's coefficients =====

struct IwCoeffs {
    double a = 0.0;
    double b = 0.0;
};

// Coefficients at time t on one path (W interpolated linearly off-node).
// Throws EndpointViolation unless |r(t0)| and |r(T)| are below 1e-12.
IwCoeffs ito_wentzell_coeffs(const ItoWentzell& iw, const stoch::TimeGrid& grid,
                             std::span<const double> w1, double t);

// ===== assumption audit =====

struct AuditGrid {
    std::vector<double> t_samples; // where in time to probe
    double y_max = 2.0;
    int n_y = 21;
    double z_max = 5.0;
    int n_z = 21;
    double epsilon = 0.1; // the quadratic slack in the y-partial bound
    double w_max = 4.0;   // Brownian value range probed for random variants
    int n_w = 9;

    static AuditGrid default_for(const stoch::TimeGrid& tg);
};

struct AuditReport {
    double kappa_hat = 0.0;        // drift-part bound observed on the box
    std::vector<double> y_levels;  // increasing |y| levels
    std::vector<double> ell_hat;   // increasing quadratic-growth envelope
    double epsilon = 0.1;
    double a4_margin = 0.0;        // <= 0 means the one-sided bound held
    double a4_star_margin = 0.0;   // <= 0 means the two-sided bound held
    bool a4_pass = false;
    bool a4_star_pass = false;
    bool a5_pass = false;          // y-free and the z-partial vanishes only at 0
    bool dyf_sign_pass = false;    // extracted quadratic coefficient nonincreasing in y
    bool time_dependent_f = false; // quadratic coefficient varies in t
    std::string note;
};

AuditReport audit_assumptions(const Generator& g, const AuditGrid& grid);

// ===== solver adapters =====

// Deterministic variants route to the backward solver; random variants throw
// VariantMismatch (they have no Markov value surface).
pde::ValueSurface solve_markov(const Generator& g, const pde::PayoffFn& phi,
                               const stoch::TimeGrid& tg, const pde::SpatialGrid& sg,
                               const pde::SchemeParams& sp = {});
double two_stage_value(const Generator& g, const pde::PayoffFn& phi, double t_split,
                       pde::TwoStageMode mode, const stoch::TimeGrid& tg,
                       const pde::SpatialGrid& sg, const pde::SchemeParams& sp = {});

} // namespace qbsde::gen
